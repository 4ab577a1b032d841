import numpy as np
import pytest

from app.geometry import Intrinsics
from app.image import ImageBuffer
from app.synth import load_scene, scene_sequence
from app.cli import SCENES_DIR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics():
    return Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0)


@pytest.fixture
def small_intrinsics():
    return Intrinsics.centered(16, 16, 12.0)


@pytest.fixture
def random_image(rng):
    def make(height=16, width=16, channels=3):
        return ImageBuffer(rng.uniform(0.05, 0.95, size=(height, width, channels)))
    return make


@pytest.fixture(scope="session")
def scene_path():
    def path(name):
        return SCENES_DIR / f"{name}.json"
    return path


@pytest.fixture(scope="session")
def rendered():
    """Rendered sequences of the bundled scenes, cached for the session."""
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = scene_sequence(load_scene(SCENES_DIR / f"{name}.json"))
        return cache[name]
    return get
