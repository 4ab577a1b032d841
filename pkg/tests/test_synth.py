import math

import numpy as np
import pytest

from app.errors import DomainError, ShapeError
from app.geometry import Intrinsics, Pose, pose_from_params, pose_to_params
from app.image import ImageBuffer, sample_bilinear
from app.synth import (
    AttachedSpec,
    BoxSpec,
    CameraSpec,
    PlaneSpec,
    Scene,
    TextureSpec,
    TrajectorySpec,
    attached_mask,
    load_scene,
    make_forecast_dataset,
    make_trajectory,
    patch_features,
    render,
    scene_sequence,
)

K = Intrinsics.centered(32, 48, 40.0)
PLANE = PlaneSpec(point=(0.0, 0.0, 10.0), texture=TextureSpec(random_waves=3, seed=2))


def test_fronto_parallel_plane_depth():
    scene = Scene(primitives=[PLANE])
    _, depth = render(scene, Pose.identity(), K, 32, 48)
    assert np.allclose(depth.data, 10.0)
    _, advanced = render(scene, pose_from_params([0, 0, 0, 0, 0, 1.0]), K, 32, 48)
    assert np.allclose(advanced.data, 9.0)


def test_box_in_front_of_plane():
    box = BoxSpec(min_corner=(-1.0, -1.0, 6.0), max_corner=(1.0, 1.0, 7.0))
    _, depth = render(Scene(primitives=[PLANE, box]), Pose.identity(), K, 32, 48)
    assert depth.data.min() == pytest.approx(6.0)
    assert depth.data[16, 24] == pytest.approx(6.0)
    assert depth.data[0, 0] == pytest.approx(10.0)
    assert set(np.unique(np.round(depth.data, 9))) == {6.0, 10.0}


def test_far_plane_behind_bounded_plane():
    small = PlaneSpec(point=(0.0, 0.0, 10.0), half_extent=(1.0, 1.0))
    _, depth = render(Scene(primitives=[small]), Pose.identity(), K, 32, 48)
    assert depth.data[16, 24] == pytest.approx(10.0)
    assert depth.data[0, 0] == pytest.approx(40.0)


def test_camera_facing_away_raises():
    turned = pose_from_params([0, math.pi, 0, 0, 0, 0])
    with pytest.raises(DomainError):
        render(Scene(primitives=[PLANE]), turned, K, 32, 48)


def test_render_is_deterministic_and_in_range():
    scene = Scene(primitives=[PLANE])
    first, _ = render(scene, Pose.identity(), K, 32, 48)
    second, _ = render(scene, Pose.identity(), K, 32, 48)
    assert isinstance(first, ImageBuffer)
    assert np.array_equal(first.data, second.data)
    assert first.data.min() >= 0.0 and first.data.max() <= 1.0


def test_flat_band_is_textureless():
    texture = TextureSpec(random_waves=4, amplitude=0.1, seed=3, flat_band=(-1.0, 1.0))
    s = np.linspace(-5, 5, 11)
    q = np.array([-3.0, 0.0, 0.5, 3.0])
    values = texture.evaluate(*np.meshgrid(s, q))
    assert np.all(values[1:3] == texture.base)
    assert values[0].std() > 0.0


def test_static_trajectory_frames_identical():
    scene = Scene(primitives=[PLANE], camera=CameraSpec(height=16, width=24, focal=20.0),
                  trajectory=TrajectorySpec(kind="static", length=3))
    sequence = scene_sequence(scene)
    assert all(np.array_equal(f.data, sequence.frames[0].data) for f in sequence.frames)


def test_constant_velocity_trajectory():
    trajectory = make_trajectory(TrajectorySpec(length=4, velocity=(0.5, 0.0, 1.0)))
    assert np.allclose(trajectory.positions(), [[0, 0, 0], [0.5, 0, 1], [1.0, 0, 2], [1.5, 0, 3]])
    assert np.allclose(pose_to_params(trajectory.relative(0, 1)), [0, 0, 0, 0.5, 0, 1])


def test_constant_turn_trajectory_rotates():
    trajectory = make_trajectory(TrajectorySpec(kind="constant_turn", length=3, velocity=(0, 0, 1.0),
                                                rotation_rate=(0.0, 0.1, 0.0)))
    assert np.allclose(pose_to_params(trajectory.poses[2])[:3], [0.0, 0.2, 0.0])


def test_attached_patch_moves_with_camera():
    patch = AttachedSpec(depth=2.0, rect=(0.0, 0.75, 1.0, 1.0))
    scene = Scene(primitives=[PLANE, patch], camera=CameraSpec(height=16, width=24, focal=20.0),
                  trajectory=TrajectorySpec(length=3, velocity=(0.3, 0.0, 0.3)))
    sequence = scene_sequence(scene)
    mask = sequence.attached
    assert mask[-1].all() and not mask[0].any()
    for frame, depth in zip(sequence.frames, sequence.depths):
        assert np.array_equal(frame.data[mask], sequence.frames[0].data[mask])
        assert np.allclose(depth.data[mask], 2.0)
    assert not np.array_equal(sequence.frames[0].data[~mask], sequence.frames[2].data[~mask])
    assert np.array_equal(attached_mask(scene, sequence.K, 16, 24), mask)


def test_scene_validation():
    with pytest.raises(ValueError):
        BoxSpec(min_corner=(0, 0, 5), max_corner=(1, 1, 4))
    with pytest.raises(ValueError):
        TrajectorySpec(length=1)
    with pytest.raises(ValueError):
        Scene(primitives=[PLANE], unknown_field=1)


def test_scene_trajectory_must_cover_context_and_horizon():
    short = TrajectorySpec(length=3)
    assert Scene(primitives=[PLANE], trajectory=short, context=2, horizon=1).trajectory.length == 3
    with pytest.raises(ValueError, match=r"context \+ horizon = 4"):
        Scene(primitives=[PLANE], trajectory=short, context=3, horizon=1)
    with pytest.raises(ValueError):
        Scene(primitives=[PLANE], trajectory=short, context=2, horizon=2)


@pytest.mark.parametrize("name", ["plane", "tilted_plane", "plane_box", "textureless_band",
                                  "static_segment", "static", "tam_toy"])
def test_bundled_scenes_load(scene_path, name):
    scene = load_scene(scene_path(name))
    assert scene.name == name
    assert scene.trajectory.length >= scene.context + scene.horizon


def test_patch_features():
    frame = ImageBuffer(np.tile(np.arange(8.0)[None, :, None] / 8.0, (4, 1, 3)))
    features = patch_features(frame, grid=(2, 4))
    assert features.shape == (8,)
    assert np.allclose(features[:4], [0.5 / 8, 2.5 / 8, 4.5 / 8, 6.5 / 8])
    with pytest.raises(ShapeError):
        patch_features(frame, grid=(3, 4))


def test_forecast_dataset(scene_path):
    scene = load_scene(scene_path("tam_toy"))
    first = make_forecast_dataset(scene, n_sequences=6, k=3, seed=4)
    second = make_forecast_dataset(scene, n_sequences=6, k=3, seed=4)
    assert first.features.shape == (6, 3, 48)
    assert first.targets.shape == (6, 6)
    assert len(first) == 6
    assert np.array_equal(first.features, second.features)
    # constant velocity, no turn: the relative pose is a pure translation
    assert np.allclose(first.targets[:, :3], 0.0)
    turning = make_forecast_dataset(scene, n_sequences=4, k=3, seed=4, turn=True)
    assert np.any(turning.targets[:, 1] != 0.0)


def test_rendering_is_band_limited(scene_path):
    scene = load_scene(scene_path("plane"))
    cam = scene.camera
    K = cam.intrinsics()
    before, depth = render(scene, Pose.identity(), K, cam.height, cam.width)
    # a lateral camera step that moves the plane by half a pixel
    step = 0.5 * float(depth.data.mean()) / K.fx
    after, _ = render(scene, Pose(np.eye(3), [step, 0.0, 0.0]), K, cam.height, cam.width)
    u, v = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    resampled, valid, _, _ = sample_bilinear(before.data, u + 0.5, v)
    assert valid[:, :-1].all()
    assert np.abs(resampled - after.data)[valid].mean() < 1e-3


@pytest.mark.parametrize("kind", ["constant_velocity", "constant_turn"])
def test_relative_pose_is_constant_along_trajectory(kind):
    spec = TrajectorySpec(kind=kind, length=6, start=(0.1, -0.2, 0.05, 1.0, 0.5, -2.0),
                          velocity=(0.2, 0.0, 0.5), rotation_rate=(0.0, 0.05, 0.01))
    trajectory = make_trajectory(spec)
    first = trajectory.relative(0, 1)
    for j in range(1, 5):
        assert trajectory.relative(j, j + 1).allclose(first, atol=1e-9)
