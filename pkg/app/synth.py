"""Deterministic ray-cast scenes, trajectories and forecasting datasets used as ground truth."""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator

from app.errors import DomainError, ShapeError
from app.geometry import Intrinsics, Pose, compose, invert, pixel_rays, pose_from_params, pose_to_params
from app.image import ImageBuffer, ScalarMap

logger = logging.getLogger(__name__)

Vec3 = Tuple[float, float, float]
Vec6 = Tuple[float, float, float, float, float, float]

# ray parameters below this are behind or on the camera
MIN_HIT = 1e-6
CHANNEL_PHASE = 2.0 * math.pi / 3.0


class Wave(BaseModel):
    amplitude: float
    freq_s: float
    freq_q: float
    phase: float = 0.0


class TextureSpec(BaseModel):
    """``base + sum(amp * sin(2pi(fs*s + fq*q) + phase + c*2pi/3))`` clipped to [0, 1].

    Frequencies are in cycles per scene unit. ``random_waves`` extra components
    are drawn from ``seed`` with frequencies below ``max_freq``.
    """

    base: float = 0.5
    waves: List[Wave] = []
    random_waves: int = 0
    amplitude: float = 0.08
    max_freq: float = 0.35
    seed: int = 0
    flat_band: Optional[Tuple[float, float]] = None

    class Config:
        extra = "forbid"

    @validator("base")
    def _base_range(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("base intensity must lie in [0, 1]")
        return value

    def resolved_waves(self) -> List[Wave]:
        rng = np.random.default_rng(self.seed)
        waves = list(self.waves)
        for _ in range(self.random_waves):
            angle = rng.uniform(0.0, math.pi)
            freq = rng.uniform(0.3, 1.0) * self.max_freq
            waves.append(Wave(
                amplitude=self.amplitude * rng.uniform(0.5, 1.0),
                freq_s=freq * math.cos(angle),
                freq_q=freq * math.sin(angle),
                phase=rng.uniform(0.0, 2.0 * math.pi),
            ))
        return waves

    def evaluate(self, s: np.ndarray, q: np.ndarray) -> np.ndarray:
        """RGB intensities at texture coordinates, shape ``s.shape + (3,)``."""
        out = np.full(s.shape + (3,), self.base)
        for wave in self.resolved_waves():
            arg = 2.0 * math.pi * (wave.freq_s * s + wave.freq_q * q) + wave.phase
            for c in range(3):
                out[..., c] += wave.amplitude * np.sin(arg + c * CHANNEL_PHASE)
        if self.flat_band is not None:
            lo, hi = self.flat_band
            out[(q >= lo) & (q <= hi)] = self.base
        return np.clip(out, 0.0, 1.0)


class PlaneSpec(BaseModel):
    kind: Literal["plane"] = "plane"
    point: Vec3
    normal: Vec3 = (0.0, 0.0, -1.0)
    u_axis: Vec3 = (1.0, 0.0, 0.0)
    half_extent: Optional[Tuple[float, float]] = None
    texture: TextureSpec = TextureSpec()

    class Config:
        extra = "forbid"

    @validator("normal", "u_axis")
    def _non_zero(cls, value):
        if np.linalg.norm(value) < 1e-12:
            raise ValueError("direction vectors must be non-zero")
        return value


class BoxSpec(BaseModel):
    kind: Literal["box"] = "box"
    min_corner: Vec3
    max_corner: Vec3
    texture: TextureSpec = TextureSpec()

    class Config:
        extra = "forbid"

    @validator("max_corner")
    def _ordered(cls, value, values):
        if "min_corner" in values and not all(a < b for a, b in zip(values["min_corner"], value)):
            raise ValueError("max_corner must exceed min_corner on every axis")
        return value


class AttachedSpec(BaseModel):
    """A camera-frame rectangle that moves with the camera.

    ``rect`` is ``(u0, v0, u1, v1)`` as fractions of the image width/height.
    """

    kind: Literal["attached"] = "attached"
    depth: float
    rect: Tuple[float, float, float, float]
    texture: TextureSpec = TextureSpec()

    class Config:
        extra = "forbid"

    @validator("depth")
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("attached depth must be positive")
        return value


Primitive = Union[PlaneSpec, BoxSpec, AttachedSpec]


class FarPlaneSpec(BaseModel):
    """Unbounded world plane ``z = depth`` behind everything else."""

    depth: float = 40.0
    texture: TextureSpec = TextureSpec(random_waves=3, max_freq=0.08)

    class Config:
        extra = "forbid"


class CameraSpec(BaseModel):
    height: int = 64
    width: int = 192
    focal: float = 96.0

    class Config:
        extra = "forbid"

    @validator("height", "width")
    def _min_size(cls, value):
        if value < 2:
            raise ValueError("image dimensions must be >= 2")
        return value

    def intrinsics(self) -> Intrinsics:
        return Intrinsics.centered(self.height, self.width, self.focal)


class TrajectorySpec(BaseModel):
    """``C_{j+1} = C_j o delta`` with ``delta = (rotation_rate, velocity)`` in the camera frame."""

    kind: Literal["constant_velocity", "constant_turn", "static"] = "constant_velocity"
    length: int = 3
    start: Vec6 = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    velocity: Vec3 = (0.0, 0.0, 0.0)
    rotation_rate: Vec3 = (0.0, 0.0, 0.0)

    class Config:
        extra = "forbid"

    @validator("length")
    def _min_length(cls, value):
        if value < 2:
            raise ValueError("trajectories need at least 2 poses")
        return value


class Scene(BaseModel):
    name: str = "scene"
    primitives: List[Primitive] = Field(default_factory=list)
    far_plane: FarPlaneSpec = FarPlaneSpec()
    camera: CameraSpec = CameraSpec()
    trajectory: TrajectorySpec = TrajectorySpec()
    context: int = 2
    horizon: int = 1
    seed: int = 0

    class Config:
        extra = "forbid"

    @validator("context", "horizon")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @root_validator(skip_on_failure=True)
    def _trajectory_covers_target(cls, values):
        needed = values["context"] + values["horizon"]
        if values["trajectory"].length < needed:
            raise ValueError(f"trajectory length {values['trajectory'].length} is shorter than "
                             f"context + horizon = {needed}")
        return values


class _Hits(NamedTuple):
    depth: np.ndarray
    index: np.ndarray
    s: np.ndarray
    q: np.ndarray


def load_scene(path) -> Scene:
    scene = Scene.parse_file(Path(path))
    logger.info(f"Loaded scene {scene.name!r} from {path}")
    return scene


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def _plane_frame(normal, u_axis) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = _unit(normal)
    u = np.asarray(u_axis, dtype=np.float64)
    u = _unit(u - (u @ n) * n)
    return n, u, np.cross(n, u)


def _intersect_plane(origin, dirs, point, normal, u_axis, half_extent=None):
    n, su, sq = _plane_frame(normal, u_axis)
    point = np.asarray(point, dtype=np.float64)
    denom = dirs @ n
    safe = np.where(np.abs(denom) > 1e-12, denom, 1.0)
    lam = np.where(np.abs(denom) > 1e-12, ((point - origin) @ n) / safe, np.inf)
    hit_points = origin + dirs * np.where(np.isfinite(lam), lam, 0.0)[..., None]
    s = (hit_points - point) @ su
    q = (hit_points - point) @ sq
    ok = lam > MIN_HIT
    if half_extent is not None:
        ok &= (np.abs(s) <= half_extent[0]) & (np.abs(q) <= half_extent[1])
    return np.where(ok, lam, np.inf), s, q


def _intersect_box(origin, dirs, lo, hi):
    """Slab test; texture coordinates are the two world axes tangent to the hit face."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=-1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=-1)
    entry_axis = np.nanargmax(np.minimum(t0, t1), axis=-1)
    ok = (t_near <= t_far) & (t_near > MIN_HIT)
    lam = np.where(ok, t_near, np.inf)
    hit_points = origin + dirs * np.where(ok, t_near, 0.0)[..., None]
    s = np.where(entry_axis == 0, hit_points[..., 1], hit_points[..., 0])
    q = np.where(entry_axis == 2, hit_points[..., 1], hit_points[..., 2])
    return lam, s, q


def _cast(scene: Scene, camera_pose: Pose, K: Intrinsics, height: int, width: int) -> _Hits:
    rays = pixel_rays(height, width, K)
    dirs = rays @ camera_pose.rotation.T
    origin = camera_pose.translation

    # index 0 is the far plane, primitive i sits at index i + 1
    lam, s, q = _intersect_plane(origin, dirs, (0.0, 0.0, scene.far_plane.depth), (0.0, 0.0, -1.0), (1.0, 0.0, 0.0))
    if not np.all(np.isfinite(lam)):
        raise DomainError("camera rays miss the far plane; the camera must face +z")
    index = np.zeros((height, width), dtype=np.intp)
    for i, prim in enumerate(scene.primitives, start=1):
        if prim.kind == "plane":
            cand, cs, cq = _intersect_plane(origin, dirs, prim.point, prim.normal, prim.u_axis, prim.half_extent)
        elif prim.kind == "box":
            cand, cs, cq = _intersect_box(origin, dirs, prim.min_corner, prim.max_corner)
        else:
            u0, v0, u1, v1 = prim.rect
            col = np.arange(width)[None, :] / max(width - 1, 1)
            row = np.arange(height)[:, None] / max(height - 1, 1)
            inside = (col >= u0) & (col <= u1) & (row >= v0) & (row <= v1)
            cand = np.where(inside, prim.depth, np.inf)
            cs, cq = rays[..., 0] * prim.depth, rays[..., 1] * prim.depth
        closer = cand < lam
        lam = np.where(closer, cand, lam)
        s = np.where(closer, cs, s)
        q = np.where(closer, cq, q)
        index = np.where(closer, i, index)
    return _Hits(lam, index, s, q)


def _shade(scene: Scene, hits: _Hits) -> np.ndarray:
    image = scene.far_plane.texture.evaluate(hits.s, hits.q)
    for i, prim in enumerate(scene.primitives, start=1):
        sel = hits.index == i
        if np.any(sel):
            image[sel] = prim.texture.evaluate(hits.s[sel], hits.q[sel])
    return image


def render(scene: Scene, camera_pose: Pose, K: Intrinsics, h: int, w: int) -> Tuple[ImageBuffer, ScalarMap]:
    """Ray-cast image and camera-frame depth for a camera-to-world pose."""
    hits = _cast(scene, camera_pose, K, h, w)
    return ImageBuffer(_shade(scene, hits)), ScalarMap(hits.depth)


def attached_mask(scene: Scene, K: Intrinsics, h: int, w: int) -> np.ndarray:
    """Pixels showing a camera-attached primitive; identical for every camera pose."""
    hits = _cast(scene, Pose.identity(), K, h, w)
    attached = [i for i, p in enumerate(scene.primitives, start=1) if p.kind == "attached"]
    return np.isin(hits.index, attached)


# ---------------------------------------------------------------- trajectories

@dataclass(frozen=True)
class Trajectory:
    """Camera-to-world poses at uniform timesteps."""

    poses: Tuple[Pose, ...]

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.stack([p.translation for p in self.poses])

    def relative(self, source: int, target: int) -> Pose:
        """``^sT_tar``: maps target-camera points into the source camera."""
        return compose(invert(self.poses[source]), self.poses[target])


def make_trajectory(spec: TrajectorySpec) -> Trajectory:
    if spec.kind == "static":
        delta = Pose.identity()
    else:
        rate = spec.rotation_rate if spec.kind == "constant_turn" else (0.0, 0.0, 0.0)
        delta = pose_from_params(tuple(rate) + tuple(spec.velocity))
    poses = [pose_from_params(spec.start)]
    for _ in range(spec.length - 1):
        poses.append(compose(poses[-1], delta))
    return Trajectory(tuple(poses))


class SequenceFrame(NamedTuple):
    frame: ImageBuffer
    depth: ScalarMap
    pose: Pose


@dataclass
class RenderedSequence:
    items: List[SequenceFrame]
    trajectory: Trajectory
    K: Intrinsics
    attached: np.ndarray

    @property
    def frames(self) -> List[ImageBuffer]:
        return [item.frame for item in self.items]

    @property
    def depths(self) -> List[ScalarMap]:
        return [item.depth for item in self.items]

    def relative_poses(self, target: int) -> List[Pose]:
        """``^{i}T_target`` for every frame ``i``."""
        return [self.trajectory.relative(i, target) for i in range(len(self.items))]


def make_sequence(scene: Scene, trajectory: Trajectory, K: Intrinsics, h: int, w: int) -> RenderedSequence:
    items = []
    for pose in trajectory.poses:
        image, depth = render(scene, pose, K, h, w)
        items.append(SequenceFrame(image, depth, pose))
    return RenderedSequence(items, trajectory, K, attached_mask(scene, K, h, w))


def scene_sequence(scene: Scene) -> RenderedSequence:
    """Render a scene's own trajectory with its own camera."""
    cam = scene.camera
    return make_sequence(scene, make_trajectory(scene.trajectory), cam.intrinsics(), cam.height, cam.width)


# ---------------------------------------------------------------- forecasting features

def patch_features(frame: ImageBuffer, grid: Tuple[int, int] = (4, 12)) -> np.ndarray:
    """Mean-pooled gray intensities on a ``grid`` of cells, flattened row-major."""
    gh, gw = grid
    if frame.height % gh or frame.width % gw:
        raise ShapeError(f"{frame.height}x{frame.width} frame does not split into a {gh}x{gw} grid")
    gray = frame.gray()
    return gray.reshape(gh, frame.height // gh, gw, frame.width // gw).mean(axis=(1, 3)).ravel()


@dataclass
class ForecastDataset:
    features: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def make_forecast_dataset(scene: Scene, n_sequences: int, k: int, grid: Tuple[int, int] = (4, 12),
                          seed: int = 0, turn: bool = False) -> ForecastDataset:
    """Features of ``k`` frames mapped to the 6-vector relative pose of frame ``k`` w.r.t. ``k - 1``.

    Each sequence draws a start position and a constant velocity (and a yaw
    rate when ``turn`` is set).
    """
    rng = np.random.default_rng(seed)
    cam = scene.camera
    K = cam.intrinsics()
    features = np.empty((n_sequences, k, grid[0] * grid[1]))
    targets = np.empty((n_sequences, 6))
    for n in range(n_sequences):
        start = (0.0, 0.0, 0.0, rng.uniform(-1.0, 1.0), rng.uniform(-0.5, 0.5), rng.uniform(0.0, 1.0))
        velocity = (rng.uniform(-0.15, 0.15), rng.uniform(-0.05, 0.05), rng.uniform(0.0, 0.4))
        rate = (0.0, rng.uniform(-0.01, 0.01), 0.0) if turn else (0.0, 0.0, 0.0)
        spec = TrajectorySpec(
            kind="constant_turn" if turn else "constant_velocity",
            length=k + 1, start=start, velocity=velocity, rotation_rate=rate,
        )
        trajectory = make_trajectory(spec)
        for j in range(k):
            image, _ = render(scene, trajectory.poses[j], K, cam.height, cam.width)
            features[n, j] = patch_features(image, grid)
        targets[n] = pose_to_params(trajectory.relative(k - 1, k))
    logger.info(f"Built forecasting dataset: {n_sequences} sequences of {k} frames")
    return ForecastDataset(features, targets)