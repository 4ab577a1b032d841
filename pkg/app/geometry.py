"""Pinhole camera model, SE(3) poses and disparity/depth conversion.

Conventions used everywhere in the package:

* pixels are ``(u, v)`` = (column, row), zero-based, pixel centers on integers;
* a relative pose ``^sT_tar`` maps points expressed in the target camera frame
  into the source camera frame (``X_src = R @ X_tar + t``).
"""
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, validator
from scipy.spatial.transform import Rotation

from app.errors import BehindCameraError, DomainError

SMALL_ANGLE = 1e-8
ORTHONORMAL_TOL = 1e-9
DEFAULT_MIN_DEPTH = 0.1
DEFAULT_MAX_DEPTH = 100.0


class Pixel(NamedTuple):
    u: float
    v: float


class Point3(NamedTuple):
    x: float
    y: float
    z: float


class Intrinsics(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float

    class Config:
        frozen = True
        extra = "forbid"

    @validator("fx", "fy", "cx", "cy")
    def _finite(cls, value):
        if not math.isfinite(value):
            raise ValueError("intrinsics must be finite")
        return value

    @validator("fx", "fy")
    def _positive_focal(cls, value):
        if value <= 0:
            raise ValueError("focal lengths must be positive")
        return value

    @classmethod
    def centered(cls, height: int, width: int, focal: float) -> "Intrinsics":
        """Square pixels with the principal point at the image center."""
        return cls(fx=focal, fy=focal, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise DomainError("pose entries must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise DomainError("rotation determinant is not +1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(..., 3)``."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """Row-major 3x4 ``[R | t]``."""
        return np.hstack([self.rotation, self.translation[:, None]])

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol)
        )


def hat(r) -> np.ndarray:
    """Skew-symmetric cross-product matrix ``[r]x``."""
    x, y, z = np.asarray(r, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _check_finite(*arrays):
    for array in arrays:
        if not np.all(np.isfinite(array)):
            raise DomainError("non-finite input")


def rotation_from_axis_angle(r) -> np.ndarray:
    """Rodrigues' formula; second-order Taylor expansion below ``SMALL_ANGLE``."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    _check_finite(r)
    theta = float(np.sqrt(r @ r))
    k = hat(r)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    half = 0.5 * theta
    # (1 - cos t) / t^2 written without cancellation
    b = 2.0 * (math.sin(half) / theta) ** 2
    return np.eye(3) + (math.sin(theta) / theta) * k + b * k2


def rotation_jacobian(r) -> np.ndarray:
    """``J[i] = dR/dr_i`` for ``R = rotation_from_axis_angle(r)``."""
    r = np.asarray(r, dtype=np.float64).reshape(3)
    _check_finite(r)
    theta_sq = float(r @ r)
    basis = np.eye(3)
    jac = np.empty((3, 3, 3))
    if math.sqrt(theta_sq) < SMALL_ANGLE:
        k = hat(r)
        for i in range(3):
            e = hat(basis[i])
            jac[i] = e + 0.5 * (e @ k + k @ e)
        return jac
    rotation = rotation_from_axis_angle(r)
    residual = np.eye(3) - rotation
    for i in range(3):
        generator = r[i] * hat(r) + hat(np.cross(r, residual[:, i]))
        jac[i] = (generator / theta_sq) @ rotation
    return jac


def pose_from_axis_angle(r, t) -> Pose:
    t = np.asarray(t, dtype=np.float64).reshape(3)
    _check_finite(t)
    return Pose(rotation_from_axis_angle(r), t)


def pose_from_params(params) -> Pose:
    """Pose from the 6-vector ``(r, t)`` used by the optimizers."""
    params = np.asarray(params, dtype=np.float64).reshape(6)
    return pose_from_axis_angle(params[:3], params[3:])


def axis_angle_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Log map; the rotation vector has norm in [0, pi]."""
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    _check_finite(rotation)
    return Rotation.from_matrix(rotation).as_rotvec()


def pose_to_axis_angle(pose: Pose) -> Tuple[np.ndarray, np.ndarray]:
    return axis_angle_from_rotation(pose.rotation), pose.translation.copy()


def pose_to_params(pose: Pose) -> np.ndarray:
    r, t = pose_to_axis_angle(pose)
    return np.concatenate([r, t])


def compose(a: Pose, b: Pose) -> Pose:
    """``(a o b)(x) = a(b(x))``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rotation_t = a.rotation.T
    return Pose(rotation_t, -rotation_t @ a.translation)


def relative_pose(source_to_world: Pose, target_to_world: Pose) -> Pose:
    """``^sT_tar`` from two camera-to-world poses."""
    return compose(invert(source_to_world), target_to_world)


def backproject(p: Pixel, depth: float, K: Intrinsics) -> Point3:
    if not math.isfinite(depth) or depth <= 0:
        raise DomainError(f"depth must be positive and finite, got {depth}")
    u, v = p
    return Point3(depth * (u - K.cx) / K.fx, depth * (v - K.cy) / K.fy, depth)


def project(P: Point3, K: Intrinsics) -> Pixel:
    x, y, z = P
    if not z > 0:
        raise BehindCameraError(f"cannot project point with Z={z}")
    return Pixel(K.fx * x / z + K.cx, K.fy * y / z + K.cy)


def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    return u, v


def pixel_rays(height: int, width: int, K: Intrinsics) -> np.ndarray:
    """Unnormalized rays with unit Z, shape ``(h, w, 3)``."""
    u, v = pixel_grid(height, width)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def backproject_depth(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise DomainError("depth map must be positive and finite")
    return pixel_rays(depth.shape[0], depth.shape[1], K) * depth[..., None]


def project_points(points: np.ndarray, K: Intrinsics, min_z: float = 0.0):
    """Vectorized projection; returns ``(u, v, in_front)``.

    Points with ``Z <= min_z`` get ``in_front=False`` and coordinates of -1.
    """
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    in_front = z > min_z
    safe_z = np.where(in_front, z, 1.0)
    u = np.where(in_front, K.fx * points[..., 0] / safe_z + K.cx, -1.0)
    v = np.where(in_front, K.fy * points[..., 1] / safe_z + K.cy, -1.0)
    return u, v, in_front


def depth_range_constants(min_depth: float = DEFAULT_MIN_DEPTH, max_depth: float = DEFAULT_MAX_DEPTH):
    """``(a, b)`` such that ``1 / (a*sigma + b)`` spans ``(min_depth, max_depth)``."""
    if not 0 < min_depth < max_depth:
        raise DomainError("depth range must satisfy 0 < min_depth < max_depth")
    b = 1.0 / max_depth
    return 1.0 / min_depth - b, b


def disparity_to_depth(sigma, min_depth: float = DEFAULT_MIN_DEPTH, max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if not np.all((sigma > 0) & (sigma < 1)):
        raise DomainError("disparity must lie in the open interval (0, 1)")
    a, b = depth_range_constants(min_depth, max_depth)
    return 1.0 / (a * sigma + b)


def disparity_to_depth_grad(depth: np.ndarray, min_depth: float = DEFAULT_MIN_DEPTH,
                            max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    """``dD/dsigma`` expressed through the depth itself: ``-a D^2``."""
    a, _ = depth_range_constants(min_depth, max_depth)
    return -a * np.asarray(depth) ** 2


def depth_to_disparity(depth, min_depth: float = DEFAULT_MIN_DEPTH, max_depth: float = DEFAULT_MAX_DEPTH) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all((depth > min_depth) & (depth < max_depth)):
        raise DomainError(f"depth must lie in ({min_depth}, {max_depth})")
    a, b = depth_range_constants(min_depth, max_depth)
    return (1.0 / depth - b) / a


def translation_angle_deg(a: Sequence[float], b: Sequence[float]) -> float:
    """Angle between two translation directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("translation direction undefined for a zero vector")
    cos = np.clip(a @ b / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(cos))


def rotation_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic distance between two rotations."""
    return math.degrees(float(np.linalg.norm(axis_angle_from_rotation(a.T @ b))))
