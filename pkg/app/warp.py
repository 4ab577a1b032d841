"""Reverse warping of a source frame into the target view, with Jacobians."""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from app.errors import DomainError, ShapeError
from app.geometry import (
    Intrinsics,
    Pose,
    pixel_rays,
    project_points,
    rotation_from_axis_angle,
    rotation_jacobian,
)
from app.image import ImageBuffer, ScalarMap, as_image_array, as_map_array, sample_bilinear

# transformed points closer than this to the camera plane are invalid
MIN_Z = 1e-6


@dataclass(frozen=True)
class WarpResult:
    image: ImageBuffer
    valid_mask: ScalarMap
    coords: Tuple[ScalarMap, ScalarMap]


@dataclass(frozen=True)
class WarpJacobians:
    """Per-pixel derivatives of the reconstruction.

    ``d_depth[h, w, c]`` is the derivative of pixel ``(h, w)`` channel ``c``
    with respect to the target depth at the same pixel; ``d_pose[h, w, c, k]``
    with respect to pose parameter ``k`` of ``(r, t)``.
    """

    result: WarpResult
    d_depth: np.ndarray
    d_pose: np.ndarray


def _check_shapes(source: np.ndarray, depth: np.ndarray) -> None:
    if depth.ndim != 2 or source.shape[:2] != depth.shape:
        raise ShapeError(f"source {source.shape[:2]} and depth {depth.shape} dimensions disagree")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise DomainError("target depth must be strictly positive and finite")


def _make_result(values: np.ndarray, valid: np.ndarray, u: np.ndarray, v: np.ndarray) -> WarpResult:
    # convex weights may overshoot [0, 1] by an ulp
    return WarpResult(
        image=ImageBuffer(np.clip(values, 0.0, 1.0)),
        valid_mask=ScalarMap(valid.astype(np.float64)),
        coords=(ScalarMap(np.where(valid, u, 0.0)), ScalarMap(np.where(valid, v, 0.0))),
    )


def _warp_arrays(source: np.ndarray, depth: np.ndarray, rotation: np.ndarray, translation: np.ndarray,
                 K: Intrinsics):
    rays = pixel_rays(depth.shape[0], depth.shape[1], K)
    points = rays * depth[..., None]
    moved = points @ rotation.T + translation
    u, v, in_front = project_points(moved, K, min_z=MIN_Z)
    values, valid, d_du, d_dv = sample_bilinear(source, u, v)
    valid &= in_front
    return rays, points, moved, u, v, values, valid, d_du, d_dv


def source_coordinates(target_depth: Union[ScalarMap, np.ndarray], pose_params, K: Intrinsics):
    """Continuous source coordinates ``(u, v, in_front)`` of every target pixel."""
    depth = as_map_array(target_depth)
    pose_params = np.asarray(pose_params, dtype=np.float64).reshape(6)
    points = pixel_rays(depth.shape[0], depth.shape[1], K) * depth[..., None]
    moved = points @ rotation_from_axis_angle(pose_params[:3]).T + pose_params[3:]
    return project_points(moved, K, min_z=MIN_Z)


def reverse_warp(source: Union[ImageBuffer, np.ndarray], target_depth: Union[ScalarMap, np.ndarray],
                 pose_tar_to_src: Pose, K: Intrinsics) -> WarpResult:
    src = as_image_array(source)
    depth = as_map_array(target_depth)
    _check_shapes(src, depth)
    _, _, _, u, v, values, valid, _, _ = _warp_arrays(
        src, depth, pose_tar_to_src.rotation, pose_tar_to_src.translation, K)
    return _make_result(values, valid, u, v)


def warp_jacobians(source: Union[ImageBuffer, np.ndarray], target_depth: Union[ScalarMap, np.ndarray],
                   pose_params, K: Intrinsics) -> WarpJacobians:
    src = as_image_array(source)
    depth = as_map_array(target_depth)
    _check_shapes(src, depth)
    pose_params = np.asarray(pose_params, dtype=np.float64).reshape(6)
    r, t = pose_params[:3], pose_params[3:]
    rotation = rotation_from_axis_angle(r)
    rays, points, moved, u, v, values, valid, d_du, d_dv = _warp_arrays(src, depth, rotation, t, K)

    x, y = moved[..., 0], moved[..., 1]
    z = np.where(valid, moved[..., 2], 1.0)
    # d(u, v)/d(X', Y', Z')
    du_dp = np.stack([K.fx / z, np.zeros_like(z), -K.fx * x / z ** 2], axis=-1)
    dv_dp = np.stack([np.zeros_like(z), K.fy / z, -K.fy * y / z ** 2], axis=-1)

    # d(X', Y', Z') with respect to depth, rotation and translation
    dp_dd = rays @ rotation.T
    dp_dr = np.einsum("iab,hwb->hwai", rotation_jacobian(r), points)
    dp_dpose = np.concatenate([dp_dr, np.broadcast_to(np.eye(3), dp_dr.shape)], axis=-1)

    du_dd = np.einsum("hwa,hwa->hw", du_dp, dp_dd)
    dv_dd = np.einsum("hwa,hwa->hw", dv_dp, dp_dd)
    du_dpose = np.einsum("hwa,hwak->hwk", du_dp, dp_dpose)
    dv_dpose = np.einsum("hwa,hwak->hwk", dv_dp, dp_dpose)

    keep = valid[..., None]
    d_depth = np.where(keep, d_du * du_dd[..., None] + d_dv * dv_dd[..., None], 0.0)
    d_pose = d_du[..., None] * du_dpose[:, :, None, :] + d_dv[..., None] * dv_dpose[:, :, None, :]
    d_pose = np.where(keep[..., None], d_pose, 0.0)
    return WarpJacobians(result=_make_result(values, valid, u, v), d_depth=d_depth, d_pose=d_pose)
