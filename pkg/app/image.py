"""Image containers, differentiable bilinear sampling, gradients and resizing."""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from app.errors import DomainError, ShapeError
from app.geometry import Pixel

# coordinates this close to an integer are treated as lying exactly on it
SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ImageBuffer:
    """``(H, W, C)`` float64 intensities in ``[0, 1]``; C is 1 or 3."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ShapeError(f"image must be HxWx1 or HxWx3, got shape {data.shape}")
        if data.shape[0] < 2 or data.shape[1] < 2:
            raise ShapeError(f"image must be at least 2x2, got {data.shape[:2]}")
        if not np.all(np.isfinite(data)):
            raise DomainError("image values must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise DomainError("image values must lie in [0, 1]")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def gray(self) -> np.ndarray:
        return self.data.mean(axis=2)


@dataclass(frozen=True)
class ScalarMap:
    """``(H, W)`` float64 map: depth, disparity, masks, per-pixel losses."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"scalar map must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DomainError("scalar map values must be finite")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class SampleResult:
    value: np.ndarray
    valid: bool
    d_value_d_uv: np.ndarray


def as_image_array(img: Union[ImageBuffer, np.ndarray]) -> np.ndarray:
    data = img.data if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def as_map_array(m: Union[ScalarMap, np.ndarray]) -> np.ndarray:
    return m.data if isinstance(m, ScalarMap) else np.asarray(m, dtype=np.float64)


def _snap(coord: np.ndarray) -> np.ndarray:
    nearest = np.rint(coord)
    return np.where(np.abs(coord - nearest) < SNAP_TOLERANCE, nearest, coord)


def sample_bilinear(data: np.ndarray, u, v):
    """Vectorized bilinear sampling of an ``(H, W, C)`` array.

    Returns ``(values, valid, d_du, d_dv)``; values and derivatives carry a
    trailing channel axis and are exactly zero wherever ``valid`` is false.
    """
    height, width = data.shape[:2]
    u = _snap(np.asarray(u, dtype=np.float64))
    v = _snap(np.asarray(v, dtype=np.float64))
    valid = (u >= 0) & (u <= width - 1) & (v >= 0) & (v <= height - 1)
    uc = np.where(valid, u, 0.0)
    vc = np.where(valid, v, 0.0)
    u0 = np.minimum(np.floor(uc), width - 2).astype(np.intp)
    v0 = np.minimum(np.floor(vc), height - 2).astype(np.intp)
    fu = (uc - u0)[..., None]
    fv = (vc - v0)[..., None]

    i00 = data[v0, u0]
    i01 = data[v0, u0 + 1]
    i10 = data[v0 + 1, u0]
    i11 = data[v0 + 1, u0 + 1]

    values = (1 - fu) * (1 - fv) * i00 + fu * (1 - fv) * i01 + (1 - fu) * fv * i10 + fu * fv * i11
    d_du = (1 - fv) * (i01 - i00) + fv * (i11 - i10)
    d_dv = (1 - fu) * (i10 - i00) + fu * (i11 - i01)

    keep = valid[..., None]
    return np.where(keep, values, 0.0), valid, np.where(keep, d_du, 0.0), np.where(keep, d_dv, 0.0)


def bilinear_sample(img: Union[ImageBuffer, np.ndarray], p: Pixel) -> SampleResult:
    data = as_image_array(img)
    values, valid, d_du, d_dv = sample_bilinear(data, np.array(p[0]), np.array(p[1]))
    return SampleResult(
        value=values,
        valid=bool(valid),
        d_value_d_uv=np.stack([d_du, d_dv], axis=-1),
    )


def gradient_maps(gray: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward differences; the last column (row) of dx (dy) is zero."""
    dx = np.zeros_like(gray)
    dy = np.zeros_like(gray)
    dx[:, :-1] = gray[:, 1:] - gray[:, :-1]
    dy[:-1, :] = gray[1:, :] - gray[:-1, :]
    return dx, dy


def gradient_maps_adjoint(g_dx: np.ndarray, g_dy: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(g_dx)
    grad[:, 1:] += g_dx[:, :-1]
    grad[:, :-1] -= g_dx[:, :-1]
    grad[1:, :] += g_dy[:-1, :]
    grad[:-1, :] -= g_dy[:-1, :]
    return grad


def image_gradients(img: ImageBuffer) -> Tuple[ScalarMap, ScalarMap]:
    dx, dy = gradient_maps(as_image_array(img).mean(axis=2))
    return ScalarMap(dx), ScalarMap(dy)


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape ``(n_out, n_in)``."""
    if n_in < 2 or n_out < 2:
        raise DomainError(f"resize needs at least 2 samples per axis, got {n_in} -> {n_out}")
    coords = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(coords).astype(np.intp), n_in - 2)
    frac = coords - i0
    rows = np.arange(n_out)
    weights = np.zeros((n_out, n_in))
    weights[rows, i0] = 1.0 - frac
    weights[rows, i0 + 1] += frac
    return weights


def resize_array(arr: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Bilinear resize of an ``(H, W)`` or ``(H, W, C)`` array."""
    arr = np.asarray(arr, dtype=np.float64)
    height, width = arr.shape[:2]
    if (height, width) == (new_h, new_w):
        return arr.copy()
    rows = interpolation_matrix(height, new_h)
    cols = interpolation_matrix(width, new_w)
    out = np.tensordot(rows, arr, axes=(1, 0))
    out = np.tensordot(cols, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def resize_adjoint(grad: np.ndarray, height: int, width: int) -> np.ndarray:
    """Transpose of :func:`resize_array` back onto an ``(height, width)`` grid."""
    new_h, new_w = grad.shape[:2]
    if (height, width) == (new_h, new_w):
        return grad.copy()
    rows = interpolation_matrix(height, new_h)
    cols = interpolation_matrix(width, new_w)
    out = np.tensordot(rows.T, grad, axes=(1, 0))
    out = np.tensordot(cols.T, out, axes=(1, 1))
    return np.swapaxes(out, 0, 1)


def resize_bilinear(img: ImageBuffer, new_h: int, new_w: int) -> ImageBuffer:
    out = resize_array(img.data, new_h, new_w)
    # convex weights can overshoot [0, 1] by an ulp
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def resize_map(m: ScalarMap, new_h: int, new_w: int) -> ScalarMap:
    return ScalarMap(resize_array(m.data, new_h, new_w))
