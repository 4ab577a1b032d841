"""Photometric, smoothness and auto-masked multi-scale objective, with adjoints.

Every kernel comes as a ``*_forward`` returning ``(value, cache)`` and a
``*_backward`` taking the cache and the upstream gradient.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, root_validator, validator
from scipy import ndimage

from app.errors import DomainError, ShapeError
from app.geometry import (
    DEFAULT_MAX_DEPTH,
    DEFAULT_MIN_DEPTH,
    Intrinsics,
    Pose,
    disparity_to_depth,
    disparity_to_depth_grad,
    pose_to_params,
)
from app.image import (
    ImageBuffer,
    ScalarMap,
    as_image_array,
    as_map_array,
    gradient_maps,
    gradient_maps_adjoint,
    resize_adjoint,
    resize_array,
)
from app.warp import WarpResult, warp_jacobians

_WINDOW = np.ones((3, 3, 1))
MIN_DISPARITY_MEAN = 1e-12


class LossConfig(BaseModel):
    alpha: float = 0.15
    alpha_d: float = 1e-3
    scales: int = 4
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    automask_enabled: bool = True
    min_reprojection: bool = False
    min_depth: float = DEFAULT_MIN_DEPTH
    max_depth: float = DEFAULT_MAX_DEPTH

    class Config:
        extra = "forbid"

    @validator("alpha")
    def _alpha_range(cls, value):
        if not 0.0 <= value <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return value

    @validator("alpha_d")
    def _alpha_d_positive(cls, value):
        if value < 0:
            raise ValueError("alpha_d must be non-negative")
        return value

    @validator("scales")
    def _scales_positive(cls, value):
        if value < 1:
            raise ValueError("scales must be >= 1")
        return value

    @root_validator(skip_on_failure=True)
    def _depth_range(cls, values):
        if not 0 < values["min_depth"] < values["max_depth"]:
            raise ValueError("depth range must satisfy 0 < min_depth < max_depth")
        return values


@dataclass
class LossBreakdown:
    total: float
    photometric: float
    smoothness: float
    per_pixel_pe: ScalarMap
    mask: ScalarMap
    scale_photometric: List[float] = field(default_factory=list)
    scale_smoothness: List[float] = field(default_factory=list)
    masks: List[np.ndarray] = field(default_factory=list)

    @property
    def masked_fraction(self) -> float:
        """Fraction of full-resolution pixels the auto-mask rejected."""
        return float(1.0 - self.mask.data.mean())


@dataclass
class LossGradients:
    breakdown: LossBreakdown
    disparities: List[np.ndarray]
    poses: List[np.ndarray]


def _require_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- L1 term

def l1_forward(target: np.ndarray, recon: np.ndarray, mask: np.ndarray) -> np.ndarray:
    _require_same_shape(target, recon)
    return np.abs(target - recon).mean(axis=2) * mask


def l1_backward(target: np.ndarray, recon: np.ndarray, mask: np.ndarray, grad_map: np.ndarray) -> np.ndarray:
    channels = target.shape[2]
    return -np.sign(target - recon) * (grad_map * mask)[..., None] / channels


def l1_photo(target: ImageBuffer, recon: WarpResult) -> ScalarMap:
    return ScalarMap(l1_forward(target.data, recon.image.data, recon.valid_mask.data))


# ---------------------------------------------------------------- SSIM term

@dataclass
class _SsimCache:
    x: np.ndarray
    y: np.ndarray
    count: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    ssim: np.ndarray
    raw: np.ndarray


def _window_count(height: int, width: int) -> np.ndarray:
    """In-image neighbours of every pixel in a 3x3 window."""
    return ndimage.correlate(np.ones((height, width, 1)), _WINDOW, mode="constant", cval=0.0)


def _window_mean(x: np.ndarray, count: np.ndarray) -> np.ndarray:
    return ndimage.correlate(x, _WINDOW, mode="constant", cval=0.0) / count


def _window_mean_adjoint(grad: np.ndarray, count: np.ndarray) -> np.ndarray:
    # the 3x3 box with zero padding is symmetric, hence self-adjoint
    return ndimage.correlate(grad / count, _WINDOW, mode="constant", cval=0.0)


def ssim_forward(x: np.ndarray, y: np.ndarray, c1: float, c2: float) -> Tuple[np.ndarray, _SsimCache]:
    """Per-pixel ``(1 - SSIM(x, y)) / 2`` clamped to [0, 1], channel-averaged."""
    _require_same_shape(x, y)
    count = _window_count(x.shape[0], x.shape[1])
    mu_x = _window_mean(x, count)
    mu_y = _window_mean(y, count)
    sigma_xx = _window_mean(x * x, count) - mu_x * mu_x
    sigma_yy = _window_mean(y * y, count) - mu_y * mu_y
    sigma_xy = _window_mean(x * y, count) - mu_x * mu_y
    n1 = 2.0 * mu_x * mu_y + c1
    n2 = 2.0 * sigma_xy + c2
    d1 = mu_x * mu_x + mu_y * mu_y + c1
    d2 = sigma_xx + sigma_yy + c2
    ssim = (n1 * n2) / (d1 * d2)
    raw = (1.0 - ssim) / 2.0
    dissim = np.clip(raw, 0.0, 1.0).mean(axis=2)
    return dissim, _SsimCache(x, y, count, mu_x, mu_y, n1, n2, d1, d2, ssim, raw)


def ssim_backward(cache: _SsimCache, grad_map: np.ndarray) -> np.ndarray:
    """Gradient with respect to the second image ``y``."""
    channels = cache.x.shape[2]
    inside = (cache.raw >= 0.0) & (cache.raw <= 1.0)
    g_ssim = -0.5 * np.where(inside, grad_map[..., None] / channels, 0.0)
    denom = cache.d1 * cache.d2
    g_n1 = g_ssim * cache.n2 / denom
    g_n2 = g_ssim * cache.n1 / denom
    g_d1 = -g_ssim * cache.ssim / cache.d1
    g_d2 = -g_ssim * cache.ssim / cache.d2

    g_mu_y = 2.0 * cache.mu_x * g_n1 + 2.0 * cache.mu_y * g_d1 - 2.0 * cache.mu_x * g_n2 - 2.0 * cache.mu_y * g_d2
    g_mean_yy = g_d2
    g_mean_xy = 2.0 * g_n2
    return (
        _window_mean_adjoint(g_mu_y, cache.count)
        + 2.0 * cache.y * _window_mean_adjoint(g_mean_yy, cache.count)
        + cache.x * _window_mean_adjoint(g_mean_xy, cache.count)
    )


def ssim_dissim(target: ImageBuffer, recon: ImageBuffer, cfg: Optional[LossConfig] = None) -> ScalarMap:
    cfg = cfg or LossConfig()
    dissim, _ = ssim_forward(target.data, recon.data, cfg.ssim_c1, cfg.ssim_c2)
    return ScalarMap(dissim)


# ---------------------------------------------------------------- photometric

@dataclass
class _PhotoCache:
    target: np.ndarray
    recon: np.ndarray
    mask: np.ndarray
    ssim: _SsimCache
    alpha: float


def photometric_forward(target: np.ndarray, recon: np.ndarray, mask: np.ndarray,
                        cfg: LossConfig) -> Tuple[np.ndarray, _PhotoCache]:
    _require_same_shape(target, recon)
    # invalid samples are replaced by the target so they cannot leak into neighbouring SSIM windows
    composite = np.where(mask[..., None] > 0, recon, target)
    dissim, ssim_cache = ssim_forward(target, composite, cfg.ssim_c1, cfg.ssim_c2)
    l1 = l1_forward(target, recon, mask)
    pe = ((1.0 - cfg.alpha) * dissim + cfg.alpha * l1) * mask
    return pe, _PhotoCache(target, recon, mask, ssim_cache, cfg.alpha)


def photometric_backward(cache: _PhotoCache, grad_map: np.ndarray) -> np.ndarray:
    g = grad_map * cache.mask
    g_composite = ssim_backward(cache.ssim, (1.0 - cache.alpha) * g)
    g_recon = np.where(cache.mask[..., None] > 0, g_composite, 0.0)
    return g_recon + l1_backward(cache.target, cache.recon, cache.mask, cache.alpha * g)


def photometric(target: ImageBuffer, recon: WarpResult, cfg: LossConfig) -> ScalarMap:
    pe, _ = photometric_forward(target.data, recon.image.data, recon.valid_mask.data, cfg)
    return ScalarMap(pe)


# ---------------------------------------------------------------- smoothness

@dataclass
class _SmoothCache:
    disparity: np.ndarray
    mean: float
    dx: np.ndarray
    dy: np.ndarray
    wx: np.ndarray
    wy: np.ndarray


def smoothness_forward(disparity: np.ndarray, image: np.ndarray) -> Tuple[float, _SmoothCache]:
    image = as_image_array(image)
    if disparity.shape != image.shape[:2]:
        raise ShapeError(f"disparity {disparity.shape} and image {image.shape[:2]} disagree")
    mean = float(disparity.mean())
    if abs(mean) < MIN_DISPARITY_MEAN:
        raise DomainError("disparity mean is zero; cannot mean-normalize")
    dx, dy = gradient_maps(disparity / mean)
    ix, iy = gradient_maps(image.mean(axis=2))
    wx, wy = np.exp(-np.abs(ix)), np.exp(-np.abs(iy))
    value = float((np.abs(dx) * wx + np.abs(dy) * wy).sum() / disparity.size)
    return value, _SmoothCache(disparity, mean, dx, dy, wx, wy)


def smoothness_backward(cache: _SmoothCache, grad: float) -> np.ndarray:
    scale = grad / cache.disparity.size
    g_norm = gradient_maps_adjoint(np.sign(cache.dx) * cache.wx * scale, np.sign(cache.dy) * cache.wy * scale)
    # d_hat = d / mean(d)
    inner = float((g_norm * cache.disparity).sum())
    return g_norm / cache.mean - inner / (cache.mean ** 2 * cache.disparity.size)


def smoothness(disparity: ScalarMap, img: ImageBuffer) -> float:
    value, _ = smoothness_forward(as_map_array(disparity), img.data)
    return value


# ---------------------------------------------------------------- auto-mask

def auto_mask(target: ImageBuffer, recon: WarpResult, unwarped_source: ImageBuffer, cfg: LossConfig) -> ScalarMap:
    """1 where the warped reconstruction beats the unwarped frame (strictly)."""
    _require_same_shape(target.data, unwarped_source.data)
    pe_recon = photometric(target, recon, cfg).data
    pe_identity, _ = photometric_forward(target.data, unwarped_source.data, np.ones(target.data.shape[:2]), cfg)
    return ScalarMap((pe_recon < pe_identity).astype(np.float64))


# ---------------------------------------------------------------- total objective

def pyramid_shapes(height: int, width: int, scales: int) -> List[Tuple[int, int]]:
    shapes = []
    for s in range(scales):
        factor = 2 ** s
        if height % factor or width % factor or height // factor < 2 or width // factor < 2:
            raise ShapeError(f"{height}x{width} image does not support {scales} pyramid levels")
        shapes.append((height // factor, width // factor))
    return shapes


def _aggregate(pes: List[np.ndarray], valids: List[np.ndarray], use_min: bool):
    """Combine per-context losses; returns the map and per-context weights."""
    if use_min:
        stacked = np.stack([np.where(v > 0, pe, np.inf) for pe, v in zip(pes, valids)])
        best = np.argmin(stacked, axis=0)
        any_valid = np.isfinite(np.min(stacked, axis=0))
        agg = np.where(any_valid, np.min(stacked, axis=0), 0.0)
        weights = [((best == i) & any_valid).astype(np.float64) for i in range(len(pes))]
        return agg, weights
    count = np.maximum(np.sum(valids, axis=0), 1.0)
    agg = np.sum(pes, axis=0) / count
    return agg, [v / count for v in valids]


def _evaluate(context: Sequence[ImageBuffer], target: ImageBuffer, disparities: Sequence[np.ndarray],
              pose_params: Sequence[np.ndarray], K: Intrinsics, cfg: LossConfig,
              fixed_masks: Optional[Sequence[np.ndarray]], need_grad: bool) -> LossGradients:
    if not context:
        raise DomainError("at least one context frame is required")
    if len(pose_params) != len(context):
        raise ShapeError(f"{len(context)} context frames but {len(pose_params)} poses")
    tgt = target.data
    height, width = tgt.shape[:2]
    for frame in context:
        _require_same_shape(frame.data, tgt)
    shapes = pyramid_shapes(height, width, cfg.scales)
    disparities = [as_map_array(d) for d in disparities]
    if [d.shape for d in disparities] != shapes:
        raise ShapeError(f"disparity pyramid {[d.shape for d in disparities]} does not match {shapes}")
    if fixed_masks is not None and len(fixed_masks) != cfg.scales:
        raise ShapeError("fixed_masks needs one mask per scale")

    n_pixels = float(height * width)
    ones = np.ones((height, width))
    identity_pe = None
    if cfg.automask_enabled and fixed_masks is None:
        # identity baseline is the temporally nearest context frame
        identity_pe, _ = photometric_forward(tgt, context[-1].data, ones, cfg)

    grad_disp = [np.zeros_like(d) for d in disparities]
    grad_pose = [np.zeros(6) for _ in context]
    scale_photo, scale_smooth, masks = [], [], []
    pe_full = mask_full = None

    for s, sigma in enumerate(disparities):
        sigma_up = resize_array(sigma, height, width)
        depth = disparity_to_depth(sigma_up, cfg.min_depth, cfg.max_depth)
        jacobians, caches, pes, valids = [], [], [], []
        for frame, params in zip(context, pose_params):
            jac = warp_jacobians(frame, depth, params, K)
            valid = jac.result.valid_mask.data
            pe, cache = photometric_forward(tgt, jac.result.image.data, valid, cfg)
            jacobians.append(jac)
            caches.append(cache)
            pes.append(pe)
            valids.append(valid)
        agg, weights = _aggregate(pes, valids, cfg.min_reprojection)

        if fixed_masks is not None:
            mu = np.asarray(fixed_masks[s], dtype=np.float64)
        elif identity_pe is not None:
            mu = (agg < identity_pe).astype(np.float64)
        else:
            mu = ones
        photo = float((mu * agg).sum() / n_pixels)

        target_s = tgt if sigma.shape == (height, width) else resize_array(tgt, *sigma.shape)
        smooth, smooth_cache = smoothness_forward(sigma, target_s)
        scale_photo.append(photo)
        scale_smooth.append(smooth)
        masks.append(mu)
        if s == 0:
            pe_full, mask_full = agg, mu

        if not need_grad:
            continue
        g_agg = mu / n_pixels
        g_depth = np.zeros((height, width))
        for i, (jac, cache) in enumerate(zip(jacobians, caches)):
            g_recon = photometric_backward(cache, g_agg * weights[i])
            g_depth += np.einsum("hwc,hwc->hw", g_recon, jac.d_depth)
            grad_pose[i] += np.einsum("hwc,hwck->k", g_recon, jac.d_pose)
        g_sigma_up = g_depth * disparity_to_depth_grad(depth, cfg.min_depth, cfg.max_depth)
        grad_disp[s] = resize_adjoint(g_sigma_up, *sigma.shape) + cfg.alpha_d * smoothness_backward(smooth_cache, 1.0)

    photometric_total = float(sum(scale_photo))
    smoothness_total = float(sum(scale_smooth))
    breakdown = LossBreakdown(
        total=float(sum(p + cfg.alpha_d * q for p, q in zip(scale_photo, scale_smooth))),
        photometric=photometric_total,
        smoothness=smoothness_total,
        per_pixel_pe=ScalarMap(pe_full),
        mask=ScalarMap(mask_full),
        scale_photometric=scale_photo,
        scale_smoothness=scale_smooth,
        masks=masks,
    )
    return LossGradients(breakdown, grad_disp, grad_pose)


def total_loss(context: Sequence[ImageBuffer], target: ImageBuffer, disparities: Sequence, poses: Sequence[Pose],
               K: Intrinsics, cfg: LossConfig, fixed_masks: Optional[Sequence[np.ndarray]] = None) -> LossBreakdown:
    """Multi-scale objective; ``context`` is ordered oldest to newest."""
    params = [pose_to_params(p) for p in poses]
    return _evaluate(context, target, disparities, params, K, cfg, fixed_masks, need_grad=False).breakdown


def total_loss_with_grad(context: Sequence[ImageBuffer], target: ImageBuffer, disparities: Sequence,
                         pose_params: Sequence, K: Intrinsics, cfg: LossConfig,
                         fixed_masks: Optional[Sequence[np.ndarray]] = None) -> LossGradients:
    """Objective plus gradients with respect to every disparity map and pose 6-vector.

    The auto-mask is held constant during differentiation.
    """
    params = [np.asarray(p, dtype=np.float64).reshape(6) for p in pose_params]
    return _evaluate(context, target, disparities, params, K, cfg, fixed_masks, need_grad=True)
