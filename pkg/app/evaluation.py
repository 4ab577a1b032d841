"""Depth error metrics, median scaling, distance-range filtering and trajectory error."""
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

from app.errors import DegenerateAlignmentError, DomainError, EmptyEvaluationError, ShapeError
from app.geometry import Pose
from app.image import ScalarMap, as_map_array

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse_log", "rmse", "delta1", "delta2", "delta3")
DELTA_BASE = 1.25
MIN_SPREAD = 1e-12


class EvalConfig(BaseModel):
    depth_cap: float = 80.0
    min_depth: float = 1e-3
    median_scaling: bool = True
    range_bins: List[Tuple[float, float]] = [(0.0, 10.0), (10.0, 30.0), (30.0, 80.0)]
    ate_snippet: int = 5
    align_scale: bool = True

    class Config:
        extra = "forbid"

    @validator("depth_cap")
    def _cap_positive(cls, value):
        if value <= 0:
            raise ValueError("depth_cap must be positive")
        return value

    @validator("range_bins")
    def _bins_ordered(cls, bins):
        for lo, hi in bins:
            if not 0 <= lo < hi:
                raise ValueError(f"bin ({lo}, {hi}] is empty or negative")
        for (_, hi), (lo, _) in zip(bins, bins[1:]):
            if lo < hi:
                raise ValueError("range bins must be ordered and non-overlapping")
        return bins

    @validator("ate_snippet")
    def _snippet(cls, value):
        if value < 2:
            raise ValueError("ate_snippet must be >= 2")
        return value


class DepthMetrics(BaseModel):
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def row(self) -> List[float]:
        return [getattr(self, name) for name in METRIC_COLUMNS]


class BinMetrics(BaseModel):
    lo: float
    hi: float
    fraction: float
    count: int
    metrics: DepthMetrics


class RangeMetrics(BaseModel):
    scale: float
    bins: Dict[str, BinMetrics]


class AteResult(BaseModel):
    mean: float
    std: float
    snippets: int


def lower_median(values: np.ndarray) -> float:
    """Median of a non-empty set; the lower-middle element for even counts."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyEvaluationError("median of an empty set")
    k = (values.size - 1) // 2
    return float(np.partition(values, k)[k])


def _valid_array(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    valid = as_map_array(valid) if isinstance(valid, ScalarMap) else np.asarray(valid)
    if valid.shape != shape:
        raise ShapeError(f"valid mask {valid.shape} does not match {shape}")
    return valid.astype(bool)


def median_scale(pred, gt, valid=None) -> Tuple[np.ndarray, float]:
    """Returns ``(pred * s, s)`` with ``s = median(gt) / median(pred)`` over ``valid``."""
    pred = as_map_array(pred)
    gt = as_map_array(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    mask = _valid_array(valid, gt.shape)
    if not mask.any():
        raise EmptyEvaluationError("no valid pixels for median scaling")
    pred_median = lower_median(pred[mask])
    if pred_median <= 0:
        raise DomainError("prediction median must be positive")
    scale = lower_median(gt[mask]) / pred_median
    return pred * scale, scale


def compute_errors(gt: np.ndarray, pred: np.ndarray) -> DepthMetrics:
    thresh = np.maximum(gt / pred, pred / gt)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(gt - pred) / gt)),
        sq_rel=float(np.mean((gt - pred) ** 2 / gt)),
        rmse=float(np.sqrt(np.mean((gt - pred) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(gt) - np.log(pred)) ** 2))),
        delta1=float((thresh < DELTA_BASE).mean()),
        delta2=float((thresh < DELTA_BASE ** 2).mean()),
        delta3=float((thresh < DELTA_BASE ** 3).mean()),
    )


def _evaluation_mask(pred: np.ndarray, gt: np.ndarray, valid, cfg: EvalConfig) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    mask = _valid_array(valid, gt.shape) & np.isfinite(gt) & (gt > 0) & (gt <= cfg.depth_cap) & np.isfinite(pred)
    if not mask.any():
        raise EmptyEvaluationError("no valid ground-truth pixels within the depth cap")
    return mask


def _scale_for(pred: np.ndarray, gt: np.ndarray, cfg: EvalConfig) -> float:
    if not cfg.median_scaling:
        return 1.0
    pred_median = lower_median(pred)
    if pred_median <= 0:
        raise DomainError("prediction median must be positive")
    return lower_median(gt) / pred_median


def _clamped(values: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    return np.clip(values, cfg.min_depth, cfg.depth_cap)


def depth_metrics(pred, gt, valid=None, cfg: Optional[EvalConfig] = None) -> DepthMetrics:
    cfg = cfg or EvalConfig()
    pred = as_map_array(pred)
    gt = as_map_array(gt)
    mask = _evaluation_mask(pred, gt, valid, cfg)
    p, g = pred[mask], gt[mask]
    p = p * _scale_for(p, g, cfg)
    return compute_errors(_clamped(g, cfg), _clamped(p, cfg))


def range_filtered_metrics(pred, gt, valid=None, cfg: Optional[EvalConfig] = None) -> RangeMetrics:
    """Per-bin metrics by ground-truth depth ``(lo, hi]`` with one shared median scale."""
    cfg = cfg or EvalConfig()
    pred = as_map_array(pred)
    gt = as_map_array(gt)
    mask = _evaluation_mask(pred, gt, valid, cfg)
    p, g = pred[mask], gt[mask]
    scale = _scale_for(p, g, cfg)
    p = _clamped(p * scale, cfg)
    g_clamped = _clamped(g, cfg)
    bins = {}
    for lo, hi in cfg.range_bins:
        sel = (g > lo) & (g <= hi)
        count = int(sel.sum())
        if count == 0:
            continue
        bins[f"{lo:g}-{hi:g}"] = BinMetrics(
            lo=lo, hi=hi, fraction=count / g.size, count=count,
            metrics=compute_errors(g_clamped[sel], p[sel]),
        )
    return RangeMetrics(scale=scale, bins=bins)


# ---------------------------------------------------------------- trajectories

def _positions(traj) -> np.ndarray:
    if hasattr(traj, "poses"):
        traj = traj.poses
    if len(traj) and isinstance(traj[0], Pose):
        return np.stack([p.translation for p in traj])
    positions = np.asarray(traj, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ShapeError(f"expected (n, 3) positions, got {positions.shape}")
    return positions


def align_umeyama(pred: np.ndarray, gt: np.ndarray, with_scale: bool = True) -> Tuple[float, np.ndarray, np.ndarray]:
    """``(s, R, t)`` minimizing ``sum |gt - (s R pred + t)|^2``."""
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    pc, gc = pred - mu_p, gt - mu_g
    var_p = float((pc ** 2).sum(axis=1).mean())
    if var_p < MIN_SPREAD or float((gc ** 2).sum(axis=1).mean()) < MIN_SPREAD:
        raise DegenerateAlignmentError("trajectory positions are (nearly) identical")
    u, d, vt = np.linalg.svd(gc.T @ pc / pred.shape[0])
    fix = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        fix[2, 2] = -1.0
    rotation = u @ fix @ vt
    scale = float(np.trace(np.diag(d) @ fix) / var_p) if with_scale else 1.0
    return scale, rotation, mu_g - scale * rotation @ mu_p


def ate(pred_traj, gt_traj, align_scale: bool = True, snippet: int = 5) -> AteResult:
    """Mean and population std of per-snippet RMSE after alignment."""
    pred = _positions(pred_traj)
    gt = _positions(gt_traj)
    if pred.shape != gt.shape:
        raise ShapeError(f"trajectories have {len(pred)} and {len(gt)} poses")
    if len(gt) < 2:
        raise DomainError("ATE needs at least 2 poses")
    length = min(snippet, len(gt))
    errors = []
    for start in range(len(gt) - length + 1):
        p, g = pred[start:start + length], gt[start:start + length]
        scale, rotation, translation = align_umeyama(p, g, with_scale=align_scale)
        aligned = scale * p @ rotation.T + translation
        errors.append(math.sqrt(float(((aligned - g) ** 2).sum(axis=1).mean())))
    errors = np.asarray(errors)
    logger.debug(f"ATE over {errors.size} snippets of {length} poses (align_scale={align_scale}): mean {errors.mean():.6f}")
    return AteResult(mean=float(errors.mean()), std=float(errors.std()), snippets=int(errors.size))
