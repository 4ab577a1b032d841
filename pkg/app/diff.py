"""Differentiation contract, finite-difference checker and Adam-driven optimizers."""
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, validator
from scipy.special import expit

from app.errors import DivergenceError, ShapeError
from app.geometry import Intrinsics, Pose, disparity_to_depth, pose_from_params
from app.image import ImageBuffer, ScalarMap, resize_adjoint, resize_array
from app.loss import LossBreakdown, LossConfig, pyramid_shapes, total_loss_with_grad
from app.tam import TamConfig, init_weights, tam_backward, tam_forward_with_cache

logger = logging.getLogger(__name__)

DISPARITY_SEGMENT = "disparity_logits"
POSE_SEGMENT = "pose"


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """Flat fp64 parameters split into named, shaped segments."""

    def __init__(self, data: np.ndarray, segments: Sequence[Segment]):
        data = np.asarray(data, dtype=np.float64).ravel()
        if sum(s.size for s in segments) != data.size:
            raise ShapeError(f"segments cover {sum(s.size for s in segments)} values, data has {data.size}")
        self.data = data
        self.segments = tuple(segments)
        self._index = {s.name: s for s in self.segments}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        segments, chunks, offset = [], [], 0
        for name, array in arrays.items():
            array = np.asarray(array, dtype=np.float64)
            segments.append(Segment(name, offset, tuple(array.shape)))
            chunks.append(array.ravel())
            offset += array.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, segments)

    def __len__(self) -> int:
        return self.data.size

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> np.ndarray:
        s = self._index[name]
        return self.data[s.offset:s.offset + s.size].reshape(s.shape)

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.segments]

    def to_dict(self) -> Dict[str, np.ndarray]:
        return {name: self[name] for name in self.names}

    def with_data(self, data: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(data, dtype=np.float64), self.segments)

    def zeros_like(self) -> "ParamVector":
        return self.with_data(np.zeros_like(self.data))

    def like(self, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        """Pack ``arrays`` using this vector's segment layout."""
        data = np.zeros_like(self.data)
        for s in self.segments:
            data[s.offset:s.offset + s.size] = np.asarray(arrays[s.name], dtype=np.float64).ravel()
        return self.with_data(data)

    def coordinate_name(self, index: int) -> str:
        for s in self.segments:
            if s.offset <= index < s.offset + s.size:
                local = np.unravel_index(index - s.offset, s.shape) if s.shape else ()
                return f"{s.name}[{','.join(str(int(i)) for i in local)}]"
        raise IndexError(index)

    def check_finite(self, what: str = "parameters") -> None:
        for s in self.segments:
            if not np.all(np.isfinite(self[s.name])):
                raise DivergenceError(f"non-finite {what} in segment {s.name!r}", segment=s.name)


# ---------------------------------------------------------------- Adam

class AdamConfig(BaseModel):
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_step: Optional[int] = None
    decay_lr: float = 1e-5

    class Config:
        extra = "forbid"

    @validator("lr", "decay_lr", "eps")
    def _positive(cls, value):
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @validator("beta1", "beta2")
    def _beta_range(cls, value):
        if not 0.0 <= value < 1.0:
            raise ValueError("betas must lie in [0, 1)")
        return value


@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    config: AdamConfig

    @classmethod
    def initial(cls, size: int, config: Optional[AdamConfig] = None) -> "AdamState":
        return cls(0, np.zeros(size), np.zeros(size), config or AdamConfig())

    @property
    def lr(self) -> float:
        cfg = self.config
        if cfg.decay_step is not None and self.step >= cfg.decay_step:
            return cfg.decay_lr
        return cfg.lr


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState) -> Tuple[ParamVector, AdamState]:
    if len(params) != len(grads) or state.m.size != len(params):
        raise ShapeError(f"params ({len(params)}), grads ({len(grads)}) and moments ({state.m.size}) disagree")
    grads.check_finite("gradient")
    cfg = state.config
    lr = state.lr
    t = state.step + 1
    g = grads.data
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    data = params.data - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params.with_data(data), AdamState(t, m, v, cfg)


# ---------------------------------------------------------------- gradient checking

class GradCheckReport(BaseModel):
    name: str = ""
    passed: bool
    max_rel_error: float
    failing: List[str] = []
    per_segment: Dict[str, float] = {}
    checked: int = 0


def finite_diff_check(
    f: Callable[[ParamVector], float],
    analytic_grad: Union[ParamVector, Callable[[ParamVector], ParamVector]],
    point: ParamVector,
    step: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-5,
    name: str = "",
    max_failing: int = 20,
) -> GradCheckReport:
    """Central differences per coordinate against an analytic gradient.

    The relative error of a coordinate is ``|a - n| / max(|n|, abs_floor)``.
    """
    analytic = analytic_grad(point) if callable(analytic_grad) else analytic_grad
    if len(analytic) != len(point):
        raise ShapeError(f"gradient has {len(analytic)} entries, point has {len(point)}")
    numeric = np.empty(len(point))
    for i in range(len(point)):
        plus = point.data.copy()
        minus = point.data.copy()
        plus[i] += step
        minus[i] -= step
        numeric[i] = (f(point.with_data(plus)) - f(point.with_data(minus))) / (2.0 * step)

    rel = np.abs(analytic.data - numeric) / np.maximum(np.abs(numeric), abs_floor)
    per_segment = {
        s.name: float(rel[s.offset:s.offset + s.size].max()) if s.size else 0.0 for s in point.segments
    }
    bad = np.flatnonzero(~(rel <= rel_tol))
    return GradCheckReport(
        name=name,
        passed=bad.size == 0,
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        failing=[point.coordinate_name(int(i)) for i in bad[:max_failing]],
        per_segment=per_segment,
        checked=len(point),
    )


class DiffKernel(ABC):
    """A scalar function of a ``ParamVector`` paired with its adjoint."""

    name = "kernel"

    @abstractmethod
    def forward(self, params: ParamVector) -> float:
        ...

    @abstractmethod
    def backward(self, params: ParamVector) -> ParamVector:
        ...

    def check(self, params: ParamVector, step: float = 1e-5, rel_tol: float = 1e-4) -> GradCheckReport:
        return finite_diff_check(self.forward, self.backward, params, step=step, rel_tol=rel_tol, name=self.name)


# ---------------------------------------------------------------- direct depth/pose optimization

def disparity_segment(scale: int) -> str:
    return f"{DISPARITY_SEGMENT}.{scale}"


def pose_segment(index: int) -> str:
    return f"{POSE_SEGMENT}_{index}"


class DepthPoseObjective(DiffKernel):
    """Multi-scale objective over coarse-to-fine disparity logits and context poses.

    The logits of scale ``s`` are its own residual plus the upsampled logits of
    scale ``s + 1``; disparity is ``sigmoid(logits)``.
    """

    name = "total_loss"

    def __init__(self, context: Sequence[ImageBuffer], target: ImageBuffer, K: Intrinsics, cfg: LossConfig,
                 fixed_masks: Optional[Sequence[np.ndarray]] = None):
        self.context = list(context)
        self.target = target
        self.K = K
        self.cfg = cfg
        self.fixed_masks = fixed_masks
        self.shapes = pyramid_shapes(target.height, target.width, cfg.scales)

    def initial_params(self) -> ParamVector:
        arrays = {disparity_segment(s): np.zeros(shape) for s, shape in enumerate(self.shapes)}
        arrays.update({pose_segment(i): np.zeros(6) for i in range(len(self.context))})
        return ParamVector.from_arrays(arrays)

    def logits(self, params: ParamVector) -> List[np.ndarray]:
        out: List[Optional[np.ndarray]] = [None] * len(self.shapes)
        for s in reversed(range(len(self.shapes))):
            residual = params[disparity_segment(s)]
            out[s] = residual if s == len(self.shapes) - 1 else residual + resize_array(out[s + 1], *self.shapes[s])
        return out

    def disparities(self, params: ParamVector) -> List[np.ndarray]:
        return [expit(logit) for logit in self.logits(params)]

    def pose_params(self, params: ParamVector) -> List[np.ndarray]:
        return [params[pose_segment(i)] for i in range(len(self.context))]

    def evaluate(self, params: ParamVector):
        sigmas = self.disparities(params)
        result = total_loss_with_grad(self.context, self.target, sigmas, self.pose_params(params), self.K,
                                      self.cfg, fixed_masks=self.fixed_masks)
        grads = {pose_segment(i): g for i, g in enumerate(result.poses)}
        # sigmoid, then coarse-to-fine accumulation back through the upsampling chain
        g_logits = [g * sigma * (1.0 - sigma) for g, sigma in zip(result.disparities, sigmas)]
        for s in range(len(self.shapes)):
            grads[disparity_segment(s)] = g_logits[s]
            if s + 1 < len(self.shapes):
                g_logits[s + 1] = g_logits[s + 1] + resize_adjoint(g_logits[s], *self.shapes[s + 1])
        return result.breakdown, params.like(grads)

    def forward(self, params: ParamVector) -> float:
        return self.evaluate(params)[0].total

    def backward(self, params: ParamVector) -> ParamVector:
        return self.evaluate(params)[1]


class RecoverConfig(BaseModel):
    loss: LossConfig = LossConfig()
    adam: AdamConfig = AdamConfig()
    steps: int = 5000
    log_every: int = 500

    class Config:
        extra = "forbid"

    @validator("steps", "log_every")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value


@dataclass(frozen=True)
class LossRecord:
    step: int
    total: float
    photometric: float
    smoothness: float
    lr: float


@dataclass
class RecoveryResult:
    disparities: List[ScalarMap]
    depth: ScalarMap
    poses: List[Pose]
    history: List[LossRecord]
    breakdown: LossBreakdown
    params: ParamVector


def optimize_depth_pose(context: Sequence[ImageBuffer], target: ImageBuffer, K: Intrinsics,
                        cfg: Optional[RecoverConfig] = None) -> RecoveryResult:
    """Direct Adam minimization of the total loss over disparity logits and poses.

    Returned poses map target-frame points into each context frame.
    """
    cfg = cfg or RecoverConfig()
    objective = DepthPoseObjective(context, target, K, cfg.loss)
    params = objective.initial_params()
    state = AdamState.initial(len(params), cfg.adam)
    history: List[LossRecord] = []

    for step in range(cfg.steps + 1):
        breakdown, grads = objective.evaluate(params)
        if not math.isfinite(breakdown.total):
            raise DivergenceError(f"loss became non-finite at step {step}", step=step)
        history.append(LossRecord(step, breakdown.total, breakdown.photometric, breakdown.smoothness, state.lr))
        if step % cfg.log_every == 0:
            logger.info(f"step {step}: loss={breakdown.total:.6f} photometric={breakdown.photometric:.6f} "
                        f"masked={breakdown.masked_fraction:.3f}")
        if step == cfg.steps:
            break
        try:
            params, state = adam_step(params, grads, state)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}", step=step, segment=exc.segment)

    sigmas = objective.disparities(params)
    return RecoveryResult(
        disparities=[ScalarMap(s) for s in sigmas],
        depth=ScalarMap(disparity_to_depth(sigmas[0], cfg.loss.min_depth, cfg.loss.max_depth)),
        poses=[pose_from_params(p) for p in objective.pose_params(params)],
        history=history,
        breakdown=breakdown,
        params=params,
    )


# ---------------------------------------------------------------- toy TAM training

class TamToyConfig(BaseModel):
    tam: TamConfig = TamConfig(k=4, d_model=16, heads=4, layers=2)
    adam: AdamConfig = AdamConfig(lr=3e-3)
    steps: int = 1500
    holdout_fraction: float = 0.25
    seed: int = 0
    shuffle_labels: bool = False
    log_every: int = 250

    class Config:
        extra = "forbid"

    @validator("holdout_fraction")
    def _fraction(cls, value):
        if not 0.0 < value < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")
        return value

    @validator("steps", "log_every")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value


@dataclass
class TamTrainingResult:
    weights: Dict[str, np.ndarray]
    normalization: Dict[str, np.ndarray]
    train_history: List[float] = field(default_factory=list)
    heldout_history: List[float] = field(default_factory=list)
    heldout_mse: float = 0.0
    target_variance: float = 0.0

    @property
    def mse_ratio(self) -> float:
        return self.heldout_mse / self.target_variance if self.target_variance > 0 else math.inf

    def tensors(self) -> Dict[str, np.ndarray]:
        out = dict(self.weights)
        out.update({f"norm.{name}": value for name, value in self.normalization.items()})
        return out


def _standardize(values: np.ndarray, axes: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=axes)
    std = values.std(axis=axes)
    return mean, np.where(std < 1e-12, 1.0, std)


def predict_tam(weights: Mapping[str, np.ndarray], normalization: Mapping[str, np.ndarray], features: np.ndarray,
                cfg: TamConfig) -> np.ndarray:
    """Pose 6-vectors in original units for raw feature sequences."""
    x = (features - normalization["feature_mean"]) / normalization["feature_std"]
    fused, _ = tam_forward_with_cache(x, cfg, weights)
    return (fused @ weights["head.w"] + weights["head.b"]) * normalization["target_std"] + normalization["target_mean"]


def _sum_squared_error(pred: np.ndarray, targets: np.ndarray) -> float:
    """Mean over samples of the squared error summed over target dimensions."""
    return float(((pred - targets) ** 2).sum(axis=1).mean())


def train_tam_toy(features: np.ndarray, targets: np.ndarray, cfg: Optional[TamToyConfig] = None) -> TamTrainingResult:
    """Full-batch Adam on ``tam_forward`` plus a linear head, MSE on standardized targets.

    ``features`` is ``(n, k, F)`` and ``targets`` ``(n, 6)``; the last
    ``holdout_fraction`` of the samples is held out.
    """
    cfg = cfg or TamToyConfig()
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if features.ndim != 3 or features.shape[1] != cfg.tam.k or targets.shape != (features.shape[0], 6):
        raise ShapeError(f"features {features.shape} / targets {targets.shape} do not fit k={cfg.tam.k}")
    n_train = int(round(features.shape[0] * (1.0 - cfg.holdout_fraction)))
    if n_train < 1 or n_train >= features.shape[0]:
        raise ShapeError("split leaves an empty train or held-out set")

    rng = np.random.default_rng(cfg.seed)
    train_x, held_x = features[:n_train], features[n_train:]
    train_y, held_y = targets[:n_train].copy(), targets[n_train:]
    if cfg.shuffle_labels:
        train_y = train_y[rng.permutation(n_train)]

    feature_mean, feature_std = _standardize(train_x, (0, 1))
    target_mean, target_std = _standardize(train_y, (0,))
    normalization = {
        "feature_mean": feature_mean, "feature_std": feature_std,
        "target_mean": target_mean, "target_std": target_std,
    }
    x = (train_x - feature_mean) / feature_std
    y = (train_y - target_mean) / target_std

    weights = init_weights(cfg.tam, features.shape[2], seed=cfg.seed)
    bound = 1.0 / math.sqrt(cfg.tam.d_model)
    weights["head.w"] = rng.uniform(-bound, bound, size=(cfg.tam.d_model, 6))
    weights["head.b"] = np.zeros(6)
    params = ParamVector.from_arrays(weights)
    state = AdamState.initial(len(params), cfg.adam)
    result = TamTrainingResult(weights={}, normalization=normalization)

    for step in range(cfg.steps + 1):
        current = params.to_dict()
        fused, cache = tam_forward_with_cache(x, cfg.tam, current)
        pred = fused @ current["head.w"] + current["head.b"]
        residual = pred - y
        loss = float((residual ** 2).mean())
        if not math.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at step {step}", step=step)
        heldout = _sum_squared_error(predict_tam(current, normalization, held_x, cfg.tam), held_y)
        result.train_history.append(loss)
        result.heldout_history.append(heldout)
        if step % cfg.log_every == 0:
            logger.info(f"tam step {step}: train={loss:.6f} heldout={heldout:.6f}")
        if step == cfg.steps:
            break

        g_pred = 2.0 * residual / residual.size
        grads = {"head.w": fused.T @ g_pred, "head.b": g_pred.sum(axis=0)}
        _, tam_grads = tam_backward(cache, cfg.tam, current, g_pred @ current["head.w"].T)
        grads.update(tam_grads)
        try:
            params, state = adam_step(params, params.like(grads), state)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step}: {exc}", step=step, segment=exc.segment)

    result.weights = {name: value.copy() for name, value in params.to_dict().items()}
    result.heldout_mse = result.heldout_history[-1]
    result.target_variance = float(held_y.var(axis=0).sum())
    return result
