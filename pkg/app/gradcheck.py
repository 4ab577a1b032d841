"""Finite-difference suite over every differentiable kernel.

Each entry builds a small random instance, a scalar projection ``sum(w * output)``
and its analytic gradient, then runs :func:`app.diff.finite_diff_check`.
"""
import logging
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, validator

from app.diff import DepthPoseObjective, GradCheckReport, ParamVector, finite_diff_check
from app.errors import DomainError
from app.geometry import Intrinsics, disparity_to_depth
from app.image import ImageBuffer, resize_array, sample_bilinear
from app.loss import LossConfig, photometric_forward, photometric_backward, smoothness_backward, smoothness_forward
from app.tam import (
    TamConfig,
    embed_project_backward,
    embed_project_forward,
    encoder_layer_backward,
    encoder_layer_forward,
    init_weights,
    layer_norm_backward,
    layer_norm_forward,
    layer_prefix,
    multi_head_attention_backward,
    multi_head_attention_forward,
    sub_weights,
    tam_backward,
    tam_forward_with_cache,
)
from app.warp import source_coordinates, warp_jacobians

logger = logging.getLogger(__name__)

# sampled coordinates must stay this far from integer grid lines (bilinear kinks)
GRID_MARGIN = 1e-3
MAX_DRAWS = 200

Check = Tuple[Callable[[ParamVector], float], Callable[[ParamVector], ParamVector], ParamVector]


class GradcheckConfig(BaseModel):
    seed: int = 0
    step: float = 1e-5
    rel_tol: float = 1e-4
    warp_size: int = 16
    loss_size: int = 8
    plant_bug: Optional[str] = None

    class Config:
        extra = "forbid"

    @validator("plant_bug")
    def _known_kernel(cls, value):
        if value is not None and value not in KERNELS:
            raise ValueError(f"unknown kernel {value!r}; choose from {sorted(KERNELS)}")
        return value


class SuiteReport(BaseModel):
    passed: bool
    kernels: List[GradCheckReport]


def _grid_distance(u: np.ndarray, v: np.ndarray, in_front: np.ndarray) -> float:
    if not in_front.any():
        return np.inf
    coords = np.concatenate([u[in_front], v[in_front]])
    return float(np.min(np.abs(coords - np.rint(coords))))


def _projection(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, 1.0, size=shape)


# ---------------------------------------------------------------- image kernels

def check_bilinear(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    image = rng.uniform(0.0, 1.0, size=(6, 7, 3))
    n = 12
    u = rng.integers(0, 6, size=n) + rng.uniform(0.2, 0.8, size=n)
    v = rng.integers(0, 5, size=n) + rng.uniform(0.2, 0.8, size=n)
    w = _projection(rng, (n, 3))
    point = ParamVector.from_arrays({"u": u, "v": v})

    def f(p):
        values, _, _, _ = sample_bilinear(image, p["u"], p["v"])
        return float((w * values).sum())

    def grad(p):
        _, _, d_du, d_dv = sample_bilinear(image, p["u"], p["v"])
        return p.like({"u": (w * d_du).sum(axis=1), "v": (w * d_dv).sum(axis=1)})

    return f, grad, point


def check_warp(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    size = cfg.warp_size
    K = Intrinsics.centered(size, size, float(size))
    source = rng.uniform(0.0, 1.0, size=(size, size, 3))
    for _ in range(MAX_DRAWS):
        depth = rng.uniform(2.0, 4.0, size=(size, size))
        pose = np.concatenate([rng.normal(0.0, 0.02, 3), rng.normal(0.0, 0.1, 3)])
        if _grid_distance(*source_coordinates(depth, pose, K)) > GRID_MARGIN:
            break
    else:
        raise DomainError("could not draw a warp instance away from the sampling grid")
    w = _projection(rng, (size, size, 3))
    point = ParamVector.from_arrays({"depth": depth, "pose": pose})

    def f(p):
        return float((w * warp_jacobians(source, p["depth"], p["pose"], K).result.image.data).sum())

    def grad(p):
        jac = warp_jacobians(source, p["depth"], p["pose"], K)
        return p.like({
            "depth": (w * jac.d_depth).sum(axis=2),
            "pose": np.einsum("hwc,hwck->k", w, jac.d_pose),
        })

    return f, grad, point


def check_photometric(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    size = cfg.loss_size
    target = rng.uniform(0.1, 0.9, size=(size, size, 3))
    recon = rng.uniform(0.1, 0.9, size=(size, size, 3))
    mask = (rng.uniform(size=(size, size)) > 0.2).astype(np.float64)
    w = _projection(rng, (size, size))
    loss_cfg = LossConfig()
    point = ParamVector.from_arrays({"recon": recon})

    def f(p):
        return float((w * photometric_forward(target, p["recon"], mask, loss_cfg)[0]).sum())

    def grad(p):
        _, cache = photometric_forward(target, p["recon"], mask, loss_cfg)
        return p.like({"recon": photometric_backward(cache, w)})

    return f, grad, point


def check_smoothness(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    size = cfg.loss_size
    image = rng.uniform(0.0, 1.0, size=(size, size, 3))
    point = ParamVector.from_arrays({"disparity": rng.uniform(0.2, 0.8, size=(size, size))})

    def f(p):
        return smoothness_forward(p["disparity"], image)[0]

    def grad(p):
        _, cache = smoothness_forward(p["disparity"], image)
        return p.like({"disparity": smoothness_backward(cache, 1.0)})

    return f, grad, point


# ---------------------------------------------------------------- TAM kernels

_TAM = TamConfig(k=3, d_model=8, heads=2, layers=2, d_ff=16)
_FEATURES = 5


def _tam_instance(rng: np.random.Generator):
    weights = init_weights(_TAM, _FEATURES, seed=int(rng.integers(1 << 31)))
    # non-trivial layer-norm parameters
    for name in weights:
        if name.endswith(".g") or name.endswith("ln1.b") or name.endswith("ln2.b"):
            weights[name] = weights[name] + rng.normal(0.0, 0.1, size=weights[name].shape)
    return weights


def check_layer_norm(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    x = rng.normal(0.0, 1.0, size=(2, _TAM.k, _TAM.d_model))
    w = _projection(rng, x.shape)
    point = ParamVector.from_arrays({
        "x": x, "g": rng.uniform(0.5, 1.5, _TAM.d_model), "b": rng.normal(0.0, 0.1, _TAM.d_model),
    })

    def f(p):
        return float((w * layer_norm_forward(p["x"], p["g"], p["b"])[0]).sum())

    def grad(p):
        _, cache = layer_norm_forward(p["x"], p["g"], p["b"])
        gx, gg, gb = layer_norm_backward(cache, w)
        return p.like({"x": gx, "g": gg, "b": gb})

    return f, grad, point


def check_embed(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    weights = _tam_instance(rng)
    names = ["embed.w", "embed.b", "embed.pos"]
    x = rng.normal(0.0, 1.0, size=(2, _TAM.k, _FEATURES))
    w = _projection(rng, (2, _TAM.k, _TAM.d_model))
    point = ParamVector.from_arrays({"x": x, **{n: weights[n] for n in names}})

    def f(p):
        return float((w * embed_project_forward(p["x"], p.to_dict())[0]).sum())

    def grad(p):
        _, cache = embed_project_forward(p["x"], p.to_dict())
        gx, grads = embed_project_backward(cache, p.to_dict(), w)
        return p.like({"x": gx, **grads})

    return f, grad, point


def _layer_check(rng: np.random.Generator, keys, forward, backward) -> Check:
    layer = sub_weights(_tam_instance(rng), layer_prefix(0))
    x = rng.normal(0.0, 1.0, size=(2, _TAM.k, _TAM.d_model))
    w = _projection(rng, x.shape)
    point = ParamVector.from_arrays({"x": x, **{k: layer[k] for k in keys}})

    def f(p):
        return float((w * forward(p["x"], p.to_dict(), _TAM.heads)[0]).sum())

    def grad(p):
        _, cache = forward(p["x"], p.to_dict(), _TAM.heads)
        gx, grads = backward(cache, p.to_dict(), w)
        return p.like({"x": gx, **{k: grads[k] for k in keys}})

    return f, grad, point


def check_attention(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    keys = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    return _layer_check(rng, keys, multi_head_attention_forward, multi_head_attention_backward)


def check_encoder_layer(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    keys = [
        "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
    ]
    return _layer_check(rng, keys, encoder_layer_forward, encoder_layer_backward)


def check_tam(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    weights = _tam_instance(rng)
    x = rng.normal(0.0, 1.0, size=(2, _TAM.k, _FEATURES))
    w = _projection(rng, (2, _TAM.d_model))
    point = ParamVector.from_arrays({"x": x, **weights})

    def f(p):
        return float((w * tam_forward_with_cache(p["x"], _TAM, p.to_dict())[0]).sum())

    def grad(p):
        _, cache = tam_forward_with_cache(p["x"], _TAM, p.to_dict())
        gx, grads = tam_backward(cache, _TAM, p.to_dict(), w)
        return p.like({"x": gx, **grads})

    return f, grad, point


# ---------------------------------------------------------------- composed objective

def check_total_loss(rng: np.random.Generator, cfg: GradcheckConfig) -> Check:
    size = cfg.loss_size
    K = Intrinsics.centered(size, size, float(size))
    loss_cfg = LossConfig(scales=3, automask_enabled=False)
    context = [ImageBuffer(rng.uniform(0.05, 0.95, size=(size, size, 3))) for _ in range(2)]
    target = ImageBuffer(rng.uniform(0.05, 0.95, size=(size, size, 3)))
    masks = [(rng.uniform(size=(size, size)) > 0.2).astype(np.float64) for _ in range(loss_cfg.scales)]
    objective = DepthPoseObjective(context, target, K, loss_cfg, fixed_masks=masks)

    for _ in range(MAX_DRAWS):
        arrays = {s.name: rng.normal(0.0, 0.3, size=s.shape) for s in objective.initial_params().segments}
        for i in range(len(context)):
            arrays[f"pose_{i}"] = np.concatenate([rng.normal(0.0, 0.01, 3), rng.normal(0.0, 0.01, 3)])
        point = objective.initial_params().like(arrays)
        distance = np.inf
        for sigma in objective.disparities(point):
            depth = disparity_to_depth(resize_array(sigma, size, size))
            for pose in objective.pose_params(point):
                distance = min(distance, _grid_distance(*source_coordinates(depth, pose, K)))
        if distance > GRID_MARGIN:
            break
    else:
        raise DomainError("could not draw a total-loss instance away from the sampling grid")
    return objective.forward, objective.backward, point


KERNELS: Dict[str, Callable[[np.random.Generator, GradcheckConfig], Check]] = {
    "bilinear_sample": check_bilinear,
    "warp_jacobians": check_warp,
    "photometric": check_photometric,
    "smoothness": check_smoothness,
    "layer_norm": check_layer_norm,
    "embed_project": check_embed,
    "multi_head_attention": check_attention,
    "encoder_layer": check_encoder_layer,
    "tam_forward": check_tam,
    "total_loss": check_total_loss,
}


def run_kernel(name: str, cfg: GradcheckConfig) -> GradCheckReport:
    rng = np.random.default_rng([cfg.seed, list(KERNELS).index(name)])
    f, grad, point = KERNELS[name](rng, cfg)
    if cfg.plant_bug == name:
        correct = grad

        def grad(p):
            return p.with_data(2.0 * correct(p).data)

    report = finite_diff_check(f, grad, point, step=cfg.step, rel_tol=cfg.rel_tol, name=name)
    marker = "✅" if report.passed else "❌"
    logger.info(f"{marker} {name}: max rel error {report.max_rel_error:.2e} over {report.checked} coordinates")
    return report


def run_suite(cfg: Optional[GradcheckConfig] = None) -> SuiteReport:
    cfg = cfg or GradcheckConfig()
    started = time.perf_counter()
    reports = [run_kernel(name, cfg) for name in KERNELS]
    passed = all(r.passed for r in reports)
    logger.info(f"Gradient suite {'passed' if passed else 'FAILED'} in {time.perf_counter() - started:.1f}s")
    return SuiteReport(passed=passed, kernels=reports)
