"""Temporal aggregation module: embedding projection plus a pre-norm transformer encoder.

Inputs are batched over any leading dimensions, ``(..., k, d)``. Every op has a
``*_forward`` returning ``(output, cache)`` and a ``*_backward`` returning the
input gradient plus a dict of weight gradients keyed like the weights.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, root_validator, validator

from app.errors import ShapeError

LN_EPS = 1e-5
LAYER_KEYS = (
    "ln1.g", "ln1.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2.g", "ln2.b", "ff1.w", "ff1.b", "ff2.w", "ff2.b",
)

Weights = Dict[str, np.ndarray]


class TamConfig(BaseModel):
    k: int = 4
    d_model: int = 32
    heads: int = 4
    layers: int = 2
    d_ff: Optional[int] = None

    class Config:
        extra = "forbid"

    @validator("k", "d_model", "heads")
    def _positive(cls, value):
        if value < 1:
            raise ValueError("must be >= 1")
        return value

    @validator("layers")
    def _non_negative(cls, value):
        if value < 0:
            raise ValueError("layers must be >= 0")
        return value

    @root_validator(skip_on_failure=True)
    def _heads_divide(cls, values):
        if values["d_model"] % values["heads"]:
            raise ValueError("d_model must be divisible by heads")
        if values.get("d_ff") is None:
            values["d_ff"] = 4 * values["d_model"]
        elif values["d_ff"] < 1:
            raise ValueError("d_ff must be >= 1")
        return values


def layer_prefix(index: int) -> str:
    return f"layer{index}."


def sub_weights(weights: Mapping[str, np.ndarray], prefix: str) -> Weights:
    return {name[len(prefix):]: value for name, value in weights.items() if name.startswith(prefix)}


def init_weights(cfg: TamConfig, feature_dim: int, seed: int = 0) -> Weights:
    """Uniform in +-1/sqrt(fan_in); layer-norm gains 1, offsets 0."""
    rng = np.random.default_rng(seed)
    d, d_ff = cfg.d_model, cfg.d_ff

    def uniform(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    weights: Weights = {
        "embed.w": uniform(feature_dim, (feature_dim, d)),
        "embed.b": uniform(feature_dim, (d,)),
        "embed.pos": uniform(d, (cfg.k, d)),
    }
    for index in range(cfg.layers):
        p = layer_prefix(index)
        weights[p + "ln1.g"] = np.ones(d)
        weights[p + "ln1.b"] = np.zeros(d)
        for name in ("q", "k", "v", "o"):
            weights[p + f"w{name}"] = uniform(d, (d, d))
            weights[p + f"b{name}"] = uniform(d, (d,))
        weights[p + "ln2.g"] = np.ones(d)
        weights[p + "ln2.b"] = np.zeros(d)
        weights[p + "ff1.w"] = uniform(d, (d, d_ff))
        weights[p + "ff1.b"] = uniform(d, (d_ff,))
        weights[p + "ff2.w"] = uniform(d_ff, (d_ff, d))
        weights[p + "ff2.b"] = uniform(d_ff, (d,))
    return weights


def _sum_leading(g: np.ndarray, ndim: int) -> np.ndarray:
    """Reduce a broadcast gradient to its trailing ``ndim`` axes."""
    return g.reshape((-1,) + g.shape[g.ndim - ndim:]).sum(axis=0)


# ---------------------------------------------------------------- primitives

def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match weight {w.shape}")
    return x @ w + b, x


def linear_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return g @ w.T, gw, _sum_leading(g, 1)


@dataclass
class _NormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    return gain * xhat + bias, _NormCache(xhat, inv_std, gain)


def layer_norm_backward(cache: _NormCache, g: np.ndarray):
    g_xhat = g * cache.gain
    gx = cache.inv_std * (
        g_xhat
        - g_xhat.mean(axis=-1, keepdims=True)
        - cache.xhat * (g_xhat * cache.xhat).mean(axis=-1, keepdims=True)
    )
    return gx, _sum_leading(g * cache.xhat, 1), _sum_leading(g, 1)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    return layer_norm_forward(x, gain, bias, eps)[0]


def softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- embedding

def embed_project_forward(features: np.ndarray, weights: Mapping[str, np.ndarray]):
    features = np.asarray(features, dtype=np.float64)
    pos = weights["embed.pos"]
    if features.shape[-2] != pos.shape[0]:
        raise ShapeError(f"sequence length {features.shape[-2]} does not match {pos.shape[0]} positions")
    out, x = linear_forward(features, weights["embed.w"], weights["embed.b"])
    return out + pos, x


def embed_project_backward(x: np.ndarray, weights: Mapping[str, np.ndarray], g: np.ndarray):
    gx, gw, gb = linear_backward(x, weights["embed.w"], g)
    return gx, {"embed.w": gw, "embed.b": gb, "embed.pos": _sum_leading(g, 2)}


def embed_project(features: np.ndarray, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    """Per-frame affine map plus a learned positional embedding."""
    return embed_project_forward(features, weights)[0]


# ---------------------------------------------------------------- attention

@dataclass
class _AttentionCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    context: np.ndarray
    scale: float


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, k, d = x.shape
    return np.swapaxes(x.reshape(*lead, k, heads, d // heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    x = np.swapaxes(x, -2, -3)
    *lead, k, heads, dh = x.shape
    return x.reshape(*lead, k, heads * dh)


def multi_head_attention_forward(x: np.ndarray, weights: Mapping[str, np.ndarray], heads: int):
    d = x.shape[-1]
    if d % heads:
        raise ShapeError(f"d_model {d} is not divisible by {heads} heads")
    q = _split_heads(x @ weights["wq"] + weights["bq"], heads)
    k = _split_heads(x @ weights["wk"] + weights["bk"], heads)
    v = _split_heads(x @ weights["wv"] + weights["bv"], heads)
    scale = 1.0 / math.sqrt(d // heads)
    attn = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    context = _merge_heads(attn @ v)
    out = context @ weights["wo"] + weights["bo"]
    return out, _AttentionCache(x, q, k, v, attn, context, scale)


def multi_head_attention_backward(cache: _AttentionCache, weights: Mapping[str, np.ndarray], g: np.ndarray):
    heads = cache.q.shape[-3]
    g_context, g_wo, g_bo = linear_backward(cache.context, weights["wo"], g)
    g_heads = _split_heads(g_context, heads)
    g_attn = g_heads @ np.swapaxes(cache.v, -1, -2)
    g_v = np.swapaxes(cache.attn, -1, -2) @ g_heads
    g_scores = cache.attn * (g_attn - (g_attn * cache.attn).sum(axis=-1, keepdims=True)) * cache.scale
    g_q = g_scores @ cache.k
    g_k = np.swapaxes(g_scores, -1, -2) @ cache.q

    grads = {"wo": g_wo, "bo": g_bo}
    g_x = np.zeros_like(cache.x)
    for name, g_proj in (("q", g_q), ("k", g_k), ("v", g_v)):
        gx, gw, gb = linear_backward(cache.x, weights[f"w{name}"], _merge_heads(g_proj))
        g_x += gx
        grads[f"w{name}"] = gw
        grads[f"b{name}"] = gb
    return g_x, grads


def multi_head_attention(x: np.ndarray, weights: Mapping[str, np.ndarray], heads: int) -> np.ndarray:
    return multi_head_attention_forward(x, weights, heads)[0]


def attention_weights(x: np.ndarray, weights: Mapping[str, np.ndarray], heads: int) -> np.ndarray:
    """Row-stochastic attention matrices, shape ``(..., heads, k, k)``."""
    return multi_head_attention_forward(x, weights, heads)[1].attn


# ---------------------------------------------------------------- encoder layer

@dataclass
class _LayerCache:
    norm1: _NormCache
    attention: _AttentionCache
    norm2: _NormCache
    h2: np.ndarray
    hidden: np.ndarray
    relu: np.ndarray


def encoder_layer_forward(x: np.ndarray, weights: Mapping[str, np.ndarray], heads: int):
    h1, norm1 = layer_norm_forward(x, weights["ln1.g"], weights["ln1.b"])
    a, attention = multi_head_attention_forward(h1, weights, heads)
    x1 = x + a
    h2, norm2 = layer_norm_forward(x1, weights["ln2.g"], weights["ln2.b"])
    hidden = h2 @ weights["ff1.w"] + weights["ff1.b"]
    relu = np.maximum(hidden, 0.0)
    out = x1 + relu @ weights["ff2.w"] + weights["ff2.b"]
    return out, _LayerCache(norm1, attention, norm2, h2, hidden, relu)


def encoder_layer_backward(cache: _LayerCache, weights: Mapping[str, np.ndarray], g: np.ndarray):
    g_relu, g_ff2w, g_ff2b = linear_backward(cache.relu, weights["ff2.w"], g)
    g_hidden = g_relu * (cache.hidden > 0)
    g_h2, g_ff1w, g_ff1b = linear_backward(cache.h2, weights["ff1.w"], g_hidden)
    g_x1, g_ln2g, g_ln2b = layer_norm_backward(cache.norm2, g_h2)
    g_x1 = g_x1 + g
    g_h1, grads = multi_head_attention_backward(cache.attention, weights, g_x1)
    g_x, g_ln1g, g_ln1b = layer_norm_backward(cache.norm1, g_h1)
    grads.update({
        "ln1.g": g_ln1g, "ln1.b": g_ln1b, "ln2.g": g_ln2g, "ln2.b": g_ln2b,
        "ff1.w": g_ff1w, "ff1.b": g_ff1b, "ff2.w": g_ff2w, "ff2.b": g_ff2b,
    })
    return g_x + g_x1, grads


def encoder_layer(x: np.ndarray, weights: Mapping[str, np.ndarray], heads: int) -> np.ndarray:
    """``x + MHA(LN(x))`` followed by ``+ FFN(LN(.))``."""
    return encoder_layer_forward(x, weights, heads)[0]


# ---------------------------------------------------------------- full module

@dataclass
class TamCache:
    embed_input: np.ndarray
    layers: List[_LayerCache] = field(default_factory=list)
    seq_len: int = 0


def tam_forward_with_cache(x: np.ndarray, cfg: TamConfig, weights: Mapping[str, np.ndarray]):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] != cfg.k:
        raise ShapeError(f"expected (..., {cfg.k}, F) features, got {x.shape}")
    h, embed_input = embed_project_forward(x, weights)
    cache = TamCache(embed_input=embed_input, seq_len=cfg.k)
    for index in range(cfg.layers):
        h, layer_cache = encoder_layer_forward(h, sub_weights(weights, layer_prefix(index)), cfg.heads)
        cache.layers.append(layer_cache)
    return h[..., -1, :], cache


def tam_forward(x: np.ndarray, cfg: TamConfig, weights: Mapping[str, np.ndarray]) -> np.ndarray:
    """Fused feature of the last time step, shape ``(..., d_model)``."""
    return tam_forward_with_cache(x, cfg, weights)[0]


def tam_backward(cache: TamCache, cfg: TamConfig, weights: Mapping[str, np.ndarray], g_out: np.ndarray):
    """Returns ``(grad wrt input features, grads keyed like weights)``."""
    g = np.zeros(g_out.shape[:-1] + (cache.seq_len, g_out.shape[-1]))
    g[..., -1, :] = g_out
    grads: Weights = {}
    for index in reversed(range(cfg.layers)):
        prefix = layer_prefix(index)
        g, layer_grads = encoder_layer_backward(cache.layers[index], sub_weights(weights, prefix), g)
        grads.update({prefix + name: value for name, value in layer_grads.items()})
    g_x, embed_grads = embed_project_backward(cache.embed_input, weights, g)
    grads.update(embed_grads)
    return g_x, grads
