import numpy as np
import pytest

from app.errors import ShapeError
from app.tam import (
    LAYER_KEYS,
    TamConfig,
    attention_weights,
    embed_project,
    encoder_layer,
    init_weights,
    layer_norm,
    layer_prefix,
    multi_head_attention,
    softmax,
    sub_weights,
    tam_forward,
)


def _zero_layer(d, d_ff):
    weights = {name: np.zeros((d, d)) for name in ("wq", "wk", "wv", "wo")}
    weights.update({name: np.zeros(d) for name in ("bq", "bk", "bv", "bo", "ln1.b", "ln2.b")})
    weights.update({"ln1.g": np.ones(d), "ln2.g": np.ones(d)})
    weights.update({"ff1.w": np.zeros((d, d_ff)), "ff1.b": np.zeros(d_ff),
                    "ff2.w": np.zeros((d_ff, d)), "ff2.b": np.zeros(d)})
    return weights


def test_config_defaults_and_validation():
    cfg = TamConfig(d_model=16, heads=4)
    assert cfg.d_ff == 64
    with pytest.raises(ValueError):
        TamConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        TamConfig(layers=-1)
    assert TamConfig(layers=0).layers == 0


def test_init_weights_keys_and_bounds():
    cfg = TamConfig(k=3, d_model=8, heads=2, layers=2)
    weights = init_weights(cfg, feature_dim=5, seed=0)
    for index in range(2):
        assert set(sub_weights(weights, layer_prefix(index))) == set(LAYER_KEYS)
    assert weights["embed.w"].shape == (5, 8)
    assert np.abs(weights["embed.w"]).max() <= 1.0 / np.sqrt(5)
    again = init_weights(cfg, feature_dim=5, seed=0)
    assert all(np.array_equal(weights[name], again[name]) for name in weights)


def test_embed_with_zero_weights_is_zero(rng):
    weights = {"embed.w": np.zeros((5, 8)), "embed.b": np.zeros(8), "embed.pos": np.zeros((3, 8))}
    assert np.all(embed_project(rng.normal(size=(2, 3, 5)), weights) == 0.0)


def test_embed_with_identity_weights_passes_through(rng):
    features = rng.normal(size=(3, 6))
    weights = {"embed.w": np.eye(6), "embed.b": np.zeros(6), "embed.pos": np.zeros((3, 6))}
    assert np.allclose(embed_project(features, weights), features)


def test_embed_rejects_wrong_sequence_length(rng):
    weights = {"embed.w": np.eye(6), "embed.b": np.zeros(6), "embed.pos": np.zeros((4, 6))}
    with pytest.raises(ShapeError):
        embed_project(rng.normal(size=(3, 6)), weights)


def test_softmax_rows_sum_to_one(rng):
    probs = softmax(rng.normal(size=(4, 5)) * 50)
    assert np.allclose(probs.sum(axis=-1), 1.0)
    assert np.all(probs >= 0)


def test_layer_norm_normalizes(rng):
    out = layer_norm(rng.normal(3.0, 2.0, size=(4, 16)), np.ones(16), np.zeros(16))
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_identical_rows_attend_uniformly(rng):
    d, k = 8, 4
    weights = init_weights(TamConfig(k=k, d_model=d, heads=2, layers=1), feature_dim=d, seed=3)
    layer = sub_weights(weights, layer_prefix(0))
    x = np.tile(rng.normal(size=d), (k, 1))
    attn = attention_weights(x, layer, heads=2)
    assert attn.shape == (2, k, k)
    assert np.allclose(attn, 1.0 / k)
    values = x @ layer["wv"] + layer["bv"]
    expected = values.mean(axis=0) @ layer["wo"] + layer["bo"]
    assert np.allclose(multi_head_attention(x, layer, heads=2), expected)


def test_attention_rejects_indivisible_heads(rng):
    layer = _zero_layer(6, 12)
    with pytest.raises(ShapeError):
        multi_head_attention(rng.normal(size=(3, 6)), layer, heads=4)


def test_zero_layer_is_residual_only(rng):
    x = rng.normal(size=(2, 4, 8))
    assert np.allclose(encoder_layer(x, _zero_layer(8, 32), heads=4), x)


def test_no_layers_reads_out_embedded_last_row(rng):
    cfg = TamConfig(k=3, d_model=8, heads=2, layers=0)
    weights = init_weights(cfg, feature_dim=5, seed=1)
    features = rng.normal(size=(7, 3, 5))
    assert np.allclose(tam_forward(features, cfg, weights), embed_project(features, weights)[:, -1, :])


def test_forward_shapes_and_batch_independence(rng):
    cfg = TamConfig(k=4, d_model=16, heads=4, layers=2)
    weights = init_weights(cfg, feature_dim=6, seed=2)
    features = rng.normal(size=(5, 4, 6))
    out = tam_forward(features, cfg, weights)
    assert out.shape == (5, 16)
    assert np.allclose(out[2], tam_forward(features[2], cfg, weights))
    with pytest.raises(ShapeError):
        tam_forward(rng.normal(size=(5, 3, 6)), cfg, weights)


def test_embed_matches_per_frame_matmul(rng):
    features = rng.normal(size=(2, 3, 4))
    weights = {"embed.w": rng.normal(size=(4, 5)), "embed.b": rng.normal(size=5), "embed.pos": rng.normal(size=(3, 5))}
    out = embed_project(features, weights)
    for n in range(2):
        for j in range(3):
            expected = weights["embed.pos"][j] + weights["embed.b"]
            for i in range(4):
                expected = expected + features[n, j, i] * weights["embed.w"][i]
            assert np.allclose(out[n, j], expected, atol=1e-12)


def test_two_token_attention_by_hand():
    eye = np.eye(2)
    layer = {"wq": eye, "wk": eye, "wv": eye, "wo": eye,
             "bq": np.zeros(2), "bk": np.zeros(2), "bv": np.zeros(2), "bo": np.zeros(2)}
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    # scores are x x^T / sqrt(2); each token puts weight a on itself
    a = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1.0)
    assert np.allclose(attention_weights(x, layer, heads=1)[0], [[a, 1 - a], [1 - a, a]], atol=1e-12)
    assert np.allclose(multi_head_attention(x, layer, heads=1), [[a, 1 - a], [1 - a, a]], atol=1e-12)


def test_attention_output_is_convex_combination_of_values(rng):
    weights = init_weights(TamConfig(k=5, d_model=4, heads=1, layers=1), feature_dim=4, seed=6)
    layer = sub_weights(weights, layer_prefix(0))
    layer["wo"], layer["bo"] = np.eye(4), np.zeros(4)
    x = rng.normal(size=(5, 4))
    values = x @ layer["wv"] + layer["bv"]
    out = multi_head_attention(x, layer, heads=1)
    assert np.all(out <= values.max(axis=0) + 1e-12)
    assert np.all(out >= values.min(axis=0) - 1e-12)


def test_layer_norm_ignores_constant_shift(rng):
    x = rng.normal(size=(4, 8))
    gain, bias = rng.normal(size=8), rng.normal(size=8)
    shift = rng.normal(size=(4, 1)) * 10
    assert np.allclose(layer_norm(x + shift, gain, bias), layer_norm(x, gain, bias), atol=1e-9)


def test_read_out_ignores_order_of_earlier_frames_without_positions(rng):
    cfg = TamConfig(k=4, d_model=8, heads=2, layers=2)
    weights = init_weights(cfg, feature_dim=5, seed=4)
    features = rng.normal(size=(4, 5))
    reordered = features[[2, 0, 1, 3]]
    weights["embed.pos"] = np.zeros((4, 8))
    assert np.allclose(tam_forward(reordered, cfg, weights), tam_forward(features, cfg, weights), atol=1e-12)
    layer = sub_weights(weights, layer_prefix(0))
    h = embed_project(features, weights)
    assert np.allclose(encoder_layer(h[[3, 1, 0, 2]], layer, heads=2), encoder_layer(h, layer, heads=2)[[3, 1, 0, 2]])
    weights["embed.pos"] = init_weights(cfg, feature_dim=5, seed=4)["embed.pos"]
    assert not np.allclose(tam_forward(reordered, cfg, weights), tam_forward(features, cfg, weights))
