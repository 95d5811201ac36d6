import math

import numpy as np
import pytest

from milora import numkernel as nk
from milora.errors import ConfigError, DimensionError
from milora.experts import count_parameters, trainable_fraction
from milora.model import (
    ModelConfig,
    build_model,
    decode_summary,
    forward_base,
    forward_summary,
    parameter_specs,
    perturb_trainable,
)

FROZEN_PREFIXES = ("temporal.w_", "spatial.kernel", "spatial.readout", "cross.w_")


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def softmax_rows(S):
    e = np.exp(S - S.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dense_forward(p, cfg, X):
    """Straight-line numpy pipeline: no graph, no helpers from the package."""
    T, d = X.shape

    def delta(prefix, source):
        z = source.mean(axis=0)  # each bank is gated by its own layer input
        g = softmax_rows(p[prefix + ".gate"] @ z)
        return sum(g[k] * p[f"{prefix}.{k}.B"] @ p[f"{prefix}.{k}.A"] for k in range(cfg.K))

    S = (X @ p["temporal.w_q"]) @ (X @ p["temporal.w_k"]).T
    if cfg.adapt_temporal:
        S = S + X @ delta("temporal.bank", X) @ X.T
    y_t = softmax_rows(S / math.sqrt(d)) @ (X @ p["temporal.w_v"])

    kernel = p["spatial.kernel"]
    flat = X if cfg.spatial_input == "frames" else y_t
    if cfg.adapt_spatial:
        kernel = kernel + delta("spatial.bank", flat).reshape(kernel.shape)
    src = flat.reshape(T, cfg.c_in, cfg.height, cfg.width)
    Ho, Wo = cfg.height - cfg.kh + 1, cfg.width - cfg.kw + 1
    maps = np.zeros((T, cfg.c_out, Ho, Wo))
    for t in range(T):
        for o in range(cfg.c_out):
            for i in range(Ho):
                for j in range(Wo):
                    maps[t, o, i, j] = np.sum(src[t, :, i:i + cfg.kh, j:j + cfg.kw] * kernel[o])
    y_s = np.maximum(maps, 0).reshape(T, -1) @ p["spatial.readout"]

    a = sigmoid(p["fusion.logit"])
    fused = a * y_t + (1 - a) * y_s
    logits = fused @ p["head.importance.w"] + p["head.importance.b"]
    imp = sigmoid(logits)

    w_sel, w_pos, w_pad = p["head.summary.scalars"]
    c = np.cumsum(imp)
    n = c[-1]
    L, V = cfg.summary_len, cfg.vocab
    out = np.zeros((L, V))
    for pos in range(L):
        out[pos, 0] = w_pad * (pos - n - 0.5)
        out[pos, 1] = -w_pos * (n - pos) ** 2
        for t in range(T):
            out[pos, t + 2] = w_sel * logits[t] - w_pos * (c[t] - (pos + 1)) ** 2
    return imp, out + p["head.summary.vocab_bias"], fused


def test_same_seed_builds_identical_models():
    a, b = build_model(ModelConfig(seed=5)), build_model(ModelConfig(seed=5))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    c = build_model(ModelConfig(seed=6))
    assert not np.array_equal(a.params["temporal.w_q"].data, c.params["temporal.w_q"].data)


@pytest.mark.parametrize("bad,field", [(dict(K=0), "K"), (dict(d=63), "d ="), (dict(kh=9), "kernel"),
                                       (dict(vocab=10), "vocab"), (dict(gate_mode="top"), "top_m"),
                                       (dict(rank_fraction=0.0), "rank_fraction"),
                                       (dict(spatial_input="text"), "spatial_input")])
def test_invalid_config_names_the_field(bad, field):
    with pytest.raises(ConfigError, match=field):
        ModelConfig(**bad)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": 3})
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_freeze_partition():
    for cfg in (ModelConfig(), ModelConfig(cross_modal=True)):
        model = build_model(cfg)
        for name, t in model.params.items():
            frozen = name.startswith(FROZEN_PREFIXES)
            assert model.trainable[name] is not frozen, name
            assert t.requires_grad is not frozen


def test_trainable_fraction_matches_enumeration_oracle():
    cfg = ModelConfig()
    d, K, r = 64, 4, 7  # ceil(0.1 * 64) for the attention bank
    r_s = 1  # ceil(0.1 * min(4, 9)) for the spatial bank
    frozen = 3 * d * d + 4 * 9 + (4 * 6 * 6) * d
    trainable = K * (d * r + r * d) + K * d + K * (4 * r_s + r_s * 9) + K * d + 1 + d + 1 + 3 + 64
    assert count_parameters(parameter_specs(cfg)) == (trainable, frozen)
    assert trainable_fraction(cfg) == trainable / (trainable + frozen) <= 0.18


def test_fresh_model_equals_frozen_backbone():
    rng = np.random.default_rng(0)
    with nk.precision("f32"):
        model = build_model(ModelConfig(seed=1))
        for _ in range(100):
            X = rng.normal(size=(32, 64)).astype(np.float32)
            full, base = forward_summary(model, X), forward_base(model, X)
            np.testing.assert_allclose(full.importance.data, base.importance.data, atol=1e-6, rtol=0)
            np.testing.assert_allclose(full.summary_logits.data, base.summary_logits.data, atol=1e-6, rtol=0)


def test_adapters_change_the_output_once_trained():
    with nk.precision("f64"):
        model = perturb_trainable(build_model(ModelConfig(seed=1)), scale=0.3, seed=2)
        X = np.random.default_rng(0).normal(size=(32, 64))
        assert not np.allclose(forward_summary(model, X).fused.data, forward_base(model, X).fused.data)


def test_importance_is_a_probability():
    rng = np.random.default_rng(1)
    with nk.precision("f64"):
        model = perturb_trainable(build_model(ModelConfig(seed=2)), scale=0.3, seed=3)
        for scale in (0.1, 1.0, 3.0):
            imp = forward_summary(model, rng.normal(size=(32, 64)) * scale).importance.data
            assert np.all((imp > 0) & (imp < 1))


@pytest.mark.parametrize("spatial_input", ["frames", "temporal"])
def test_tiny_model_matches_dense_oracle(spatial_input):
    cfg = ModelConfig.tiny(d=4, T=3, height=2, width=2, kh=2, kw=2, vocab=6, summary_len=3,
                           spatial_input=spatial_input, seed=4)
    rng = np.random.default_rng(5)
    with nk.precision("f64"):
        model = perturb_trainable(build_model(cfg), scale=0.5, seed=6)
        X = rng.normal(size=(3, 4))
        out = forward_summary(model, X)
    p = {n: t.data for n, t in model.params.items()}
    imp, summary, fused = dense_forward(p, cfg, X)
    np.testing.assert_allclose(out.importance.data, imp, rtol=1e-6)
    np.testing.assert_allclose(out.summary_logits.data, summary, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(out.fused.data, fused, rtol=1e-6, atol=1e-9)


def test_forward_is_pure():
    model = perturb_trainable(build_model(ModelConfig.tiny(seed=1)), seed=2)
    before = model.state()
    X = np.random.default_rng(0).normal(size=(3, 8))
    a = forward_summary(model, X).summary_logits.data
    b = forward_summary(model, X).summary_logits.data
    np.testing.assert_array_equal(a, b)
    for name, arr in model.state().items():
        np.testing.assert_array_equal(arr, before[name])


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        forward_summary(build_model(ModelConfig.tiny()), np.zeros((4, 8)))


def test_cross_modal_stage_runs_and_is_trainable():
    model = build_model(ModelConfig.tiny(cross_modal=True, seed=1))
    out = forward_summary(model, np.random.default_rng(0).normal(size=(3, 8)))
    assert out.fused.shape == (3, 8)
    assert model.trainable["cross.text_embed"] and not model.trainable["cross.w_q"]


def test_decode_summary_stops_at_eos_and_drops_pad():
    logits = np.full((5, 6), -1.0)
    for pos, tok in enumerate([3, 0, 4, 1, 5]):
        logits[pos, tok] = 1.0
    assert decode_summary(logits) == [3, 4]
