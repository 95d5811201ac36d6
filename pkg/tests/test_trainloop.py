import math

import numpy as np
import pytest

from milora import numkernel as nk
from milora.errors import ConfigError, TrainingError
from milora.model import ModelConfig, build_model, perturb_trainable
from milora.numkernel import Tensor
from milora.synthdata import random_episode
from milora.trainloop import (
    AdamState,
    EarlyStopState,
    TrainConfig,
    adam_step,
    clip_gradients,
    composite_loss,
    early_stop_update,
    history_lines,
    lr_at_step,
    train,
    warmup_steps,
)

# three bias-corrected Adam steps, g = 0.5, lr = 0.1, from p = 1.0, by a separate scalar script
ADAM_REFERENCE = [
    (0.9000000019999999, 0.05, 0.00025),
    (0.8000000040000005, 0.095, 0.00049975),
    (0.7000000060000005, 0.1355, 0.00074925025),
]


@pytest.fixture(autouse=True)
def f64():
    with nk.precision("f64"):
        yield


def tiny_episodes(cfg, n, seed=0):
    return [random_episode(cfg.T, cfg.d, cfg.summary_len, seed=seed + i) for i in range(n)]


def test_zero_lambdas_leave_only_the_summary_loss():
    cfg = ModelConfig.tiny(seed=1)
    model = perturb_trainable(build_model(cfg), seed=2)
    eps = tiny_episodes(cfg, 3)
    res = composite_loss(model, eps, TrainConfig(lambda_t=0, lambda_s=0, lambda_gate=0))
    assert float(res.total.data) == res.terms["bce"] + res.terms["token_ce"]
    assert res.terms["reg_temporal"] == res.terms["reg_spatial"] == res.terms["reg_gate"] == 0.0


def test_fresh_model_regulariser_comes_from_A_only():
    cfg = ModelConfig.tiny(seed=1)
    model = build_model(cfg)
    res = composite_loss(model, tiny_episodes(cfg, 2), TrainConfig(lambda_t=0.1, lambda_s=0.2))
    a_t = sum(np.sum(t.data**2) for n, t in model.params.items() if n.startswith("temporal.bank.") and n.endswith(".A"))
    a_s = sum(np.sum(t.data**2) for n, t in model.params.items() if n.startswith("spatial.bank.") and n.endswith(".A"))
    assert res.terms["reg_temporal"] == pytest.approx(0.1 * a_t, rel=1e-12)
    assert res.terms["reg_spatial"] == pytest.approx(0.2 * a_s, rel=1e-12)
    assert res.terms["reg_gate"] == 0.0


def test_frobenius_arithmetic_single_expert():
    cfg = ModelConfig(d=2, T=2, K=1, rank_fraction=0.5, height=1, width=2, c_out=1, kh=1, kw=1,
                      vocab=4, summary_len=2, adapt_spatial=False)
    model = build_model(cfg)
    model.params["temporal.bank.0.B"].data = np.array([[1.0], [1.0]])
    model.params["temporal.bank.0.A"].data = np.array([[1.0, 1.0]])
    res = composite_loss(model, tiny_episodes(cfg, 1), TrainConfig(lambda_t=0.5, lambda_s=0, lambda_gate=0))
    assert res.terms["reg_temporal"] == 2.0


def test_breakdown_sums_to_total():
    cfg = ModelConfig.tiny(seed=3)
    model = perturb_trainable(build_model(cfg), seed=4)
    res = composite_loss(model, tiny_episodes(cfg, 4), TrainConfig(lambda_t=0.3, lambda_s=0.2, lambda_gate=0.1))
    assert abs(sum(res.terms.values()) - float(res.total.data)) <= 1e-9


@pytest.mark.parametrize("lambdas", [(0.0, 0.0, 0.0), (0.3, 0.2, 0.1)])
@pytest.mark.parametrize("overrides", [{}, {"gate_mode": "top", "top_m": 1}, {"attention_mode": "projection-update"}])
def test_composite_loss_gradients(lambdas, overrides):
    cfg = ModelConfig.tiny(seed=5, **overrides)
    model = perturb_trainable(build_model(cfg), seed=6)
    eps = tiny_episodes(cfg, 2)
    tc = TrainConfig(lambda_t=lambdas[0], lambda_s=lambdas[1], lambda_gate=lambdas[2])
    report = nk.finite_diff_check(lambda: composite_loss(model, eps, tc).total, model.trainable_params())
    assert report.passed, report.as_rows()
    assert {r.name for r in report.results} == set(model.trainable_params())


def test_schedule_endpoints():
    cfg = TrainConfig(lr_max=3e-3)
    total = 1000
    w = warmup_steps(cfg, total)
    assert w == 100
    assert lr_at_step(cfg, 0, total) == 0.0
    assert lr_at_step(cfg, w, total) == 3e-3
    assert abs(lr_at_step(cfg, total, total) - 3e-5) <= 1e-12
    mid = w + (total - w) // 2
    assert abs(lr_at_step(cfg, mid, total) - (3e-3 + 3e-5) / 2) <= 1e-12
    with pytest.raises(ValueError):
        lr_at_step(cfg, total + 1, total)


def test_warmup_uses_ceiling_and_exact_decimal_fraction():
    assert warmup_steps(TrainConfig(), 7680) == 768
    assert warmup_steps(TrainConfig(), 15) == 2
    assert warmup_steps(TrainConfig(warmup_fraction=0.0), 15) == 0
    assert lr_at_step(TrainConfig(warmup_fraction=0.0), 0, 15) == 3e-3


def test_schedule_continuous_and_non_increasing():
    cfg = TrainConfig(lr_max=1e-2, lr_min=1e-4)
    total = 257
    w = warmup_steps(cfg, total)
    lrs = [lr_at_step(cfg, t, total) for t in range(total + 1)]
    assert abs(lrs[w] - lrs[w - 1]) <= cfg.lr_max / w + 1e-15
    assert all(b <= a for a, b in zip(lrs[w:], lrs[w + 1:]))
    assert all(b >= a for a, b in zip(lrs[:w], lrs[1:w + 1]))


def test_clip_gradients_cases():
    assert clip_gradients([np.array([0.3, 0.4])], 1.0) == 1.0
    grads = [np.array([1.2, 0.0]), np.array([[1.6]])]
    assert clip_gradients(grads, 1.0) == 0.5
    np.testing.assert_allclose(grads[0], [0.6, 0.0])
    np.testing.assert_allclose(grads[1], [[0.8]])
    zeros = [np.zeros(3)]
    assert clip_gradients(zeros, 1.0) == 1.0
    with pytest.raises(ValueError):
        clip_gradients(zeros, 0.0)


def test_adam_zero_gradient_and_first_step():
    cfg = TrainConfig()
    p = {"w": Tensor(np.array(2.0), requires_grad=True)}
    state = AdamState(m={"w": np.array(0.4)}, v={"w": np.array(0.0)}, t=0)
    adam_step(p, {"w": np.array(0.0)}, state, 0.1, cfg)
    assert float(state.m["w"]) == pytest.approx(0.36)
    assert float(state.v["w"]) == 0.0
    q = {"w": Tensor(np.array(0.0), requires_grad=True)}
    adam_step(q, {"w": np.array(1.0)}, AdamState(), 0.1, cfg)
    assert float(q["w"].data) == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_matches_scalar_reference():
    p = {"w": Tensor(np.array(1.0), requires_grad=True)}
    state = AdamState()
    for expected in ADAM_REFERENCE:
        adam_step(p, {"w": np.array(0.5)}, state, 0.1, TrainConfig())
        got = (float(p["w"].data), float(state.m["w"]), float(state.v["w"]))
        assert got == pytest.approx(expected, rel=1e-12)


def test_adam_refuses_frozen_tensor():
    with pytest.raises(TrainingError):
        adam_step({"w": Tensor(np.array(1.0))}, {"w": np.array(1.0)}, AdamState(), 0.1, TrainConfig())


def test_early_stopping_rules():
    state = EarlyStopState()
    for s in (1, 2, 3):
        state, stop = early_stop_update(state, s, 5)
        assert not stop and state.since_improvement == 0
    state = EarlyStopState(best=5.0)
    stops = [early_stop_update(state, 5.0, 5)[1] for _ in range(5)]
    assert stops == [False, False, False, False, True]
    state, _ = early_stop_update(state, 5.5, 5)
    assert state.since_improvement == 0 and state.best == 5.5


@pytest.mark.parametrize("bad", [dict(lambda_t=-1), dict(lr_min=1.0, lr_max=0.1), dict(patience=0),
                                 dict(warmup_fraction=1.0), dict(clip_norm=0), dict(batch_size=0)])
def test_invalid_train_config(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def small_run(seed=0):
    cfg = ModelConfig.tiny(seed=seed)
    model = build_model(cfg)
    train_set, val_set = tiny_episodes(cfg, 8, 100), tiny_episodes(cfg, 3, 200)
    frozen = {n: t.data.copy() for n, t in model.frozen_params().items()}
    result = train(model, train_set, val_set, TrainConfig(max_epochs=4, batch_size=3, lr_max=1e-2, seed=seed))
    return result, frozen


def test_training_is_deterministic_and_keeps_frozen_tensors():
    a, frozen = small_run()
    b, _ = small_run()
    assert history_lines(a.history) == history_lines(b.history)
    for name, t in a.model.params.items():
        np.testing.assert_array_equal(t.data, b.model.params[name].data)
    for name, arr in frozen.items():
        np.testing.assert_array_equal(a.model.params[name].data, arr)
    rec = a.history[0]
    assert set(rec) == {"epoch", "train_loss", "loss_terms", "val_f1", "val_rouge_l", "lr"}


def test_training_rejects_empty_sets_and_non_finite_loss():
    cfg = ModelConfig.tiny()
    model = build_model(cfg)
    with pytest.raises(ValueError):
        train(model, [], tiny_episodes(cfg, 1), TrainConfig())
    model.params["head.importance.b"].data = np.array(np.nan)
    with pytest.raises(TrainingError, match="step 1"):
        nk_flag = nk.CHECK_FINITE
        nk.CHECK_FINITE = False
        try:
            train(model, tiny_episodes(cfg, 2), tiny_episodes(cfg, 1), TrainConfig(max_epochs=1))
        finally:
            nk.CHECK_FINITE = nk_flag


def test_best_epoch_state_is_restored():
    result, _ = small_run(seed=3)
    best = max(range(len(result.history)),
               key=lambda i: (0.5 * (result.history[i]["val_f1"] + result.history[i]["val_rouge_l"]), -i))
    assert result.best_epoch == best + 1
    assert math.isclose(result.best_score, 0.5 * (result.history[best]["val_f1"] + result.history[best]["val_rouge_l"]))
