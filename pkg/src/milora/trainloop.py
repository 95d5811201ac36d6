"""Composite loss, Adam with warm-up + cosine decay, clipping, early stopping."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, TrainingError
from .evalmetrics import frame_f1, rouge_l, rouge_n
from .model import Model, decode_summary, forward_summary
from .numkernel import Tensor
from .synthdata import Episode

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_t: float = 1e-4
    lambda_s: float = 1e-4
    lambda_gate: float | None = None  # None -> lambda_t
    lr_max: float = 3e-3
    lr_min: float | None = None  # None -> 0.01 * lr_max
    warmup_fraction: float = 0.10
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pretrain_fraction: float = 0.0
    seed: int = 42

    def __post_init__(self):
        bad = []
        for name in ("lambda_t", "lambda_s"):
            if getattr(self, name) < 0:
                bad.append(f"{name} must be >= 0")
        if self.lambda_gate is not None and self.lambda_gate < 0:
            bad.append("lambda_gate must be >= 0")
        if self.lr_max <= 0:
            bad.append("lr_max must be positive")
        if self.lr_min is not None and not 0 <= self.lr_min <= self.lr_max:
            bad.append("lr_min must satisfy 0 <= lr_min <= lr_max")
        if not 0 <= self.warmup_fraction < 1:
            bad.append("warmup_fraction must lie in [0, 1)")
        if self.patience < 1:
            bad.append("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            bad.append("batch_size and max_epochs must be >= 1")
        if self.clip_norm <= 0:
            bad.append("clip_norm must be positive")
        if not 0 <= self.pretrain_fraction < 1:
            bad.append("pretrain_fraction must lie in [0, 1)")
        if bad:
            raise ConfigError("invalid train config: " + "; ".join(bad))

    @property
    def gate_coefficient(self) -> float:
        return self.lambda_t if self.lambda_gate is None else self.lambda_gate

    @property
    def min_lr(self) -> float:
        return 0.01 * self.lr_max if self.lr_min is None else self.lr_min

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# loss ------------------------------------------------------------------------

@dataclass
class LossResult:
    total: Tensor
    terms: dict[str, float]


def _bank_norms(model: Model, prefix: str) -> Tensor | None:
    total = None
    for name, t in model.params.items():
        if name.startswith(prefix) and (name.endswith(".A") or name.endswith(".B")):
            term = nk.frobenius_sq(t)
            total = term if total is None else nk.add(total, term)
    return total


def composite_loss(model: Model, batch: Sequence[Episode], cfg: TrainConfig) -> LossResult:
    """Summarisation loss plus expert and gate regularisers.

    L = mean_batch[BCE(importance) + CE(summary tokens)]
        + lambda_t * sum_temporal(|B|_F^2 + |A|_F^2)
        + lambda_s * sum_spatial(|B|_F^2 + |A|_F^2)
        + lambda_gate * sum(|gate|_2^2)
    """
    if not batch:
        raise ValueError("empty batch")
    scale = 1.0 / len(batch)
    bce = ce = None
    for ep in batch:
        out = forward_summary(model, ep.frames)
        b = nk.bce_with_logits(out.importance_logits, ep.importance)
        c = nk.cross_entropy(out.summary_logits, ep.summary_targets(model.cfg.summary_len))
        bce = b if bce is None else nk.add(bce, b)
        ce = c if ce is None else nk.add(ce, c)
    named = {"bce": nk.mul(bce, scale), "token_ce": nk.mul(ce, scale)}

    zero = Tensor(0.0, dtype=model.dtype)
    reg_t = _bank_norms(model, "temporal.bank.")
    reg_s = _bank_norms(model, "spatial.bank.")
    named["reg_temporal"] = nk.mul(reg_t, cfg.lambda_t) if reg_t is not None else zero
    named["reg_spatial"] = nk.mul(reg_s, cfg.lambda_s) if reg_s is not None else zero
    gates = [t for n, t in model.params.items() if n.endswith(".bank.gate")]
    reg_g = zero
    for g in gates:
        reg_g = nk.add(reg_g, nk.frobenius_sq(g))
    named["reg_gate"] = nk.mul(reg_g, cfg.gate_coefficient)

    total = None
    for t in named.values():
        total = t if total is None else nk.add(total, t)
    return LossResult(total, {k: float(v.data) for k, v in named.items()})


# schedule / optimiser ----------------------------------------------------------

def warmup_steps(cfg: TrainConfig, total_steps: int) -> int:
    return math.ceil(Fraction(str(cfg.warmup_fraction)) * total_steps)


def lr_at_step(cfg: TrainConfig, t: int, total_steps: int) -> float:
    """Linear warm-up to lr_max over ceil(f * total) steps, then cosine to lr_min."""
    if not 0 <= t <= total_steps:
        raise ValueError(f"step {t} outside [0, {total_steps}]")
    w = warmup_steps(cfg, total_steps)
    hi, lo = cfg.lr_max, cfg.min_lr
    if t < w:
        return hi * t / w
    if total_steps == w:
        return hi
    progress = (t - w) / (total_steps - w)
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    grads = list(grads)
    norm = math.sqrt(float(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in grads])))
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, cfg: TrainConfig) -> AdamState:
    """One bias-corrected Adam update; advances ``state.t``."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        if not p.requires_grad:
            raise TrainingError(f"refusing to update frozen tensor {name}")
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = np.asarray(p.data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps), dtype=p.data.dtype)
    return state


@dataclass
class EarlyStopState:
    best: float = -math.inf
    since_improvement: int = 0


def early_stop_update(state: EarlyStopState, score: float, patience: int) -> tuple[EarlyStopState, bool]:
    if score > state.best:
        state.best, state.since_improvement = score, 0
    else:
        state.since_improvement += 1
    return state, state.since_improvement >= patience


# training --------------------------------------------------------------------

class Trainer:
    """Owns the optimiser state and applies one update per batch."""

    def __init__(self, model: Model, cfg: TrainConfig, total_steps: int, state: AdamState | None = None):
        self.model, self.cfg, self.total_steps = model, cfg, total_steps
        self.state = state or AdamState()

    def step(self, batch: Sequence[Episode]) -> LossResult:
        model = self.model
        model.zero_grad()
        result = composite_loss(model, batch, self.cfg)
        if not np.isfinite(result.total.data):
            raise TrainingError(f"non-finite loss at step {self.state.t + 1}: {result.terms}")
        result.total.backward()
        params = model.trainable_params()
        grads = {n: p.grad for n, p in params.items()}
        clip_gradients(grads.values(), self.cfg.clip_norm)
        lr = lr_at_step(self.cfg, min(self.state.t + 1, self.total_steps), self.total_steps)
        adam_step(params, grads, self.state, lr, self.cfg)
        return result


def evaluate(model: Model, episodes: Sequence[Episode], threshold: float = 0.5) -> dict[str, float]:
    """Mean frame F1 and ROUGE-1/2/L (f-scores) over episodes."""
    if not episodes:
        raise ValueError("empty evaluation set")
    rows = []
    with nk.no_grad():
        for ep in episodes:
            out = forward_summary(model, ep.frames)
            cand = decode_summary(out.summary_logits.data)
            rows.append((
                frame_f1(out.importance.data, ep.importance, threshold),
                rouge_n(cand, ep.summary, 1)[2],
                rouge_n(cand, ep.summary, 2)[2],
                rouge_l(cand, ep.summary)[2],
            ))
    f1, r1, r2, rl = (float(np.mean(col)) for col in zip(*rows))
    return {"f1": f1, "rouge1": r1, "rouge2": r2, "rouge_l": rl}


def dataset_loss(model: Model, episodes: Sequence[Episode], cfg: TrainConfig) -> float:
    with nk.no_grad():
        return float(composite_loss(model, episodes, cfg).total.data)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    initial_train_loss: float
    best_score: float
    best_epoch: int
    optimizer: AdamState
    stopped_early: bool


def _batches(episodes: Sequence[Episode], size: int, rng: np.random.Generator):
    order = rng.permutation(len(episodes))
    for i in range(0, len(order), size):
        yield [episodes[j] for j in order[i:i + size]]


def train(model: Model, train_set: Sequence[Episode], val_set: Sequence[Episode], cfg: TrainConfig,
          pretrain_set: Sequence[Episode] | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optional warm start on ``pretrain_set``, then fine-tuning with early stopping.

    Returns the model restored to its best validation epoch.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    steps_per_epoch = math.ceil(len(train_set) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch

    if pretrain_set and cfg.pretrain_fraction > 0:
        pre_steps = max(1, round(cfg.pretrain_fraction * total_steps))
        warm = Trainer(model, cfg, pre_steps)
        rng = np.random.default_rng([cfg.seed, 1])
        while warm.state.t < pre_steps:
            for batch in _batches(pretrain_set, cfg.batch_size, rng):
                if warm.state.t >= pre_steps:
                    break
                warm.step(batch)
        log.info("warm start: %d steps on %d mixture episodes", pre_steps, len(pretrain_set))

    initial = dataset_loss(model, train_set, cfg)
    trainer = Trainer(model, cfg, total_steps)
    stopper = EarlyStopState()
    best_state, best_epoch = model.state(), 0
    history: list[dict] = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        losses, terms = [], {}
        for batch in _batches(train_set, cfg.batch_size, rng):
            result = trainer.step(batch)
            losses.append(float(result.total.data))
            for k, v in result.terms.items():
                terms[k] = terms.get(k, 0.0) + v
        metrics = evaluate(model, val_set)
        score = 0.5 * (metrics["f1"] + metrics["rouge_l"])
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "loss_terms": {k: v / len(losses) for k, v in terms.items()},
            "val_f1": metrics["f1"],
            "val_rouge_l": metrics["rouge_l"],
            "lr": lr_at_step(cfg, trainer.state.t, total_steps),
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d loss %.4f val f1 %.3f rouge-l %.3f", epoch, record["train_loss"],
                 metrics["f1"], metrics["rouge_l"])
        improved = score > stopper.best
        stopper, stop = early_stop_update(stopper, score, cfg.patience)
        if improved:
            best_state, best_epoch = model.state(), epoch
        if stop:
            stopped = True
            break
    model.load_state(best_state)
    return TrainResult(model, history, initial, stopper.best, best_epoch, trainer.state, stopped)


def history_lines(history: Iterable[dict]) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history)
