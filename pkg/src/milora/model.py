"""Frozen attention + convolution backbone with expert-bank adapters.

Pipeline per episode (T frames of d features):

    [cross-modal attention, optional] -> temporal attention (+ temporal bank)
                                     +-> spatial conv on the 2-D frame layout (+ spatial bank)
    fuse(alpha) -> per-frame importance head -> summary token head
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .experts import GATE_MODES, ExpertBank, LowRankPair, RankPolicy, rank_for
from .layers import (
    ATTENTION_MODES,
    CrossModalBlock,
    FusionGate,
    SpatialConvAdapter,
    TemporalAttentionAdapter,
    cross_modal_attention,
    fuse,
    spatial_forward,
    temporal_forward,
)
from .numkernel import Tensor

PAD, EOS = 0, 1
SPATIAL_INPUTS = ("frames", "temporal")
IMPORTANCE_PRIOR_LOGIT = -3.0
# Frozen query/key projections start small so base attention is near uniform and
# frame-to-frame structure has to come from the temporal bank. At unit gain the
# random score pattern is sharp enough to stall training on the synthetic task.
QK_INIT_GAIN = 0.1


@dataclass
class ModelConfig:
    d: int = 64
    T: int = 32
    K: int = 4
    rank_fraction: float = 0.1
    gate_mode: str = "dense"
    top_m: int | None = None
    attention_mode: str = "score-bias"
    c_in: int = 1
    height: int = 8
    width: int = 8
    c_out: int = 4
    kh: int = 3
    kw: int = 3
    activation: str = "relu"
    spatial_input: str = "frames"
    cross_modal: bool = False
    text_len: int = 4
    vocab: int = 64
    summary_len: int = 8
    adapt_temporal: bool = True
    adapt_spatial: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """T=3, d=8, K=2: small enough for exhaustive finite differences."""
        base = dict(d=8, T=3, K=2, c_in=1, height=2, width=4, c_out=2, kh=2, kw=2,
                    vocab=6, summary_len=3, text_len=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def conv_out(self) -> tuple[int, int, int]:
        return self.c_out, self.height - self.kh + 1, self.width - self.kw + 1

    def validate(self) -> None:
        bad = []
        for name in ("d", "T", "c_in", "height", "width", "c_out", "kh", "kw", "vocab",
                     "summary_len", "text_len"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad.append(f"{name} must be a positive integer")
        if not isinstance(self.K, int) or self.K < 1:
            bad.append("K must be >= 1")
        if not bad:
            if self.c_in * self.height * self.width != self.d:
                bad.append(f"c_in*height*width = {self.c_in * self.height * self.width} != d = {self.d}")
            if self.kh > self.height or self.kw > self.width:
                bad.append("kernel larger than the spatial frame")
            if self.vocab < self.T + 2:
                bad.append(f"vocab must be >= T + 2 = {self.T + 2} (pad, eos, one token per frame)")
        if not 0 < self.rank_fraction <= 1:
            bad.append("rank_fraction must lie in (0, 1]")
        if self.gate_mode not in GATE_MODES:
            bad.append(f"gate_mode must be one of {GATE_MODES}")
        elif self.gate_mode == "top" and (self.top_m is None or not 1 <= self.top_m <= max(self.K, 1)):
            bad.append("top_m must satisfy 1 <= top_m <= K")
        if self.attention_mode not in ATTENTION_MODES:
            bad.append(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.activation not in nk.ACTIVATIONS:
            bad.append(f"activation must be one of {sorted(nk.ACTIVATIONS)}")
        if self.spatial_input not in SPATIAL_INPUTS:
            bad.append(f"spatial_input must be one of {SPATIAL_INPUTS}")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))


def parameter_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """Every parameter tensor as (name, shape, trainable), in a fixed order."""
    d = cfg.d
    policy = RankPolicy(cfg.rank_fraction)
    specs: list[tuple[str, tuple[int, ...], bool]] = []
    if cfg.cross_modal:
        specs += [
            ("cross.w_q", (2 * d, d), False),
            ("cross.w_kv", (d, d), False),
            ("cross.w_kt", (d, d), False),
            ("cross.w_vv", (d, d), False),
        ]
    specs += [
        ("temporal.w_q", (d, d), False),
        ("temporal.w_k", (d, d), False),
        ("temporal.w_v", (d, d), False),
        ("spatial.kernel", (cfg.c_out, cfg.c_in, cfg.kh, cfg.kw), False),
        ("spatial.readout", (math.prod(cfg.conv_out), d), False),
    ]
    banks = []
    if cfg.adapt_temporal:
        banks.append(("temporal.bank", d, d, d))
    if cfg.adapt_spatial:
        banks.append(("spatial.bank", cfg.c_out, cfg.c_in * cfg.kh * cfg.kw, d))
    for prefix, d_out, d_in, d_gate in banks:
        r = rank_for(policy, d_out, d_in)
        for k in range(cfg.K):
            specs.append((f"{prefix}.{k}.B", (d_out, r), True))
            specs.append((f"{prefix}.{k}.A", (r, d_in), True))
        specs.append((f"{prefix}.gate", (cfg.K, d_gate), True))
    specs += [
        ("fusion.logit", (), True),
        ("head.importance.w", (d,), True),
        ("head.importance.b", (), True),
        ("head.summary.scalars", (3,), True),
        ("head.summary.vocab_bias", (cfg.vocab,), True),
    ]
    if cfg.cross_modal:
        specs.append(("cross.text_embed", (cfg.text_len, d), True))
    return specs


def tensor_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, tensor name); adding or removing other
    tensors never shifts a tensor's values."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _initial_value(cfg: ModelConfig, name: str, shape: tuple[int, ...]) -> np.ndarray:
    rng = tensor_rng(cfg.seed, name)
    if name.endswith(".B") or name.endswith(".gate") or name in ("fusion.logit", "head.summary.vocab_bias"):
        return np.zeros(shape)
    if name == "head.importance.b":
        # salient frames are rare; start the head near a 5% prior
        return np.full(shape, IMPORTANCE_PRIOR_LOGIT)
    if name.endswith(".A"):
        bound = 1.0 / math.sqrt(shape[1])
        return rng.uniform(-bound, bound, size=shape)
    if name == "head.summary.scalars":
        return np.ones(shape)
    if name == "head.importance.w":
        return rng.normal(0.0, 0.1 / math.sqrt(cfg.d), size=shape)
    if name == "cross.text_embed":
        return rng.normal(0.0, 0.1, size=shape)
    if name == "spatial.kernel":
        fan_in = cfg.c_in * cfg.kh * cfg.kw
    else:
        fan_in = shape[0]
    gain = QK_INIT_GAIN if name in ("temporal.w_q", "temporal.w_k") else 1.0
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=shape)


class SummaryOutput(NamedTuple):
    importance: Tensor  # T, in (0, 1)
    summary_logits: Tensor  # L x V
    fused: Tensor  # T x d
    importance_logits: Tensor  # T


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]
    trainable: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        p, cfg = self.params, self.cfg
        self.temporal = TemporalAttentionAdapter(
            p["temporal.w_q"], p["temporal.w_k"], p["temporal.w_v"],
            bank=self._bank("temporal.bank") if cfg.adapt_temporal else None,
            mode=cfg.attention_mode,
        )
        self.spatial = SpatialConvAdapter(
            p["spatial.kernel"],
            bank=self._bank("spatial.bank") if cfg.adapt_spatial else None,
            activation=cfg.activation,
        )
        self.fusion = FusionGate(p["fusion.logit"])
        self.cross = None
        if cfg.cross_modal:
            self.cross = CrossModalBlock(p["cross.w_q"], p["cross.w_kv"], p["cross.w_kt"], p["cross.w_vv"])

    def _bank(self, prefix: str) -> ExpertBank:
        experts = [LowRankPair(self.params[f"{prefix}.{k}.B"], self.params[f"{prefix}.{k}.A"])
                   for k in range(self.cfg.K)]
        return ExpertBank(experts, self.params[f"{prefix}.gate"], mode=self.cfg.gate_mode,
                          top_m=self.cfg.top_m)

    @property
    def dtype(self):
        return self.params["temporal.w_q"].data.dtype

    def trainable_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if self.trainable[n]}

    def frozen_params(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if not self.trainable[n]}

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data = np.array(state[n], dtype=t.data.dtype)

    def zero_grad(self) -> None:
        for t in self.trainable_params().values():
            t.zero_grad()

    def astype(self, dtype) -> "Model":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = t.grad.astype(dtype)
        return self


def build_model(cfg: ModelConfig, dtype=None) -> Model:
    """Seeded model: random frozen backbone, zero-update adapters."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError(f"expected a ModelConfig, got {type(cfg).__name__}")
    cfg.validate()
    dtype = dtype or nk.get_dtype()
    params, trainable = {}, {}
    for name, shape, is_trainable in parameter_specs(cfg):
        params[name] = Tensor(_initial_value(cfg, name, shape), requires_grad=is_trainable, dtype=dtype)
        trainable[name] = is_trainable
    return Model(cfg, params, trainable)


def perturb_trainable(model: Model, scale: float = 0.3, seed: int = 0) -> Model:
    """Add seeded noise to every trainable tensor (moves a fresh model off B = 0)."""
    for name, t in model.trainable_params().items():
        noise = tensor_rng(seed, name).normal(0.0, scale, size=t.shape)
        t.data = np.asarray(t.data + noise, dtype=t.data.dtype)
    return model


def summary_head(scalars: Tensor, vocab_bias: Tensor, logits: Tensor, importance: Tensor,
                 summary_len: int) -> Tensor:
    """Token logits (L x V) that point at frames by running salient count.

    With c_t the cumulative importance and n = c_{T-1}, position l scores
    frame token t+2 by  w_sel*logit_t - w_pos*(c_t - (l+1))^2,  eos by
    -w_pos*(n - l)^2 and pad by  w_pad*(l - n - 1/2). Vocabulary ids past the
    frame range score 0. A per-token bias is added everywhere.
    """
    T, V, L = logits.shape[0], vocab_bias.shape[0], summary_len
    dtype = logits.data.dtype
    w_sel, w_pos, w_pad = (nk.getitem(scalars, i) for i in range(3))
    counts = nk.cumsum(importance)
    n = nk.getitem(counts, T - 1)
    slots = Tensor(np.arange(1, L + 1).reshape(L, 1), dtype=dtype)
    positions = Tensor(np.arange(L).reshape(L, 1), dtype=dtype)

    offset = nk.sub(nk.reshape(counts, (1, T)), slots)
    frame_scores = nk.sub(nk.mul(w_sel, nk.reshape(logits, (1, T))), nk.mul(w_pos, nk.square(offset)))
    eos = nk.mul(nk.mul(w_pos, -1.0), nk.square(nk.sub(n, positions)))
    pad = nk.mul(w_pad, nk.sub(nk.sub(positions, n), 0.5))
    parts = [pad, eos, frame_scores]
    if V > T + 2:
        parts.append(Tensor(np.zeros((L, V - T - 2)), dtype=dtype))
    return nk.add(nk.concat(parts, axis=1), vocab_bias)


def forward_summary(model: Model, frames, use_adapters: bool = True) -> SummaryOutput:
    """Run the full pipeline on one T x d episode."""
    cfg, p = model.cfg, model.params
    X = frames if isinstance(frames, Tensor) else Tensor(frames, dtype=model.dtype)
    if X.shape != (cfg.T, cfg.d):
        raise DimensionError(f"frames have shape {X.shape}, model expects ({cfg.T}, {cfg.d})")
    T, d = cfg.T, cfg.d

    if model.cross is not None:
        pooled = nk.reshape(nk.mean(p["cross.text_embed"], axis=0), (1, d))
        text = nk.mul(Tensor(np.ones((T, 1)), dtype=X.data.dtype), pooled)
        _, attended = cross_modal_attention(model.cross, X, text)
        X = nk.add(X, attended)

    temporal, spatial = model.temporal, model.spatial
    if not use_adapters:
        temporal = dataclasses.replace(temporal, bank=None)
        spatial = dataclasses.replace(spatial, bank=None)

    y_t = temporal_forward(temporal, X)
    source = X if cfg.spatial_input == "frames" else y_t
    maps = spatial_forward(spatial, nk.reshape(source, (T, cfg.c_in, cfg.height, cfg.width)))
    y_s = nk.reshape(maps, (T, -1)) @ p["spatial.readout"]
    fused = fuse(model.fusion, y_t, y_s)

    logits = nk.add(nk.reshape(fused @ nk.reshape(p["head.importance.w"], (d, 1)), (T,)),
                    p["head.importance.b"])
    importance = nk.sigmoid(logits)
    summary = summary_head(p["head.summary.scalars"], p["head.summary.vocab_bias"], logits,
                           importance, cfg.summary_len)
    return SummaryOutput(importance, summary, fused, logits)


def forward_base(model: Model, frames) -> SummaryOutput:
    """The same pipeline with every expert update left out."""
    return forward_summary(model, frames, use_adapters=False)


def decode_summary(summary_logits: np.ndarray) -> list[int]:
    """Greedy tokens up to the first eos, pads dropped."""
    tokens = []
    for tok in np.argmax(np.asarray(summary_logits), axis=1):
        if tok == EOS:
            break
        if tok != PAD:
            tokens.append(int(tok))
    return tokens
