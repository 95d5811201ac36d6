"""Mixture of low-rank experts: rank policy, gating and the combined update.

A bank holds K pairs (B_k, A_k) and a gate matrix G (K x d_gate). For a
gate input z the bank's update is

    dW(z) = sum_k g_k(z) * B_k @ A_k,   g(z) = softmax(G z)

with optional top-m sparsification of g, or constant 1/K weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .numkernel import Tensor

GATE_MODES = ("dense", "top", "uniform")


@dataclass
class LowRankPair:
    B: Tensor  # d_out x r
    A: Tensor  # r x d_in

    def __post_init__(self):
        if self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"B {self.B.shape} and A {self.A.shape} disagree on rank")
        if self.rank > min(self.d_out, self.d_in):
            raise ConfigError(f"rank {self.rank} exceeds min({self.d_out}, {self.d_in})")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    def product(self) -> Tensor:
        return nk.matmul(self.B, self.A)


@dataclass(frozen=True)
class RankPolicy:
    fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"rank fraction must lie in (0, 1], got {self.fraction}")


def rank_for(policy: RankPolicy, d_out: int, d_in: int) -> int:
    """ceil(p * min(d_out, d_in)), evaluated on the decimal value of p."""
    if d_out < 1 or d_in < 1:
        raise ConfigError(f"dimensions must be positive, got {d_out}x{d_in}")
    # Fraction(str(p)) keeps 0.1 * 10 at exactly 1 instead of 1.0000000000000002
    return max(1, math.ceil(Fraction(str(policy.fraction)) * min(d_out, d_in)))


@dataclass
class ExpertBank:
    experts: list[LowRankPair]
    gate: Tensor  # K x d_gate
    mode: str = "dense"
    top_m: int | None = None

    def __post_init__(self):
        if not self.experts:
            raise ConfigError("an expert bank needs K >= 1")
        shapes = {(e.d_out, e.d_in) for e in self.experts}
        if len(shapes) != 1:
            raise ConfigError(f"experts disagree on (d_out, d_in): {sorted(shapes)}")
        if self.mode not in GATE_MODES:
            raise ConfigError(f"gate mode must be one of {GATE_MODES}, got {self.mode!r}")
        if self.gate.data.ndim != 2 or self.gate.shape[0] != self.K:
            raise DimensionError(f"gate matrix {self.gate.shape} does not have K={self.K} rows")
        if self.mode == "top":
            if self.top_m is None or not 1 <= self.top_m <= self.K:
                raise ConfigError(f"top-m gating needs 1 <= m <= K={self.K}, got m={self.top_m}")

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.experts[0].d_out, self.experts[0].d_in

    @property
    def d_gate(self) -> int:
        return self.gate.shape[1]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, e in enumerate(self.experts):
            out[f"{prefix}{k}.B"] = e.B
            out[f"{prefix}{k}.A"] = e.A
        out[f"{prefix}gate"] = self.gate
        return out


def init_expert_bank(
    K: int,
    d_out: int,
    d_in: int,
    policy: RankPolicy,
    seed: int,
    d_gate: int | None = None,
    mode: str = "dense",
    top_m: int | None = None,
) -> ExpertBank:
    """Fresh bank: A_k ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B_k = 0, gate = 0.

    B = 0 makes the initial update exactly zero and the zero gate gives
    uniform weights.
    """
    if K < 1:
        raise ConfigError(f"K must be >= 1, got {K}")
    r = rank_for(policy, d_out, d_in)
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_in)
    experts = [
        LowRankPair(
            B=Tensor(np.zeros((d_out, r)), requires_grad=True),
            A=Tensor(rng.uniform(-bound, bound, size=(r, d_in)), requires_grad=True),
        )
        for _ in range(K)
    ]
    gate = Tensor(np.zeros((K, d_gate or d_in)), requires_grad=True)
    return ExpertBank(experts, gate, mode=mode, top_m=top_m)


def top_m_mask(logits: np.ndarray, m: int) -> np.ndarray:
    """Boolean mask of the m largest entries; ties go to the lowest index."""
    order = np.argsort(-logits, kind="stable")
    mask = np.zeros(logits.shape, dtype=bool)
    mask[order[:m]] = True
    return mask


def gate_from_logits(logits: Tensor, mode: str = "dense", top_m: int | None = None) -> Tensor:
    K = logits.shape[0]
    if mode == "uniform":
        return Tensor(np.full(K, 1.0 / K))
    row = nk.reshape(logits, (1, K))
    if mode == "dense":
        return nk.reshape(nk.softmax_rows(row), (K,))
    if mode == "top":
        if top_m is None or not 1 <= top_m <= K:
            raise ConfigError(f"top-m gating needs 1 <= m <= K={K}, got m={top_m}")
        mask = top_m_mask(logits.data, top_m)
        return nk.reshape(nk.softmax_rows(row, mask=mask[None, :]), (K,))
    raise ConfigError(f"unknown gate mode {mode!r}")


def gate_weights(bank: ExpertBank, z: Tensor) -> Tensor:
    """Per-expert weights on the K-simplex for gate input ``z``."""
    z = nk.as_tensor(z)
    if z.shape != (bank.d_gate,):
        raise DimensionError(f"gate input has shape {z.shape}, expected ({bank.d_gate},)")
    logits = nk.reshape(nk.matmul(bank.gate, nk.reshape(z, (bank.d_gate, 1))), (bank.K,))
    return gate_from_logits(logits, bank.mode, bank.top_m)


def delta_weight(bank: ExpertBank, z: Tensor) -> Tensor:
    """sum_k g_k(z) B_k A_k as a d_out x d_in tensor."""
    g = gate_weights(bank, z)
    total = None
    for k, expert in enumerate(bank.experts):
        if bank.mode == "top" and g.data[k] == 0.0:
            continue
        term = nk.mul(nk.getitem(g, k), expert.product())
        total = term if total is None else nk.add(total, term)
    return total


def count_parameters(specs) -> tuple[int, int]:
    """(trainable, frozen) element counts from (name, shape, trainable) triples."""
    trainable = frozen = 0
    for _, shape, is_trainable in specs:
        n = math.prod(shape)
        if is_trainable:
            trainable += n
        else:
            frozen += n
    return trainable, frozen


def trainable_fraction(model_config) -> float:
    """Trainable share of all parameters for a model configuration."""
    from .model import parameter_specs

    trainable, frozen = count_parameters(parameter_specs(model_config))
    return float(Fraction(trainable, trainable + frozen))
