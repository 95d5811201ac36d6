"""Adapted computation blocks: temporal attention, spatial convolution,
cross-modal attention and the temporal/spatial fusion gate."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DimensionError
from .experts import ExpertBank, delta_weight
from .numkernel import Tensor

ATTENTION_MODES = ("score-bias", "projection-update")


def _pool_rows(X: Tensor) -> Tensor:
    return nk.mean(X, axis=0)


@dataclass
class TemporalAttentionAdapter:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    bank: ExpertBank | None = None
    mode: str = "score-bias"

    def __post_init__(self):
        if self.mode not in ATTENTION_MODES:
            raise ConfigError(f"attention mode must be one of {ATTENTION_MODES}, got {self.mode!r}")
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.bank is not None and self.bank.shape != (d, d):
            raise DimensionError(f"temporal bank must be {d}x{d}, got {self.bank.shape}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]


def temporal_forward(adapter: TemporalAttentionAdapter, X: Tensor, z: Tensor | None = None) -> Tensor:
    """Single-head attention over frames with a low-rank expert update.

    score-bias:        S = (Q K^T + X dW X^T) / sqrt(d)
    projection-update: S = Q (X (W_K + dW))^T / sqrt(d)
    """
    X = nk.as_tensor(X)
    if X.data.ndim != 2 or X.shape[1] != adapter.d:
        raise DimensionError(f"temporal input {X.shape} does not match feature dim {adapter.d}")
    scale = 1.0 / math.sqrt(adapter.d)
    Q = X @ adapter.w_q
    V = X @ adapter.w_v
    dW = None
    if adapter.bank is not None:
        dW = delta_weight(adapter.bank, _pool_rows(X) if z is None else z)

    if adapter.mode == "projection-update" and dW is not None:
        K = X @ nk.add(adapter.w_k, dW)
        scores = Q @ K.T
    else:
        scores = Q @ (X @ adapter.w_k).T
        if dW is not None:
            scores = scores + (X @ dW) @ X.T
    return nk.softmax_rows(scores * scale) @ V


@dataclass
class SpatialConvAdapter:
    kernel: Tensor  # C_out x C_in x kh x kw
    bank: ExpertBank | None = None
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in nk.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(nk.ACTIVATIONS)}, got {self.activation!r}")
        if self.bank is not None and self.bank.shape != self.flat_shape:
            raise DimensionError(f"spatial bank must be {self.flat_shape}, got {self.bank.shape}")

    @property
    def flat_shape(self) -> tuple[int, int]:
        c_out, c_in, kh, kw = self.kernel.shape
        return c_out, c_in * kh * kw


def spatial_forward(adapter: SpatialConvAdapter, X: Tensor, z: Tensor | None = None) -> Tensor:
    """sigma(conv2d(X, W + reshape(dW))). ``X`` is C_in×H×W or N×C_in×H×W.

    The gate input defaults to the mean over the batch of flattened inputs.
    """
    X = nk.as_tensor(X)
    kernel = adapter.kernel
    if adapter.bank is not None:
        if z is None:
            flat = nk.reshape(X, (-1, int(np.prod(X.shape[-3:]))))
            z = _pool_rows(flat)
        dW = delta_weight(adapter.bank, z)
        kernel = nk.add(kernel, nk.reshape(dW, kernel.shape))
    return nk.ACTIVATIONS[adapter.activation](nk.conv2d(X, kernel))


@dataclass
class CrossModalBlock:
    """Frozen projections for alignment-guided attention between two streams."""

    w_q: Tensor  # 2d x d, applied to [X_v, X_t]
    w_kv: Tensor
    w_kt: Tensor
    w_vv: Tensor


def cross_modal_attention(block: CrossModalBlock, X_v: Tensor, X_t: Tensor) -> tuple[Tensor, Tensor]:
    """Scores softmax(Q (K_v + K_t)^T / sqrt(d)) and the scores applied to V_v."""
    X_v, X_t = nk.as_tensor(X_v), nk.as_tensor(X_t)
    if X_v.shape != X_t.shape or X_v.data.ndim != 2:
        raise DimensionError(f"video stream {X_v.shape} and text stream {X_t.shape} must match")
    d = X_v.shape[1]
    Q = nk.concat([X_v, X_t], axis=1) @ block.w_q
    keys = nk.add(X_v @ block.w_kv, X_t @ block.w_kt)
    scores = nk.softmax_rows((Q @ keys.T) * (1.0 / math.sqrt(d)))
    return scores, scores @ (X_v @ block.w_vv)


@dataclass
class FusionGate:
    logit: Tensor  # scalar; alpha = sigmoid(logit)

    @property
    def alpha(self) -> float:
        return float(nk._sigmoid(self.logit.data))


def fuse(gate: FusionGate, y_t: Tensor, y_s: Tensor) -> Tensor:
    """alpha * y_t + (1 - alpha) * y_s."""
    y_t, y_s = nk.as_tensor(y_t), nk.as_tensor(y_s)
    if y_t.shape != y_s.shape:
        raise DimensionError(f"cannot fuse {y_t.shape} with {y_s.shape}")
    alpha = nk.sigmoid(gate.logit)
    return nk.add(nk.mul(alpha, y_t), nk.mul(nk.sub(1.0, alpha), y_s))
