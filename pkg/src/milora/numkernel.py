"""Dense tensors with reverse-mode differentiation.

Values are row-major numpy arrays. ``Tensor`` is a graph node: it holds a
value, an accumulated gradient and a closure that pushes its gradient to
its parents. Scalars default to float32; ``precision("f64")`` switches to
float64, which the finite-difference oracle requires.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, GradCheckError, NonFiniteError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = _DTYPES.get(os.environ.get("MILORA_PRECISION", "f32"), np.float32)
_grad_enabled = True

CHECK_FINITE = True


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


@contextlib.contextmanager
def precision(name: str):
    previous = "f64" if _dtype is np.float64 else "f32"
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for node in order:
            if node._parents and node.requires_grad:
                node.grad = np.zeros_like(node.data)
        self.grad = self.grad + grad if self.grad is not None else np.array(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result; ``backward(out)`` must add into parents' ``grad``."""
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = lambda: backward(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(out.grad, b.shape))

    return make_node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad, a.shape))
        _accumulate(b, _unbroadcast(-out.grad, b.shape))

    return make_node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(out):
        _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), backward, "mul")


def square(a: Tensor) -> Tensor:
    def backward(out):
        _accumulate(a, 2.0 * a.data * out.grad)

    return make_node(a.data * a.data, (a,), backward, "square")


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)

    def backward(out):
        _accumulate(a, out.grad * y * (1.0 - y))

    return make_node(y, (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(out):
        _accumulate(a, out.grad * mask)

    return make_node(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def backward(out):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner
        _accumulate(a, out.grad * dy)

    return make_node(y.astype(x.dtype), (a,), backward, "gelu")


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"identity": identity, "relu": relu, "gelu": gelu}


# shape -----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None

    def backward(out):
        _accumulate(a, out.grad.reshape(a.shape))

    return make_node(data, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(out):
        _accumulate(a, np.transpose(out.grad, inverse))

    return make_node(np.ascontiguousarray(data), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    data = np.array(a.data[index])

    def backward(out):
        g = np.zeros_like(a.data)
        np.add.at(g, index, out.grad)
        _accumulate(a, g)

    return make_node(data, (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(out):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, out.grad[tuple(sl)])

    return make_node(data, tensors, backward, "concat")


# reductions ------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = np.array(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return make_node(data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(a: Tensor) -> Tensor:
    """Inclusive prefix sum of a 1-D tensor."""
    if a.data.ndim != 1:
        raise DimensionError(f"cumsum expects a vector, got {a.shape}")

    def backward(out):
        _accumulate(a, np.cumsum(out.grad[::-1])[::-1])

    return make_node(np.cumsum(a.data), (a,), backward, "cumsum")


def frobenius_sq(x: Tensor) -> Tensor:
    """Sum of squared entries."""

    def backward(out):
        _accumulate(x, 2.0 * x.data * out.grad)

    return make_node(np.array(np.sum(x.data * x.data)), (x,), backward, "frobenius_sq")


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    return make_node(a.data @ b.data, (a, b), backward, "matmul")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax with max subtraction. ``mask`` (bool) zeroes entries out."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=1, keepdims=True)).astype(x.data.dtype)

    def backward(out):
        g = out.grad
        _accumulate(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return make_node(y, (x,), backward, "softmax_rows")


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is C_in×H×W or N×C_in×H×W; ``w`` is C_out×C_in×kh×kw.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {x.shape}, {w.shape}")
    n, c_in, h, wd = xd.shape
    c_out, c_in_w, kh, kw = w.shape
    if c_in != c_in_w:
        raise DimensionError(f"conv2d: input channels {c_in} != kernel channels {c_in_w}")
    if kh > h or kw > wd:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd}")
    ho, wo = h - kh + 1, wd - kw + 1
    # cols: n, ho, wo, c_in*kh*kw
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c_in * kh * kw)
    wmat = w.data.reshape(c_out, -1)
    y = (cols @ wmat.T).transpose(0, 3, 1, 2)
    y = np.ascontiguousarray(y if batched else y[0])

    def backward(out):
        g = out.grad if batched else out.grad[None]
        if w.requires_grad:
            gw = np.einsum("nohw,nhwk->ok", g, cols)
            _accumulate(w, gw.reshape(w.shape))
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, w.data[:, :, i, j])
            _accumulate(x, gx if batched else gx[0])

    return make_node(y, (x, w), backward, "conv2d")


# losses ----------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy computed from logits."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {y.shape}")
    z = logits.data
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def backward(out):
        _accumulate(logits, out.grad * (_sigmoid(z) - y) / z.size)

    return make_node(np.array(loss.mean(), dtype=z.dtype), (logits,), backward, "bce")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean token cross-entropy; ``logits`` is L×V, ``targets`` L integer ids."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    loss = (lse - z[rows, t]).mean()

    def backward(out):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        _accumulate(logits, out.grad * p / len(t))

    return make_node(np.array(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


# finite-difference oracle ----------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    results: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list[ParamCheck]:
        return [r for r in self.results if not r.passed]

    def as_rows(self) -> list[dict]:
        return [
            {"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed}
            for r in self.results
        ]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    Per coordinate the error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps coordinates whose true gradient is ~0 from dividing roundoff by zero.
    Parameters are perturbed in place and restored.
    """
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise GradCheckError(f"{name}: finite differences need float64 parameters")

    for p in params.values():
        p.zero_grad()
    out = f()
    out.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def evaluate(name, idx) -> float:
        with no_grad():
            value = float(f().data)
        if not np.isfinite(value):
            raise GradCheckError(f"objective is non-finite when perturbing {name}{list(idx)}")
        return value

    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            original = p.data[idx]
            p.data[idx] = original + step
            f_plus = evaluate(name, idx)
            p.data[idx] = original - step
            f_minus = evaluate(name, idx)
            p.data[idx] = original
            numeric[idx] = (f_plus - f_minus) / (2 * step)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        err = np.abs(a - numeric) / denom
        worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
        max_err = float(err.max()) if err.size else 0.0
        report.results.append(ParamCheck(name, max_err, tuple(int(i) for i in worst), max_err <= tol))
    return report
