"""Dense float64 tensors with a reverse-mode gradient tape.

Tensors are immutable.  Operations record themselves on the innermost active
:class:`GradTape` whenever one of their inputs was produced on (or watched
by) that tape; otherwise they just compute.  A tape supports exactly one
backward pass.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .. import kernels


class NumericsError(Exception):
    """Base class for numerics failures."""


class DimensionError(NumericsError, ValueError):
    pass


class DomainError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class TapeError(NumericsError, RuntimeError):
    pass


class NonDeterministicError(NumericsError, RuntimeError):
    pass


_next_id = itertools.count(1).__next__
_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable float64 array, optionally linked into a gradient tape."""

    __slots__ = ("data", "tape_id")

    def __init__(self, data, tape_id: int | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = _frozen(arr)
        self.tape_id = tape_id

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape_id: int | None = None) -> "Tensor":
        t = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = _frozen(arr)
        t.tape_id = tape_id
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", tape_id={self.tape_id}" if self.tape_id is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return apply_binary("add", self, other)

    def __radd__(self, other):
        return apply_binary("add", other, self)

    def __sub__(self, other):
        return apply_binary("sub", self, other)

    def __rsub__(self, other):
        return apply_binary("sub", other, self)

    def __mul__(self, other):
        return apply_binary("mul", self, other)

    def __rmul__(self, other):
        return apply_binary("mul", other, self)

    def __truediv__(self, other):
        return apply_binary("div", self, other)

    def __rtruediv__(self, other):
        return apply_binary("div", other, self)

    def __neg__(self):
        return apply_unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def exp(self) -> "Tensor":
        return apply_unary("exp", self)

    def log(self) -> "Tensor":
        return apply_unary("log", self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Append-only record of operations for one backward pass.

    Usage::

        with GradTape() as tape:
            w = tape.watch(w0)
            loss = (w * w).sum()
        grads = backward(loss, tape)
        grads[w.tape_id]
    """

    def __init__(self):
        self.nodes: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self.gradients: dict[int, Tensor] | None = None
        self._leaves: dict[int, tuple[int, ...]] = {}
        self._ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def watch(self, value) -> Tensor:
        """Register ``value`` as a leaf and return the tracked tensor."""
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        arr = value.data if isinstance(value, Tensor) else np.array(value, dtype=np.float64)
        t = Tensor._wrap(np.array(arr, dtype=np.float64), _next_id())
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("watched value contains NaN or Inf")
        self._leaves[t.tape_id] = t.shape
        self._ids.add(t.tape_id)
        return t

    def owns(self, t: Tensor) -> bool:
        return t.tape_id is not None and t.tape_id in self._ids

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[Tensor]:
        grads = backward(loss, self)
        return [grads[s.tape_id] for s in sources]


def _active_tape(*inputs: Tensor) -> GradTape | None:
    stack = _tape_stack()
    if not stack:
        return None
    tape = stack[-1]
    for t in inputs:
        if tape.owns(t):
            return tape
    return None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")


def _record(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    """Wrap ``out``; record ``vjp`` on the active tape when an input is tracked."""
    _check_finite(out, op)
    tape = _active_tape(*inputs)
    if tape is None:
        return Tensor._wrap(out)
    out_id = _next_id()
    in_ids = tuple(t.tape_id if tape.owns(t) else None for t in inputs)
    tape.nodes.append((out_id, in_ids, vjp))
    tape._ids.add(out_id)
    return Tensor._wrap(out, out_id)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- operations -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = A @ B
    return _record("matmul", out, (a, b), lambda g: (g @ B.T, A.T @ g))


_BINARY_KINDS = ("add", "sub", "mul", "div")


def apply_binary(kind: str, a, b) -> Tensor:
    if kind not in _BINARY_KINDS:
        raise ValueError(f"unknown binary op {kind!r}")
    a, b = as_tensor(a), as_tensor(b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None
    A, B = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = A + B
        vjp = lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    elif kind == "sub":
        out = A - B
        vjp = lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    elif kind == "mul":
        out = A * B
        vjp = lambda g: (_unbroadcast(g * B, sa), _unbroadcast(g * A, sb))
    else:
        if np.any(B == 0.0):
            raise NonFiniteError("division by zero")
        out = A / B
        vjp = lambda g: (_unbroadcast(g / B, sa), _unbroadcast(-g * out / B, sb))
    if out.shape != shape:
        out = np.broadcast_to(out, shape).copy()
    return _record(kind, out, (a, b), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_UNARY_KINDS = ("neg", "exp", "expm1", "log", "sigmoid", "relu", "tanh", "square", "softplus")


def apply_unary(kind: str, a) -> Tensor:
    """Elementwise map.  ``softplus`` is log(1 + e^x), used for log-sigmoid heads."""
    a = as_tensor(a)
    A = a.data
    if kind == "neg":
        out = -A
        vjp = lambda g: (-g,)
    elif kind == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(A)
        vjp = lambda g: (g * out,)
    elif kind == "expm1":
        with np.errstate(over="ignore"):
            out = np.expm1(A)
        vjp = lambda g: (g * (out + 1.0),)
    elif kind == "log":
        bad = np.argwhere(A <= 0.0)
        if len(bad):
            raise DomainError(f"log of non-positive entry at index {tuple(int(i) for i in bad[0])}")
        out = np.log(A)
        vjp = lambda g: (g / A,)
    elif kind == "sigmoid":
        out = _sigmoid(A)
        vjp = lambda g: (g * out * (1.0 - out),)
    elif kind == "relu":
        out = np.maximum(A, 0.0)
        vjp = lambda g: (g * (A > 0.0),)
    elif kind == "tanh":
        out = np.tanh(A)
        vjp = lambda g: (g * (1.0 - out * out),)
    elif kind == "square":
        out = A * A
        vjp = lambda g: (2.0 * g * A,)
    elif kind == "softplus":
        out = _softplus(A)
        vjp = lambda g: (g * _sigmoid(A),)
    else:
        raise ValueError(f"unknown unary op {kind!r}")
    return _record(kind, out, (a,), vjp)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce(kind: str, a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is not None:
        axis = _check_axis(axis, a.ndim)
    count = a.size if axis is None else shape[axis]
    if kind == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)
        scale = 1.0
    elif kind == "mean":
        if count == 0:
            raise DimensionError("mean over an empty axis")
        out = a.data.sum(axis=axis, keepdims=keepdims) / count
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * scale, shape),)

    return _record(kind, np.asarray(out, dtype=np.float64), (a,), vjp)


def log_sum_exp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """max + log(sum(exp(a - max))) along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0:
        raise DimensionError("log_sum_exp needs at least one axis")
    axis = _check_axis(axis, a.ndim)
    if a.shape[axis] == 0:
        raise DimensionError("log_sum_exp over an empty axis")
    moved = np.moveaxis(a.data, axis, -1)
    lead = moved.shape[:-1]
    flat = np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))
    out = kernels.logsumexp_rows(flat).reshape(lead)
    if keepdims:
        out = np.expand_dims(out, axis)
    A = a.data

    def vjp(g):
        o = out if keepdims else np.expand_dims(out, axis)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(A - o),)

    return _record("log_sum_exp", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    a = as_tensor(a)
    A = a.data
    out = np.clip(A, lo, hi)
    inside = (A >= lo) & (A <= hi)
    return _record("clip", out, (a,), lambda g: (g * inside,))


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate in the gradient."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise DimensionError(f"row index out of range for {a.shape[0]} rows")
    shape = a.shape

    def vjp(g):
        acc = np.zeros(shape)
        np.add.at(acc, index, g)
        return (acc,)

    return _record("take_rows", a.data[index], (a,), vjp)


def scatter_rows(a, index, n_rows: int) -> Tensor:
    """Place rows of ``a`` at ``index`` in a zero tensor with ``n_rows`` rows."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if len(index) != a.shape[0]:
        raise DimensionError(f"{len(index)} indices for {a.shape[0]} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[index] = a.data
    return _record("scatter_rows", out, (a,), lambda g: (g[index],))


def slice_last(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", a.data[..., start:stop].copy(), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def bernoulli_logit_loglik(logits, x) -> Tensor:
    """Per-row sum of log Bernoulli(x | sigmoid(logits)), stable in logit space."""
    logits = as_tensor(logits)
    L = np.ascontiguousarray(logits.data)
    X = np.ascontiguousarray(x, dtype=np.float64)
    if L.ndim != 2 or X.shape != L.shape:
        raise DimensionError(f"bernoulli log-likelihood shape mismatch: {L.shape} vs {X.shape}")
    out = kernels.bernoulli_logit_loglik_rows(L, X)
    return _record(
        "bernoulli_loglik",
        out,
        (logits,),
        lambda g: (g[:, None] * kernels.bernoulli_logit_grad(L, X),),
    )


# -- backward ---------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape) -> dict[int, Tensor]:
    """Gradients of scalar ``loss`` for every leaf watched on ``tape``.

    Consumes the tape.  Leaves the loss does not depend on get zeros.
    """
    if tape.consumed:
        raise TapeError("backward already ran on this tape")
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.owns(loss):
        raise TapeError("loss was not recorded on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones(loss.shape)}
    for out_id, in_ids, vjp in reversed(tape.nodes):
        g = grads.pop(out_id, None)
        if g is None:
            continue
        for in_id, gi in zip(in_ids, vjp(g)):
            if in_id is None:
                continue
            prev = grads.get(in_id)
            grads[in_id] = gi if prev is None else prev + gi
    result = {}
    for leaf, shape in tape._leaves.items():
        g = grads.get(leaf)
        result[leaf] = Tensor._wrap(np.zeros(shape) if g is None else np.array(g, dtype=np.float64).reshape(shape))
    tape.gradients = result
    tape.nodes = []
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backward and central differences.

    The relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = as_tensor(x)
    base = x.data
    f0, f1 = f(Tensor._wrap(base.copy())).item(), f(Tensor._wrap(base.copy())).item()
    if f0 != f1:
        raise NonDeterministicError(f"f is not deterministic: {f0!r} != {f1!r}")
    with GradTape() as tape:
        xw = tape.watch(x)
        y = f(xw)
    analytic = backward(y, tape)[xw.tape_id].data.reshape(-1)
    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor._wrap(xp.reshape(base.shape))).item()
        fm = f(Tensor._wrap(xm.reshape(base.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
