"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values are computed eagerly; every operation records a backward closure on
the owning tape. Creation order is a topological order of the graph, so
reverse accumulation is a single reversed pass over the tape.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Ordered record of operations; supports reverse accumulation."""

    def __init__(self):
        self._nodes: list[Var] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def var(self, value, requires_grad: bool = True) -> "Var":
        return Var(self, _as_array(value), requires_grad=requires_grad)

    def const(self, value) -> "Var":
        return Var(self, _as_array(value), requires_grad=False)

    def _register(self, var: "Var") -> None:
        self._nodes.append(var)

    def backward(self, loss: "Var") -> None:
        """Accumulate d(loss)/d(node) into .grad for every node needing it."""
        if loss.tape is not self:
            raise AutodiffError("loss was recorded on a different tape")
        if loss.value.shape != ():
            raise AutodiffError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        if not np.isfinite(loss.value):
            raise AutodiffError("loss is not finite")
        loss.grad = np.ones(())
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class Var:
    """A node in the computation graph: a value plus an optional gradient."""

    __slots__ = ("tape", "value", "grad", "requires_grad", "_backward")

    def __init__(
        self,
        tape: Tape,
        value: np.ndarray,
        requires_grad: bool = False,
        backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward = backward if requires_grad else None
        tape._register(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = _unbroadcast(g, self.value.shape)
        if self.grad is None:
            self.grad = g.astype(np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __mul__(self, other):
        return mul(self, _coerce(self.tape, other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, self.tape.const(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(self.tape, other))


def _coerce(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _make(tape: Tape, value: np.ndarray, parents: Sequence[Var], backward) -> Var:
    requires = any(p.requires_grad for p in parents)
    return Var(tape, value, requires_grad=requires, backward=backward if requires else None)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    def bwd(g):
        a._accum(g)
        b._accum(g)

    return _make(a.tape, a.value + b.value, (a, b), bwd)


def sub(a: Var, b: Var) -> Var:
    def bwd(g):
        a._accum(g)
        b._accum(-g)

    return _make(a.tape, a.value - b.value, (a, b), bwd)


def mul(a: Var, b: Var) -> Var:
    def bwd(g):
        a._accum(g * b.value)
        b._accum(g * a.value)

    return _make(a.tape, a.value * b.value, (a, b), bwd)


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise AutodiffError("matmul expects 2-d operands")

    def bwd(g):
        a._accum(g @ b.value.T)
        b._accum(a.value.T @ g)

    return _make(a.tape, a.value @ b.value, (a, b), bwd)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape

    def bwd(g):
        a._accum(g.reshape(old))

    return _make(a.tape, a.value.reshape(shape), (a,), bwd)


def concat(parts: Sequence[Var], axis: int) -> Var:
    parts = list(parts)
    tape = parts[0].tape
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            p._accum(g[tuple(sl)])

    return _make(tape, np.concatenate([p.value for p in parts], axis=axis), parts, bwd)


def index_rows(a: Var, idx) -> Var:
    """Gather rows a[idx]; gradient scatter-adds back (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        buf = np.zeros_like(a.value)
        np.add.at(buf, idx, g)
        a._accum(buf)

    return _make(a.tape, a.value[idx], (a,), bwd)


def scatter_rows(a: Var, idx, rows: Var) -> Var:
    """Copy of `a` with rows[i] written at position idx[i]; idx must be unique."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise AutodiffError("scatter_rows requires unique indices")
    out = a.value.copy()
    out[idx] = rows.value

    def bwd(g):
        ga = g.copy()
        ga[idx] = 0.0
        a._accum(ga)
        rows._accum(g[idx])

    return _make(a.tape, out, (a, rows), bwd)


def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.value.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.value.shape))

    return _make(a.tape, a.value.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a: Var) -> Var:
    n = a.value.size
    return mul(sum_(a), a.tape.const(1.0 / n))


def sigmoid(a: Var) -> Var:
    out = np.empty_like(a.value)
    pos = a.value >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.value[pos]))
    ex = np.exp(a.value[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        a._accum(g * out * (1.0 - out))

    return _make(a.tape, out, (a,), bwd)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)

    def bwd(g):
        a._accum(g * (1.0 - out * out))

    return _make(a.tape, out, (a,), bwd)


def cos(a: Var) -> Var:
    def bwd(g):
        a._accum(-g * np.sin(a.value))

    return _make(a.tape, np.cos(a.value), (a,), bwd)


def clip(a: Var, lo: float, hi: float) -> Var:
    inside = (a.value > lo) & (a.value < hi)

    def bwd(g):
        a._accum(g * inside)

    return _make(a.tape, np.clip(a.value, lo, hi), (a,), bwd)


def masked_softmax(a: Var, mask: np.ndarray, axis: int) -> Var:
    """Softmax along `axis` restricted to mask==1 entries.

    Masked entries get weight exactly 0; rows with an all-zero mask yield an
    all-zero output row (no NaNs).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.value.shape)
    scores = np.where(mask > 0, a.value, -1e30)
    scores = scores - scores.max(axis=axis, keepdims=True)
    ex = np.exp(scores)
    denom = ex.sum(axis=axis, keepdims=True)
    soft = ex / denom
    out = soft * mask

    def bwd(g):
        gm = g * mask
        dot = (gm * soft).sum(axis=axis, keepdims=True)
        a._accum(soft * (gm - dot) * mask)

    return _make(a.tape, out, (a,), bwd)


def bce_with_logits_mean(logits: Var, labels) -> Var:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    y = np.asarray(labels, dtype=np.float64)
    z = logits.value
    if y.shape != z.shape:
        raise AutodiffError("logits/labels shape mismatch")
    # stable: softplus(z) - z*y = max(z,0) - z*y + log1p(exp(-|z|))
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    value = np.asarray(per.sum() / n)
    sig = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))

    def bwd(g):
        logits._accum(g * (sig - y) / n)

    return _make(logits.tape, value, (logits,), bwd)
