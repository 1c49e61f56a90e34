"""Minimal dense-tensor reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every op records its inputs and a
backward closure on the output node; ``backward`` topologically orders the
reachable graph (the tape) and sweeps it once in reverse. All math is
64-bit. Broadcasting is supported only where the networks need it
(elementwise ops with numpy-compatible shapes).
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable

import numpy as np

from .errors import NumericError

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "leaf")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy_detached(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
        out._op = op
    else:
        out._parents = ()
        out._backward = None
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, "add", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, "div", (a, b), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def bw(g):
        _accum(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), "relu", (a,), bw)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bw(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), "abs", (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive input")
    out_data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(out_data, "log", (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        _accum(a, g * out_data)

    return _make(out_data, "exp", (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("sqrt of non-positive input")
    out_data = np.sqrt(a.data)

    def bw(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, "sqrt", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 0.5 * (1.0 + np.tanh(0.5 * a.data))  # numerically stable

    def bw(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, "sigmoid", (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the unclipped region."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        _accum(a, g * mask)

    return _make(np.clip(a.data, lo, hi), "clip", (a,), bw)


# ---------------------------------------------------------------------------
# structural / reduction ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, "matmul", (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T, "transpose", (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape

    def bw(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), "reshape", (a,), bw)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, "reduce_sum", (a,), bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Softmax over a 1-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 1:
        raise ValueError("softmax expects a 1-D tensor")
    shifted = a.data - a.data.max()
    e = np.exp(shifted)
    out_data = e / e.sum()

    def bw(g):
        dot = float(np.dot(g, out_data))
        _accum(a, out_data * (g - dot))

    return _make(out_data, "softmax", (a,), bw)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Rows (or the vector) scaled to unit Euclidean norm, with an eps guard."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)) + eps
    out_data = a.data / norm

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, (g - out_data * dot) / norm)

    return _make(out_data, "l2_normalize", (a,), bw)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make(out_data, "concat", tuple(ts), bw)


def gather_rows(a, idx) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], "gather_rows", (a,), bw)


def procrustes_rotation(h) -> Tensor:
    """Rotation maximizing tr(R H^T) for a 3x3 cross-covariance H.

    Forward: SVD with reflection correction so det(R) = +1. Backward:
    exact SVD sensitivities for square full-rank H (the det-correction
    sign is piecewise constant). Near-equal squared singular values are
    guarded by clamping the 1/(s_j^2 - s_i^2) factors.
    """
    h = as_tensor(h)
    if h.shape != (3, 3):
        raise ValueError("procrustes_rotation expects a 3x3 matrix")
    U, S, Vt = np.linalg.svd(h.data)
    if S[1] <= 1e-9:
        raise NumericError("degenerate cross-covariance: rank < 2")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d])
    V = Vt.T
    R = U @ D @ Vt

    def bw(g):
        # dL/dU and dL/dV from R = U D V^T
        gU = g @ V @ D
        gV = g.T @ U @ D
        s2 = S * S
        diff = s2[None, :] - s2[:, None]
        small = np.abs(diff) < 1e-12
        diff = np.where(small, np.where(diff >= 0, 1e-12, -1e-12), diff)
        F = 1.0 / diff
        np.fill_diagonal(F, 0.0)
        termU = F * (U.T @ gU - gU.T @ U)
        termV = F * (V.T @ gV - gV.T @ V)
        gH = U @ (termU * S[None, :] + S[:, None] * termV) @ Vt
        _accum(h, gH)

    return _make(R, "procrustes_rotation", (h,), bw)


# ---------------------------------------------------------------------------
# backward pass

def _toposort(root: Tensor) -> list[Tensor]:
    """Tape for the reverse sweep: reachable nodes in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss for every reachable requires_grad leaf.

    Returns a map from ``id(tensor)`` to gradient array. Leaves listed in
    ``wrt`` but unreachable from the loss get explicit zero gradients.
    Also leaves each visited tensor's ``.grad`` populated.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    tape = _toposort(loss)
    for node in tape:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads: dict[int, np.ndarray] = {}
    for node in tape:
        if node.requires_grad and node._backward is None and node.grad is not None:
            grads[id(node)] = node.grad
    if wrt is not None:
        for t in wrt:
            grads.setdefault(id(t), np.zeros_like(t.data))
    return grads


# ---------------------------------------------------------------------------
# gradient verification

def grad_check(f: Callable[[list[Tensor]], Tensor], points: list[np.ndarray],
               h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps a list of leaf tensors to a scalar tensor. Returns a report
    with the max relative error and a pass flag.
    """
    leaves = [Tensor(p, requires_grad=True) for p in points]
    loss = f(leaves)
    grads = backward(loss, wrt=leaves)
    max_rel = 0.0
    for leaf in leaves:
        analytic = grads[id(leaf)]
        flat = leaf.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = float(f(leaves).data)
            flat[i] = orig - h
            with no_grad():
                fm = float(f(leaves).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        numeric = numeric.reshape(leaf.data.shape)
        denom = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-8)
        rel = float(np.abs(analytic - numeric).max()) / denom
        max_rel = max(max_rel, rel)
    return {"max_rel_error": max_rel, "passed": max_rel < tol, "tol": tol}
