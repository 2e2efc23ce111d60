"""Reverse-mode autodiff over numpy arrays with a deliberately closed op set.

Design notes:

* A ``Tensor`` records its parents and a backward closure; ``backward`` runs a
  topological sweep from a scalar loss. There is no graph retained between
  steps and no broadcasting magic — every op states its shape contract and
  raises ``ContractViolation`` when violated.
* Ops preserve the input dtype. Training runs float32 end to end; the
  gradient tests re-run the same graphs in float64 against central finite
  differences.
* The only ops allowed to touch compiled code are the trilinear gather /
  scatter pair in :mod:`sanf.kernels`; everything else is plain numpy.

Set ``SANF_DEBUG=1`` to make every op assert its output is finite.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, UsageError
from .kernels import gather_corners, scatter_corners

CHECK_FINITE = os.environ.get("SANF_DEBUG", "") not in ("", "0")


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # convenience operators (thin wrappers over the op set)
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_const(self, float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add_const(self, -float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Wrap ``data`` as a leaf Tensor, casting to ``dtype`` (f32 by default)."""
    return Tensor(np.ascontiguousarray(data, dtype=dtype), requires_grad=requires_grad)


def constant(data, dtype=np.float32) -> Tensor:
    return tensor(data, requires_grad=False, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by an autodiff op")
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), _parents=tuple(parents))
    return out


def _need(t: Tensor) -> bool:
    return t.requires_grad


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = _make(a.data + b.data, (a, b))

    def back(g):
        if _need(a):
            a.accumulate(g)
        if _need(b):
            b.accumulate(g)

    out._backward = back
    return out


def add_const(a: Tensor, c: float) -> Tensor:
    out = _make(a.data + a.data.dtype.type(c), (a,))

    def back(g):
        if _need(a):
            a.accumulate(g)

    out._backward = back
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * a.data.dtype.type(s), (a,))

    def back(g):
        if _need(a):
            a.accumulate(g * a.data.dtype.type(s))

    out._backward = back
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = _make(a.data * b.data, (a, b))

    def back(g):
        if _need(a):
            a.accumulate(g * b.data)
        if _need(b):
            b.accumulate(g * a.data)

    out._backward = back
    return out


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation("matmul: both operands must be rank 2")
    bd = b.data.T if transpose_b else b.data
    if a.data.shape[1] != bd.shape[0]:
        raise ContractViolation(f"matmul: inner dims {a.data.shape} @ {bd.shape}")
    out = _make(a.data @ bd, (a, b))

    def back(g):
        if _need(a):
            a.accumulate(g @ bd.T)
        if _need(b):
            gb = a.data.T @ g
            b.accumulate(gb.T if transpose_b else gb)

    out._backward = back
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(f"add_bias: {x.data.shape} + {b.data.shape}")
    out = _make(x.data + b.data[None, :], (x, b))

    def back(g):
        if _need(x):
            x.accumulate(g)
        if _need(b):
            b.accumulate(g.sum(axis=0))

    out._backward = back
    return out


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0), (a,))

    def back(g):
        if _need(a):
            a.accumulate(g * (a.data > 0))

    out._backward = back
    return out


def sigmoid(a: Tensor) -> Tensor:
    # numerically symmetric form; fine for the magnitudes we feed it
    s = (1.0 / (1.0 + np.exp(-a.data))).astype(a.data.dtype)
    out = _make(s, (a,))

    def back(g):
        # captures the array, not the output Tensor: keeps the graph cycle-free
        if _need(a):
            a.accumulate(g * s * (1 - s))

    out._backward = back
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _make(e, (a,))

    def back(g):
        if _need(a):
            a.accumulate(g * e)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    out = _make(a.data.sum(keepdims=False).reshape(()), (a,))

    def back(g):
        if _need(a):
            a.accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    out._backward = back
    return out


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = _make(a.data.sum(axis=axis), (a,))

    def back(g):
        if _need(a):
            a.accumulate(np.expand_dims(g, axis).repeat(a.data.shape[axis], axis=axis))

    out._backward = back
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _make(a.data.mean().reshape(()), (a,))

    def back(g):
        if _need(a):
            a.accumulate(np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype))

    out._backward = back
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of squared difference."""
    _check_same_shape(a, b, "mse")
    d = a.data - b.data
    n = d.size
    out = _make(np.asarray((d.astype(d.dtype) ** 2).mean()).reshape(()), (a, b))

    def back(g):
        c = g * 2.0 / n
        if _need(a):
            a.accumulate((c * d).astype(a.data.dtype))
        if _need(b):
            b.accumulate((-c * d).astype(b.data.dtype))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# structure ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))

    def back(g):
        if _need(a):
            a.accumulate(g.reshape(a.data.shape))

    out._backward = back
    return out


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    if a.data.ndim != 2:
        raise ContractViolation("take_rows: input must be rank 2")
    idx = np.asarray(idx, dtype=np.int64)
    out = _make(a.data[idx], (a,))

    def back(g):
        if _need(a):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a.accumulate(ga)

    out._backward = back
    return out


def cumsum_exclusive(a: Tensor) -> Tensor:
    """Exclusive prefix sum along the last axis of a 2D tensor."""
    if a.data.ndim != 2:
        raise ContractViolation("cumsum_exclusive: input must be rank 2")
    c = np.cumsum(a.data, axis=1)
    out_data = np.empty_like(a.data)
    out_data[:, 0] = 0
    out_data[:, 1:] = c[:, :-1]
    out = _make(out_data, (a,))

    def back(g):
        if _need(a):
            # d out[:, j] / d a[:, i] = 1 for i < j  =>  grad a[:, i] = sum_{j > i} g[:, j]
            gc = np.cumsum(g, axis=1)
            a.accumulate(gc[:, -1:] - gc)

    out._backward = back
    return out


def weighted_sum(w: Tensor, v: Tensor) -> Tensor:
    """Per-ray weighted sum over samples: [R,S] x [R,S,C] -> [R,C]."""
    if w.data.ndim != 2 or v.data.ndim != 3 or w.data.shape != v.data.shape[:2]:
        raise ContractViolation(f"weighted_sum: {w.data.shape} with {v.data.shape}")
    out = _make(np.einsum("rs,rsc->rc", w.data, v.data), (w, v))

    def back(g):
        if _need(w):
            w.accumulate(np.einsum("rc,rsc->rs", g, v.data))
        if _need(v):
            v.accumulate(w.data[:, :, None] * g[:, None, :])

    out._backward = back
    return out


def outer(a: Tensor, b: Tensor) -> Tensor:
    """[R] x [C] -> [R,C]."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ContractViolation("outer: both operands must be rank 1")
    out = _make(a.data[:, None] * b.data[None, :], (a, b))

    def back(g):
        if _need(a):
            a.accumulate(g @ b.data)
        if _need(b):
            b.accumulate(a.data @ g)

    out._backward = back
    return out


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(L2 norm, eps); safe at the zero vector."""
    if a.data.ndim != 2:
        raise ContractViolation("row_normalize: input must be rank 2")
    norm = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, a.data.dtype.type(eps))
    out = _make(a.data / denom, (a,))

    def back(g):
        if _need(a):
            free = norm > eps  # rows where the norm actually varies
            gdot = (g * a.data).sum(axis=1, keepdims=True)
            ga = g / denom - np.where(free, a.data * gdot / denom**3, 0)
            a.accumulate(ga.astype(a.data.dtype))

    out._backward = back
    return out


def grid_gather(values: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Trilinear gather from a flattened grid: values [V,C], idx/weights [N,8] -> [N,C].

    idx and weights come precomputed (see FeatureGrid.prepare) so the forward
    and backward passes share them; they are constants w.r.t. the tape.
    """
    if values.data.ndim != 2:
        raise ContractViolation("grid_gather: values must be [V, C]")
    if idx.shape != weights.shape or idx.ndim != 2 or idx.shape[1] != 8:
        raise ContractViolation("grid_gather: idx/weights must be [N, 8]")
    out_data = np.zeros((idx.shape[0], values.data.shape[1]), dtype=values.data.dtype)
    gather_corners(values.data, idx, weights.astype(values.data.dtype), out_data)
    out = _make(out_data, (values,))

    def back(g):
        if _need(values):
            gv = np.zeros_like(values.data)
            scatter_corners(gv, idx, weights.astype(values.data.dtype), np.ascontiguousarray(g))
            values.accumulate(gv)

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor, params: Iterable[Tensor] = (), release: bool = True) -> None:
    """Reverse sweep from a scalar ``loss``; fills ``.grad`` on the graph leaves.

    Parameters listed in ``params`` that never entered the graph get an
    explicit zero gradient so optimizers can treat every parameter uniformly.

    With ``release`` (the default) the graph is torn down afterwards —
    intermediate grads, parents, and closures are dropped so memory returns
    on refcount instead of waiting for the cycle collector. Graphs are
    single-use either way.
    """
    if loss._backward is None and not loss._parents:
        raise UsageError("backward() called on a tensor that is not the result of a recorded op")
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.data.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)

    if release:
        for node in order:
            if node._parents:  # interior node: not a leaf/parameter
                node._parents = ()
                node._backward = None
                node.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
