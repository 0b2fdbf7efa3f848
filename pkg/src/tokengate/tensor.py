"""Dense 1-D/2-D tensors with reverse-mode automatic differentiation.

Every op records a closure on the output tensor that knows how to push the
output gradient back to its inputs. ``Tensor.backward`` walks the recorded
graph in reverse topological order exactly once; gradients accumulate into
``.grad`` so a tensor used twice receives the sum of both contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

SIGMOID_CLAMP = 500.0
_GELU_C = math.sqrt(2.0 / math.pi)


class TapeError(RuntimeError):
    """Raised on misuse of the gradient tape (non-scalar root, reuse, detached root)."""


class PermutationError(ValueError):
    """Raised when an index list is expected to be a bijection and is not."""


class NumericError(ArithmeticError):
    """Raised when a numeric check meets a non-finite value."""


def _as_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype if dtype is not None else np.float64)
    if arr.ndim > 2:
        raise ValueError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            self.data = data
            if data.ndim > 2:
                raise ValueError(f"tensors are at most 2-D, got shape {data.shape}")
        else:
            self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph construction ----------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        out._op = op
        return out

    def backward(self) -> None:
        if self.data.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise TapeError("backward called on a node that is not attached to any parameter")
        if self._consumed:
            raise TapeError("this tape was already consumed by backward; rebuild the forward pass")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                node._consumed = True

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64))


def tensor(data, requires_grad: bool = False, dtype=np.float64, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def abs_(x: Tensor) -> Tensor:
    # subgradient sign(0) = 0
    def backward(g):
        x._accumulate(g * np.sign(x.data))

    return Tensor._make(np.abs(x.data), (x,), backward, "abs")


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    y = 1.0 / (1.0 + np.exp(-z))

    def backward(g):
        x._accumulate(g * y * (1.0 - y))

    return Tensor._make(y, (x,), backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return Tensor._make(y, (x,), backward, "tanh")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * (v * v * v))
    t = np.tanh(inner)
    y = 0.5 * v * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner))

    return Tensor._make(y, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def sum_(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()), x.shape))

    return Tensor._make(np.asarray(x.data.sum()), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size

    def backward(g):
        x._accumulate(np.broadcast_to(g.reshape(()) / n, x.shape))

    return Tensor._make(np.asarray(x.data.mean()), (x,), backward, "mean")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        x._accumulate(g.T)

    return Tensor._make(x.data.T, (x,), backward, "transpose")


def row_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor._make(y, (x,), backward, "row_softmax")


def layer_norm_rows(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    if eps <= 0:
        raise ValueError("layer norm eps must be positive")
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            gh = g * gain.data
            dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accumulate(dx)

    return Tensor._make(y, (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-softmax ``logits``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(g.reshape(()) * p / n)

    return Tensor._make(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# indexing and layout
# ---------------------------------------------------------------------------

def _check_permutation(perm: np.ndarray, n: int) -> None:
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise PermutationError(f"index list of length {perm.size} is not a permutation of 0..{n - 1}")


def take(x: Tensor, index) -> Tensor:
    """Select entries (1-D) or rows (2-D) by index, repeats allowed; backward scatter-adds."""
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    return Tensor._make(x.data[idx], (x,), backward, "take")


def gather_rows(x: Tensor, perm) -> Tensor:
    """Y[i] = X[perm[i]] for a bijection ``perm``."""
    perm = np.asarray(perm, dtype=np.int64)
    _check_permutation(perm, x.shape[0])

    def backward(g):
        dx = np.empty_like(g)
        dx[perm] = g
        x._accumulate(dx)

    return Tensor._make(x.data[perm], (x,), backward, "gather_rows")


def scatter_rows(y: Tensor, perm) -> Tensor:
    """Inverse of :func:`gather_rows`: X[perm[i]] = Y[i]."""
    perm = np.asarray(perm, dtype=np.int64)
    _check_permutation(perm, y.shape[0])
    out = np.empty_like(y.data)
    out[perm] = y.data

    def backward(g):
        y._accumulate(g[perm])

    return Tensor._make(out, (y,), backward, "scatter_rows")


def mask_rows(x: Tensor, keep) -> Tensor:
    """Zero the rows (or entries, for 1-D) where ``keep`` is false; no gradient through dropped rows."""
    keep = np.asarray(keep, dtype=bool)
    sel = keep[:, None] if x.ndim == 2 else keep
    y = np.where(sel, x.data, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        x._accumulate(np.where(sel, g, 0.0))

    return Tensor._make(y, (x,), backward, "mask_rows")


def expand_cols(v: Tensor, q: int) -> Tensor:
    """Stack a length-p vector q times side by side into a [p, q] matrix."""
    if v.ndim != 1:
        raise ValueError(f"expand_cols needs a vector, got shape {v.shape}")

    def backward(g):
        v._accumulate(g.sum(axis=1))

    return Tensor._make(np.repeat(v.data[:, None], q, axis=1), (v,), backward, "expand_cols")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        x._accumulate(dx)

    return Tensor._make(x.data[start:stop], (x,), backward, "slice_rows")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return Tensor._make(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return Tensor._make(np.concatenate([p.data for p in parts], axis=1), parts, backward, "concat_cols")


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, ids)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], inputs: Iterable[Tensor], eps: float = 1e-3) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from ``inputs`` each call. The relative error
    for a coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-5 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-5, 1e-2], got {eps}")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite at the base point")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        flat_grad = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"non-finite loss perturbing input {k} at coordinate {i}")
            numeric = (up - down) / (2 * eps)
            err = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
