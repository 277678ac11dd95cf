"""Dense tensors with reverse-mode differentiation.

Deliberately small: 1-D and 2-D float arrays plus the operations the
encoders and losses need. Every operation records its inputs and a
backward closure on the result tensor; calling :meth:`Tensor.backward`
on a scalar replays the recorded operations exactly once each, newest
first, and accumulates gradients into every reachable ``requires_grad``
leaf. Distinct graphs never share mutable state, so separate graphs may
be evaluated from separate threads.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Raised when an input is numerically meaningless (e.g. zero norm)."""


_SEQ = itertools.count()
_STATE = threading.local()


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation/mining paths)."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense real array that optionally participates in differentiation.

    Invariants: the element count always matches the shape; ``grad`` when
    populated has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_ctx", "_seq")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: tuple | None = None
        self._seq = next(_SEQ)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})\n{self.data!r}"

    # -- backward pass -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be scalar. Visits each recorded operation once, in
        reverse execution order.
        """
        if self.data.shape != ():
            raise DimensionError(
                f"backward requires a scalar, got shape {self.shape}"
            )
        nodes = self._reachable()
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad = node.grad + g
                continue
            _, parents, backward_fn = node._ctx
            parent_grads = backward_fn(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None:
                    continue
                if not (parent.requires_grad or parent._ctx is not None):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def _reachable(self) -> list["Tensor"]:
        """All graph tensors feeding ``self``, newest first (reverse order)."""
        seen: set[int] = set()
        out: list[Tensor] = []
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            out.append(t)
            if t._ctx is not None:
                stack.extend(t._ctx[1])
        out.sort(key=lambda t: t._seq, reverse=True)
        return out

    def execution_trace(self) -> list[tuple[str, int]]:
        """(op name, sequence id) of recorded operations, reverse order."""
        return [(t._ctx[0], t._seq) for t in self._reachable() if t._ctx is not None]

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __sub__(self, other):
        return add(self, -_coerce(other, self))

    def __rsub__(self, other):
        return add(_coerce(other, self), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, _coerce(1.0 / float(other), self))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _result(name: str, parents: Sequence[Tensor], data: np.ndarray,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    # op results skip Tensor.__init__: data is already a float ndarray
    out = object.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.requires_grad = False
    out.grad = None
    out._ctx = None
    out._seq = next(_SEQ)
    if grad_enabled() and any(p.requires_grad or p._ctx is not None for p in parents):
        out.requires_grad = True
        out._ctx = (name, tuple(parents), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", (a, b), data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _result("mul", (a, b), data, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot matrix-multiply shapes {a.shape} and {b.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", (a, b), data, backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def backward(g):
        return (g.T,)

    return _result("transpose", (x,), x.data.T.copy(), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result("reshape", (x,), data, backward)


# -- pointwise nonlinearities ----------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _result("tanh", (x,), data, backward)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _result("exp", (x,), data, backward)


def log(x: Tensor) -> Tensor:
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _result("log", (x,), data, backward)


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0).astype(x.dtype),)

    return _result("relu", (x,), data, backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow for large |x|."""
    z = x.data
    data = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        # derivative is the logistic sigmoid, computed on the stable side
        s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return (g * s,)

    return _result("softplus", (x,), data, backward)


# -- reductions -------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True),)

    return _result("sum", (x,), data, backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True) / count,)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(x.dtype, copy=True) / count,)

    return _result("mean", (x,), data, backward)


# -- shape assembly -----------------------------------------------------------------


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(
            f"cannot concatenate shapes {a.shape} and {b.shape} on the last axis"
        )
    data = np.concatenate([a.data, b.data], axis=-1)
    split = a.shape[-1]

    def backward(g):
        return g[..., :split], g[..., split:]

    return _result("concat", (a, b), data, backward)


def stack_rows(rows: Iterable[Tensor]) -> Tensor:
    rows = list(rows)
    if not rows:
        raise DimensionError("cannot stack zero rows")
    if any(r.ndim != 1 for r in rows) or len({r.shape for r in rows}) != 1:
        raise DimensionError(
            f"stack_rows expects equal-length vectors, got {[r.shape for r in rows]}"
        )
    data = np.stack([r.data for r in rows])

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return _result("stack_rows", tuple(rows), data, backward)


def vstack(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cannot stack shapes {a.shape} and {b.shape} by rows")
    data = np.concatenate([a.data, b.data], axis=0)
    split = a.shape[0]

    def backward(g):
        return g[:split], g[split:]

    return _result("vstack", (a, b), data, backward)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"slice_rows expects a matrix, got shape {x.shape}")
    data = x.data[start:stop].copy()

    def backward(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _result("slice_rows", (x,), data, backward)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows by index; duplicate indices accumulate gradient."""
    if x.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx].copy()

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result("take_rows", (x,), data, backward)


# -- similarity primitives ----------------------------------------------------------


def softmax(x: Tensor, temperature: float = 1.0, axis: int | None = -1) -> Tensor:
    """exp(x/t) normalized over ``axis`` (or over every entry when None).

    Stabilized by max subtraction, so arbitrarily large logits stay finite.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = x.data / temperature
    m = z.max() if axis is None else z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum() if axis is None else e.sum(axis=axis, keepdims=True)
    data = e / denom

    def backward(g):
        if axis is None:
            inner = (g * data).sum()
        else:
            inner = (g * data).sum(axis=axis, keepdims=True)
        return ((data * (g - inner)) / temperature,)

    return _result("softmax", (x,), data, backward)


def _row_norms(arr: np.ndarray) -> np.ndarray:
    return np.sqrt((arr * arr).sum(axis=-1))


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a matrix to unit length; zero rows are an error."""
    if x.ndim != 2:
        raise DimensionError(f"normalize_rows expects a matrix, got shape {x.shape}")
    norms = _row_norms(x.data)
    tiny = np.finfo(x.dtype).tiny
    if np.any(norms < tiny):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has zero norm; cannot normalize")
    data = x.data / norms[:, None]

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return ((g - data * inner) / norms[:, None],)

    return _result("normalize_rows", (x,), data, backward)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two vectors, in [-1, 1]."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape or u.shape[0] < 1:
        raise DimensionError(
            f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}"
        )
    nu = float(np.sqrt(u.data @ u.data))
    nv = float(np.sqrt(v.data @ v.data))
    tiny = float(np.finfo(u.dtype).tiny)
    if nu < tiny or nv < tiny:
        raise DegenerateInputError("cosine similarity is undefined for zero-norm input")
    cos = float(u.data @ v.data) / (nu * nv)
    data = np.asarray(cos, dtype=u.dtype)

    def backward(g):
        gu = g * (v.data / (nu * nv) - cos * u.data / (nu * nu))
        gv = g * (u.data / (nu * nv) - cos * v.data / (nv * nv))
        return gu.astype(u.dtype), gv.astype(v.dtype)

    return _result("cosine", (u, v), data, backward)
