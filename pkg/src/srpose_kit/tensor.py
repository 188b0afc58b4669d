"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations only record onto a :class:`Tape` while one is active in the current
thread; outside a tape every op is a plain numpy computation, which is the
inference fast path.  Parameters are leaf tensors with ``requires_grad=True``;
they outlive tapes and accumulate gradients in ``.grad``.

    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import EmptyInput, NonScalarLoss, ShapeMismatch, TapeConsumed

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records one forward pass.  Single use: ``backward`` may run once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if self.consumed:
            raise TapeConsumed("tape already used for a backward pass")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        # creation order is a valid topological order
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is self:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        if loss._tape is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        for leaf in self.leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        self.nodes.clear()


class Tensor:
    __array_priority__ = 100

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tape = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    out._tape = tape
    for p in parents:
        if p.requires_grad and p._tape is None:
            tape.leaves[id(p)] = p
    tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}: {e}") from None
    A, B = a.data, b.data

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data

    def back(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _result(A * B, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = A / B

    def back(g):
        return (_unbroadcast(g / B, A.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / B, B.shape) if b.requires_grad else None)

    return _result(out, (a, b), back)


def elementwise(a, b, op: str) -> Tensor:
    """Pointwise ``add`` or ``mul`` of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"elementwise {op}: {a.shape} vs {b.shape}")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown op {op!r}")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def arccos(a) -> Tensor:
    """arccos with the argument clamped to [-1, 1]; zero gradient where clamped."""
    a = as_tensor(a)
    x = np.clip(a.data, -1.0, 1.0)
    inside = np.abs(a.data) < 1.0

    def back(g):
        denom = np.sqrt(np.where(inside, 1.0 - x * x, 1.0))
        return (np.where(inside, -g / denom, 0.0),)

    return _result(np.arccos(x), (a,), back)


def huber(a, delta: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    quad = ax <= delta
    out = np.where(quad, 0.5 * x * x, delta * (ax - 0.5 * delta))
    return _result(out, (a,), lambda g: (g * np.where(quad, x, delta * np.sign(x)),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(out, (a,), back)


def mean_over_rows(a, mask=None) -> Tensor:
    """Mean over the row axis (-2) of ``(..., N, d)``; ``mask`` (..., N) selects rows."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch(f"mean_over_rows needs (..., N, d), got {a.shape}")
    if mask is None:
        if a.shape[-2] == 0:
            raise EmptyInput("mean over zero rows")
        n = a.shape[-2]
        w = np.full(a.shape[:-1] + (1,), 1.0 / n)
    else:
        m = np.asarray(mask, dtype=np.float64)
        counts = m.sum(axis=-1, keepdims=True)
        if np.any(counts == 0):
            raise EmptyInput("mean over zero valid rows")
        w = (m / counts)[..., None]
    out = (a.data * w).sum(axis=-2, keepdims=True)
    return _result(out, (a,), lambda g: (g * w,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Tensor:
    return transpose(a, None)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(a.data[idx], (a,), back)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def cross(a, b) -> Tensor:
    """Cross product over the last axis (size 3)."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    return _result(np.cross(A, B), (a, b),
                   lambda g: (np.cross(B, g), np.cross(g, A)))


def softmax_rows(a, mask=None) -> Tensor:
    """Softmax over the last axis with max subtraction.

    ``mask`` (broadcastable, True = keep) sends excluded entries to -inf;
    rows with nothing kept come out as all zeros.
    """
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.all():
            x = np.where(np.broadcast_to(mask, x.shape), x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    # work in one buffer: these tensors reach N x N per head
    out = np.subtract(x, m)
    np.exp(out, out=out)
    s = out.sum(axis=-1, keepdims=True)
    if (s > 0).all():
        out /= s
    else:
        np.divide(out, s, out=out, where=s > 0)
        out[np.broadcast_to(s <= 0, out.shape)] = 0.0

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), back)


def backward(loss: Tensor) -> None:
    """Backpropagate ``loss`` through the tape that produced it."""
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise RuntimeError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def numerical_gradient(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (modified in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)
