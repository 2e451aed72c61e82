"""Dense tensors with a reverse-mode gradient tape.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a backward closure and references to their inputs; calling
:meth:`Tensor.backward` on a scalar linearises that graph into a
:class:`GradTape` (topological order) and replays it in reverse.

Broadcasting is restricted on purpose: two operands must have equal shapes, or
the shorter shape must be a suffix of the longer one (leading-dimension batch
broadcast). Python scalars combine with anything.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TapeError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators --------------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None) -> "GradTape":
        """Back-propagate from this tensor and return the replayed tape.

        Leaf gradients accumulate into ``.grad``. A graph can be replayed only
        once; build a fresh forward pass to differentiate again.
        """
        if self._consumed:
            raise TapeError("backward() already ran on this graph; rebuild it with a new forward pass")
        if not self.requires_grad:
            raise TapeError("backward() on a tensor that does not require gradients")
        if grad is None:
            if self.size != 1:
                raise DimensionError(f"backward() needs an explicit gradient for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        tape = GradTape.from_output(self)
        tape.run(np.asarray(grad, dtype=self.data.dtype))
        return tape


@dataclass
class GradTape:
    """Recorded operations in topological order (inputs before consumers)."""

    ops: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
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
        return cls(order)

    def run(self, seed: np.ndarray) -> None:
        out = self.ops[-1]
        grads: dict[int, np.ndarray] = {id(out): seed}
        for node in reversed(self.ops):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            # release the graph so a second replay is detected and memory is freed
            node._backward = None
            node._parents = ()
            node._consumed = True


# -- helpers ---------------------------------------------------------------
def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    out = Tensor(data, dtype=data.dtype)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: incompatible shapes {a} and {b} (only leading-dimension broadcast allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    # size-1 axes only arise from matmul batch broadcasting
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


# -- elementwise -----------------------------------------------------------
def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _operand(a, b)
    b = _operand(b, a)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "relu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions do not broadcast: {a.shape} @ {b.shape}") from exc
    return _result(out, (a, b), backward, "matmul")


# -- shape ops -------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} into {tuple(shape)}") from exc

    def backward(g):
        return (g.reshape(old),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape
    out = x.data[idx]

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _is_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward, "getitem")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("stack of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shapes {ref} and {t.shape} differ")
    ax = axis % (len(ref) + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=ax), tensors, backward, "stack")


def pad_rows(x: Tensor, total: int, axis: int = 0) -> Tensor:
    """Zero-pad ``x`` along ``axis`` up to length ``total``."""
    extra = total - x.shape[axis]
    if extra < 0:
        raise DimensionError(f"pad_rows: length {x.shape[axis]} exceeds target {total}")
    if extra == 0:
        return x
    zshape = list(x.shape)
    zshape[axis] = extra
    return concat([x, Tensor(np.zeros(zshape, dtype=x.dtype))], axis=axis)


# -- reductions ------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise DimensionError(f"mean over an empty axis of shape {x.shape}")
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# -- normalisation and friends ---------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def rms_norm(x: Tensor, w: Tensor, eps: float = 1e-6) -> Tensor:
    """``w * x / sqrt(mean(x**2) + eps)`` over the last axis.

    The statistics are computed in float64 whatever the storage dtype, and the
    result is cast back to the dtype of ``x``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if w.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm weight shape {w.shape} does not match last dim of {x.shape}")
    dtype = x.dtype
    xd = x.data.astype(np.float64)
    wd = w.data.astype(np.float64)
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xn = xd * r

    def backward(g):
        g = g.astype(np.float64)
        gw = (g * xn).reshape(-1, xd.shape[-1]).sum(axis=0)
        u = g * wd
        gx = u * r - xd * (r ** 3) * (u * xd).mean(axis=-1, keepdims=True)
        return gx.astype(dtype), gw.astype(w.dtype)

    return _result((wd * xn).astype(dtype), (x, w), backward, "rms_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def backward(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), backward, "dropout")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (embedding lookup is ``axis=0``)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise DimensionError(f"take: index out of range for axis of size {n}")
    shape = x.shape

    def backward(g):
        # result layout: x.shape[:ax] + idx.shape + x.shape[ax+1:]
        lead, trail = shape[:ax], shape[ax + 1:]
        gm = np.moveaxis(g.reshape(lead + (idx.size,) + trail), ax, 0).reshape(idx.size, -1)
        flat = idx.reshape(-1)
        cols = gm.shape[1]
        if cols <= 16:
            acc = np.stack([np.bincount(flat, weights=gm[:, j], minlength=n) for j in range(cols)], axis=1)
        else:
            acc = np.zeros((n, cols), dtype=np.float64)
            np.add.at(acc, flat, gm)
        acc = acc.astype(g.dtype).reshape((n,) + lead + trail)
        return (np.moveaxis(acc, 0, ax),)

    return _result(np.take(x.data, idx, axis=ax), (x,), backward, "take")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    m = np.ones(t.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        raise DimensionError("cross_entropy: no unmasked positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -(picked * m).sum() / count

    def backward(g):
        p = np.exp(logp)
        np.put_along_axis(p, t[..., None], np.take_along_axis(p, t[..., None], axis=-1) - 1.0, axis=-1)
        return (p * (m[..., None] * (g / count)),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# -- constructors ----------------------------------------------------------
def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def parameter(data, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)
