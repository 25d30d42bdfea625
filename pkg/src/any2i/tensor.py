"""Dense tensors with reverse-mode automatic differentiation.

The engine is a define-by-run tape over numpy arrays: every operation
returns a new Tensor that remembers its op kind, its parent tensors and
a closure that routes output gradients to the parents.  Storage is
float32 by default; float64 is used for gradient verification.  No
external autodiff framework is involved.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_active_counters: list["FlopCounter"] = []
_current_tag = "other"


class FlopCounter:
    """Counts matmul floating-point operations, grouped by tag."""

    def __init__(self):
        self.total = 0
        self.by_tag: dict[str, int] = {}

    def add(self, flops: int, tag: str) -> None:
        self.total += flops
        self.by_tag[tag] = self.by_tag.get(tag, 0) + flops


@contextmanager
def count_flops(counter: FlopCounter):
    """Activate a counter for the duration of the block."""
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


@contextmanager
def flop_tag(tag: str):
    """Attribute matmul flops inside the block to `tag`."""
    global _current_tag
    prev = _current_tag
    _current_tag = tag
    try:
        yield
    finally:
        _current_tag = prev


def _record_flops(flops: int) -> None:
    if _active_counters:
        for c in _active_counters:
            c.add(flops, _current_tag)


@contextmanager
def no_grad():
    """Disable tape recording (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A dense array plus its position in the autodiff graph.

    Leaf tensors are created directly (parameters, inputs); op tensors
    are created by the functions below.  `data` is a row-major numpy
    array of float32 or float64, all elements finite.
    """

    __slots__ = ("data", "op", "parents", "requires_grad", "grad", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = arr.astype(dtype, copy=False)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data contains non-finite elements")
        self.data = arr
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple["Tensor", ...], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.op = op
            out.parents = parents
            out.requires_grad = True
            out._backward = backward
        else:
            out.op = op
            out.parents = ()
            out.requires_grad = False
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.op = "leaf"
        t.parents = ()
        t.requires_grad = False
        t.grad = None
        t._backward = None
        return t

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # -- graph traversal -------------------------------------------------

    def topological_order(self) -> list["Tensor"]:
        """All reachable graph nodes, parents before children."""
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        """Reverse-mode gradient of this scalar w.r.t. all graph leaves.

        Gradients accumulate into `.grad` on every tensor that requires
        them; call `zero_grad` on parameters between steps.
        """
        if self.data.shape != ():
            raise ValueError(f"backward: loss must be scalar, got shape {self.data.shape}")
        order = self.topological_order()
        grads: dict[int, np.ndarray] = {id(self): np.ones((), dtype=self.data.dtype)}
        owned: set[int] = {id(self)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into .grad (closure outputs may alias, so add out of place)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                cur = grads.get(pid)
                if cur is None:
                    grads[pid] = pg
                    owned.discard(pid)
                elif pid in owned:
                    cur += pg
                else:
                    grads[pid] = cur + pg
                    owned.add(pid)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype), dtype=like.data.dtype)


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ValueError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


# -- elementwise --------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shape mismatch {a.shape} + {b.shape}")
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _sum_to_shape(g, a_shape), _sum_to_shape(g, b_shape)

    return Tensor._from_op(data, "add", (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ValueError(f"sub: shape mismatch {a.shape} - {b.shape}")
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _sum_to_shape(g, a_shape), _sum_to_shape(-g, b_shape)

    return Tensor._from_op(data, "sub", (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shape mismatch {a.shape} * {b.shape}")
    a_shape, b_shape = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return _sum_to_shape(g * bd, a_shape), _sum_to_shape(g * ad, b_shape)

    return Tensor._from_op(data, "mul", (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    data = a.data * s

    def backward(g):
        return (g * s,)

    return Tensor._from_op(data, "scale", (a,), backward)


# -- contraction ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-D, or stacked with identical leading batch dims."""
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    batch = int(np.prod(a.shape[:-2], dtype=np.int64)) if a.data.ndim > 2 else 1
    _record_flops(2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = np.matmul(g, bd.swapaxes(-1, -2)) if need_a else None
        gb = np.matmul(ad.swapaxes(-1, -2), g) if need_b else None
        return ga, gb

    return Tensor._from_op(data, "matmul", (a, b), backward)


# -- shape ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape) if isinstance(shape, (tuple, list)) else (shape,)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    old_shape = a.shape

    def backward(g):
        return (g.reshape(old_shape),)

    return Tensor._from_op(data, "reshape", (a,), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is not None and len(axes) == 0:
        axes = None
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(data, "transpose", (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, "concat", tuple(tensors), backward)


def slice_(a: Tensor, key) -> Tensor:
    """Basic slicing (slices and ellipsis only, so shape is preserved rank-wise)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) and k is not Ellipsis:
            raise ValueError(f"slice: only slice objects supported, got {k!r}")
    data = a.data[key]
    in_shape = a.shape
    dtype = a.data.dtype

    def backward(g):
        full = np.zeros(in_shape, dtype=dtype)
        full[key] = g
        return (full,)

    return Tensor._from_op(np.ascontiguousarray(data), "slice", (a,), backward)


# -- reductions ------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape),)

    return Tensor._from_op(data, "sum", (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    n = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, in_shape),)

    return Tensor._from_op(data, "mean", (a,), backward)


# -- neural-net primitives -------------------------------------------------


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: requires strictly positive input")
    data = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return Tensor._from_op(data.astype(a.data.dtype), "log", (a,), backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return Tensor._from_op(data.astype(x.dtype), "gelu", (a,), backward)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis; `mask` is boolean, False entries get exactly 0.

    Every row must keep at least one allowed entry.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    x = a.data
    neg = np.finfo(x.dtype).min
    shifted = x - np.max(np.where(mask, x, neg), axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, shifted, 0.0)), 0.0).astype(x.dtype)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, "masked_softmax", (a,), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},), got {gamma.shape} and {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=red)
        dbeta = g.sum(axis=red)
        return dx.astype(x.dtype), dgamma, dbeta

    return Tensor._from_op(data.astype(x.dtype), "layer_norm", (a, gamma, beta), backward)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` at integer `ids`."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"embedding: id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]
    tshape = table.shape
    dtype = table.data.dtype

    def backward(g):
        gt = np.zeros(tshape, dtype=dtype)
        np.add.at(gt, ids, g)
        return (gt,)

    return Tensor._from_op(data, "embedding", (table,), backward)


# -- construction helpers ---------------------------------------------------


def zeros(shape, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Truncated-normal initialization at +/- 2 std, the usual transformer default."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(bad.sum())
    return Tensor((x * std).astype(dtype), requires_grad=True, dtype=dtype)
