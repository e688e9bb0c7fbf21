"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive produces a new ``Tensor`` carrying a record of the inputs it
consumed and a closure mapping the output cotangent to input cotangents.
Node ids come from a global counter, so an output's id is always larger than
the ids of its inputs; ``backward`` replays records in descending id order.

Broadcasting is restricted to leading axes: for binary elementwise ops the
smaller operand's shape must be a suffix of the larger one's.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count(1)
_grad_enabled = True


class ShapeError(ValueError):
    """Input shapes violate a primitive's shape rule."""


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, id={self.id})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_ids)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> tuple:
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if big[len(big) - len(small):] != small:
        raise ShapeError(f"{op}: shapes {a} and {b} are not leading-axis broadcastable")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """``[..., n, k] @ [k, m]`` or batched ``[..., n, k] @ [..., k, m]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} have mismatched inner dims")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    if bd.ndim == 2:
        # weight-style rhs: fold leading axes into rows so the grad is one GEMM
        def fn(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def fn(g):
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ g
            return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, "matmul", (a, b), fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), "log", (a,), lambda g: (g / ad,))


def maximum(a: Tensor, c: float = 0.0) -> Tensor:
    """Elementwise ``max(a, c)``; the subgradient at ``a == c`` is 0."""
    mask = a.data > c
    return _make(np.where(mask, a.data, c), "max", (a,), lambda g: (g * mask,))


def relu(a: Tensor) -> Tensor:
    return maximum(a, 0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, "gelu", (a,), fn)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (a,), fn)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, "log_softmax", (a,), fn)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=DTYPE), "sum", (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, key) -> Tensor:
    """Basic or fancy indexing; the backward pass scatter-adds into a zero buffer."""
    shape = a.shape

    def fn(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, key, g)
        return (out,)

    return _make(np.asarray(a.data[key], dtype=DTYPE), "index", (a,), fn)


def gather(a: Tensor, idx) -> Tensor:
    """Rows of ``a`` selected along axis 0 (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    return index(a, idx)


def take_last(a: Tensor, idx) -> Tensor:
    """``out[..., ] = a[..., idx[...]]``: picks one entry per row of the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: index shape {idx.shape} vs tensor shape {a.shape}")
    lead = np.indices(idx.shape)
    return index(a, (*lead, idx))


def scatter_add(src: Tensor, idx, size: int) -> Tensor:
    """``out[idx[i]] += src[i]`` into a zero tensor with ``size`` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_add: index shape {idx.shape} vs source shape {src.shape}")
    out = np.zeros((size, *src.shape[1:]), dtype=DTYPE)
    np.add.at(out, idx, src.data)
    return _make(out, "scatter_add", (src,), lambda g: (g[idx],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    d = xd.shape[-1]

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, (d,))
        gbias = _unbroadcast(g, (d,))
        while ggain.ndim > 1:
            ggain, gbias = ggain.sum(axis=0), gbias.sum(axis=0)
        return dx, ggain, gbias

    return _make(xhat * gd + bias.data, "layer_norm", (x, gain, bias), fn)


def entropy(logits: Tensor) -> Tensor:
    """Shannon entropy in nats of ``softmax(logits)`` along the last axis."""
    return neg(sum(mul(softmax(logits), log_softmax(logits)), axis=-1))


_PRIMITIVES: dict[str, Callable] = {
    "add": add, "mul": mul, "neg": neg, "matmul": matmul, "exp": exp, "log": log,
    "max": maximum, "relu": relu, "gelu": gelu, "softmax": softmax,
    "log_softmax": log_softmax, "sum": sum, "mean": mean, "reshape": reshape,
    "transpose": transpose, "gather": gather, "take_last": take_last,
    "scatter_add": scatter_add, "layer_norm": layer_norm, "concat": concat,
    "scale": scale,
}


def forward_primitive(kind: str, inputs: Sequence, *args, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_primitive("matmul", [a, b])``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(inputs, *args, **kwargs)
    return fn(*inputs, *args, **kwargs)


# ---------------------------------------------------------------- backward


def _ancestors(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen[node.id] = node
        stack.extend(p for p in node.parents if p.requires_grad)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def backward(root: Tensor) -> None:
    """Accumulate ``d root / d node`` into ``node.grad`` for every ancestor."""
    if root.size != 1 or root.data.ndim > 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    cot: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in _ancestors(root):
        g = cot.pop(node.id, None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in cot:
                cot[parent.id] = cot[parent.id] + pg
            else:
                cot[parent.id] = pg


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
