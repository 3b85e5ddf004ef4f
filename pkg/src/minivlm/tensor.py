"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable primitive computes its forward value with numpy and, when
any input requires a gradient, leaves a :class:`Record` behind that knows how to
map the output gradient back onto its inputs.  ``backward`` collects the records
reachable from a scalar loss into a :class:`Tape`, replays it in reverse
execution order and then discards it.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Record",
    "ShapeError",
    "EmptyMaskError",
    "no_grad",
    "is_grad_enabled",
    "get_default_dtype",
    "set_default_dtype",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "index",
    "exp",
    "log",
    "tanh",
    "softmax",
    "log_softmax",
    "softplus",
    "mish",
    "silu",
    "gelu",
    "rms_norm",
    "layer_norm",
    "embedding_lookup",
    "causal_mask_fill",
    "rope",
    "depthwise_conv2d",
    "pointwise_conv2d",
    "average_pool2d",
    "cross_entropy_masked",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class EmptyMaskError(ValueError):
    """A loss mask selects no positions, so the masked mean is undefined."""


_local = threading.local()
_seq = itertools.count()
_default_dtype = np.float64


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _default_dtype = dtype.type


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


class no_grad:
    """Context manager that suspends recording for the current thread."""

    def __enter__(self):
        self._prev = is_grad_enabled()
        _local.enabled = False
        return self

    def __exit__(self, *exc):
        _local.enabled = self._prev
        return False


class Record:
    """One executed primitive: its inputs and the rule mapping grads back."""

    __slots__ = ("seq", "op", "parents", "backward_fn", "output", "__weakref__")

    def __init__(self, op: str, parents: Sequence["Tensor"], backward_fn: Callable, output: "Tensor"):
        self.seq = next(_seq)
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        # weak so that output -> record -> output does not form a cycle
        self.output = weakref.ref(output)

    def __repr__(self):
        return f"Record({self.op}, seq={self.seq})"


class Tape:
    """Records reachable from a root tensor, in execution order."""

    def __init__(self, records: Iterable[Record]):
        self.records = sorted(records, key=lambda r: r.seq)

    @classmethod
    def collect(cls, root: "Tensor") -> "Tape":
        seen = {}
        stack = [root._record] if root._record is not None else []
        while stack:
            rec = stack.pop()
            if rec.seq in seen:
                continue
            seen[rec.seq] = rec
            for p in rec.parents:
                if p._record is not None and p._record.seq not in seen:
                    stack.append(p._record)
        return cls(seen.values())

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            dtype = data.dtype
        else:
            dtype = _default_dtype
    return np.asarray(data, dtype=dtype)


class Tensor:
    """A dense real array with an optional gradient and tape linkage."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._record: Optional[Record] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._record = Record(op, parents, backward_fn, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor reachable from a scalar ``loss``.

    Leaf gradients accumulate additively across uses and across calls; the
    tape is discarded afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing was recorded")
    if loss._record is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    tape = Tape.collect(loss)
    pending = {loss._record.seq: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = pending.pop(rec.seq, None)
        if g is None:
            continue
        out = rec.output()
        if out is not None:
            out.grad = g
        grads = rec.backward_fn(g)
        for p, pg in zip(rec.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p._record is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                key = p._record.seq
                pending[key] = pending[key] + pg if key in pending else pg
    for rec in tape.records:
        out = rec.output()
        if out is not None:
            out._record = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(
        a.data + b.data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _result(
        a.data - b.data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data / b.data, "div", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant scalar."""
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


_ROW_BLOCK = 16


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # BLAS picks its kernel from the problem size, so a row's result could
    # depend on how many other rows are present.  Feeding it fixed-height
    # row blocks makes every output row independent of the sequence length.
    m = a.shape[-2]
    pad = (-m) % _ROW_BLOCK
    if pad:
        a = np.concatenate([a, np.zeros(a.shape[:-2] + (pad, a.shape[-1]), a.dtype)], axis=-2)
    blocks = a.reshape(a.shape[:-2] + (-1, _ROW_BLOCK, a.shape[-1]))
    out = np.matmul(blocks, np.expand_dims(b, -3))
    return out.reshape(out.shape[:-3] + (-1, out.shape[-1]))[..., :m, :]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting.

    Backward: dA = dC @ B^T, dB = A^T @ dC (summed over broadcast batch axes).
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = _matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    """Permute axes (reverses them when ``axes`` is None)."""
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            out.append(g[tuple(sl)])
        return tuple(out)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def index(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), "index", (a,), bw)


# ---------------------------------------------------------------------------
# activations and normalisation


def _ordered_sum(e: np.ndarray, axis: int) -> np.ndarray:
    # strict left-to-right accumulation: trailing zeros (masked keys) cannot
    # change the result, which keeps causal attention prefix-consistent
    return np.take(np.cumsum(e, axis=axis), [-1], axis=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / _ordered_sum(e, axis)
    return _result(y, "softmax", (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def _log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax(x.data, axis)
    p = np.exp(y)
    return _result(y, "log_softmax", (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large x
    return np.logaddexp(0.0, x)


def softplus(x: Tensor) -> Tensor:
    return _result(_softplus(x.data), "softplus", (x,), lambda g: (g * _sigmoid(x.data),))


def mish(x: Tensor) -> Tensor:
    """x * tanh(softplus(x))."""
    t = np.tanh(_softplus(x.data))
    y = x.data * t

    def bw(g):
        return (g * (t + x.data * (1.0 - t * t) * _sigmoid(x.data)),)

    return _result(y, "mish", (x,), bw)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(x.data * s, "silu", (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(y, "gelu", (x,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight over the last axis."""
    if weight.ndim != 1 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm: weight shape {weight.shape} does not match input {x.shape}")
    r = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xr = x.data * r

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gh = g * weight.data
            gx = r * gh - xr * r * np.mean(gh * x.data, axis=-1, keepdims=True) * r
        if weight.requires_grad:
            gw = (g * xr).reshape(-1, weight.shape[0]).sum(axis=0)
        return gx, gw

    return _result(xr * weight.data, "rms_norm", (x, weight), bw)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine shapes {weight.shape}/{bias.shape} do not match input {x.shape}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    r = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    xh = xc * r
    d = x.shape[-1]

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gh = g * weight.data
            gx = r * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
        if weight.requires_grad:
            gw = (g * xh).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gw, gb

    return _result(xh * weight.data + bias.data, "layer_norm", (x, weight, bias), bw)


# ---------------------------------------------------------------------------
# sequence-model primitives


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]}): {ids.min()}..{ids.max()}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    out = table.data[ids] if ids.size else np.zeros(ids.shape + (table.shape[1],), dtype=table.dtype)
    return _result(out, "embedding", (table,), bw)


def causal_mask_fill(scores: Tensor, fill: float = -np.inf) -> Tensor:
    """Replace entries above the causal diagonal of [..., Lq, Lk] scores.

    Query i may attend keys j <= i + (Lk - Lq).
    """
    lq, lk = scores.shape[-2:]
    blocked = np.triu(np.ones((lq, lk), dtype=bool), k=lk - lq + 1)
    out = np.where(blocked, fill, scores.data)
    return _result(out, "causal_mask_fill", (scores,), lambda g: (np.where(blocked, 0.0, g),))


def _rope_tables(length: int, dim: int, base: float, offset: int, dtype):
    half = dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.outer(np.arange(offset, offset + length, dtype=np.float64), inv)
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1).astype(dtype)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1).astype(dtype)
    return cos, sin


def rope(x: Tensor, base: float = 10000.0, offset: int = 0) -> Tensor:
    """Rotary position embedding over [..., L, head_dim] (rotate-half layout)."""
    dim = x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope: head dim must be even, got {dim}")
    cos, sin = _rope_tables(x.shape[-2], dim, base, offset, x.dtype)
    h = dim // 2

    def rot(v):
        return np.concatenate([-v[..., h:], v[..., :h]], axis=-1)

    def rot_t(v):
        return np.concatenate([v[..., h:], -v[..., :h]], axis=-1)

    return _result(x.data * cos + rot(x.data) * sin, "rope", (x,), lambda g: (g * cos + rot_t(g * sin),))


# ---------------------------------------------------------------------------
# channels-last 2-d convolution family, x: [B, H, W, C]


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 1) -> Tensor:
    """Per-channel k x k convolution; ``weight`` is [k, k, C]."""
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[2] != x.shape[3] or weight.shape[0] != weight.shape[1]:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[0]
    b_, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"depthwise_conv2d: kernel {k} too large for input {x.shape}")

    def window(arr, i, j):
        return arr[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]

    out = np.zeros((b_, oh, ow, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += window(xp, i, j) * weight.data[i, j]
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    window(gxp, i, j)[...] += g * weight.data[i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w, :]
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for i in range(k):
                for j in range(k):
                    gw[i, j] = (window(xp, i, j) * g).sum(axis=(0, 1, 2))
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 1, 2)) if bias.requires_grad else None,)
        return grads

    return _result(out, "depthwise_conv2d", parents, bw)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution mixing channels; ``weight`` is [C_in, C_out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def average_pool2d(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    """Non-overlapping mean pooling with a pool_h x pool_w window."""
    b_, h, w, c = x.shape
    if h % pool_h or w % pool_w:
        raise ShapeError(f"average_pool2d: window {pool_h}x{pool_w} does not tile {h}x{w}")
    y = reshape(x, (b_, h // pool_h, pool_h, w // pool_w, pool_w, c))
    return mean(y, axis=(2, 4))


# ---------------------------------------------------------------------------
# loss


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over masked positions.

    ``logits`` is [L, V] or [B, L, V].  For a batch the reduction is the mean
    over samples of each sample's masked mean.  Only masked rows are read, so
    logits elsewhere affect neither the value nor the gradient.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim not in (2, 3) or targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy_masked: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    vocab = logits.shape[-1]
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    if logits.ndim == 2:
        counts = np.array([mask.sum()])
        row_weight = np.full(int(mask.sum()), 1.0 / max(int(mask.sum()), 1))
    else:
        counts = mask.sum(axis=1)
        per_row = np.repeat(1.0 / (np.maximum(counts, 1) * mask.shape[0]), counts)
        row_weight = per_row
    if np.any(counts == 0):
        raise EmptyMaskError("loss mask selects no positions")

    rows = logits.data[mask]
    logp = _log_softmax(rows, axis=-1)
    picked = logp[np.arange(sel.size), sel]
    value = -np.sum(row_weight * picked)

    def bw(g):
        d = np.exp(logp)
        d[np.arange(sel.size), sel] -= 1.0
        d *= (row_weight * g)[:, None]
        full = np.zeros_like(logits.data)
        full[mask] = d
        return (full,)

    return _result(np.asarray(value, dtype=logits.dtype), "cross_entropy_masked", (logits,), bw)
