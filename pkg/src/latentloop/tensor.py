"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a float64 numpy array plus an optional backward closure and
parent references; calling an op while gradients are enabled records a node
in the implicit computation graph.  `GradTape` linearizes that graph from a
root (topological order, each node visited once) and drives the backward
pass.  There is no global tape, so independent models on separate threads
never share state; the grad-enabled flag itself is thread-local.

All math is float64.  Ops validate shapes eagerly and raise `ShapeError`
naming both shapes on mismatch.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _np_erf

from .errors import NumericError, ShapeError

_TLS = threading.local()

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327
_TWO_OVER_SQRTPI = 1.1283791670955126


def grad_enabled() -> bool:
    return getattr(_TLS, "grad_enabled", True)


class no_grad:
    """Context manager: ops run value-only, nothing is recorded."""

    def __enter__(self):
        self._prev = grad_enabled()
        _TLS.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _TLS.grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, op="detach")

    def backward(self, seed: Optional[np.ndarray] = None):
        GradTape(self).backward(seed)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradTape:
    """Topological linearization of the graph reachable from `root`.

    Nodes appear after all of their parents; the backward pass walks the
    list once in reverse, so every recorded op contributes exactly one
    gradient push to each parent.
    """

    def __init__(self, root: Tensor):
        self.root = root
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.nodes = order  # parents strictly precede children

    def backward(self, seed: Optional[np.ndarray] = None):
        root = self.root
        if seed is None:
            if root.data.size != 1:
                raise ShapeError(f"backward() needs a scalar root or explicit seed, got shape {root.data.shape}")
            seed = np.ones_like(root.data)
        root.accumulate_grad(np.asarray(seed, dtype=np.float64).reshape(root.data.shape))
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def check_finite(self):
        for node in self.nodes:
            if not np.all(np.isfinite(node.data)):
                raise NumericError(f"non-finite values in op {node.op!r}", node=node)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return _make(-a.data, (a,), backward, "neg")


def pow_scalar(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.data ** (p - 1.0))

    return _make(out, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out)

    return _make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _make(np.log(a.data), (a,), backward, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to avoid overflowing exp for large |x|
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (a,), backward, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))

    return _make(out, (a,), backward, "tanh")


def erf(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * _TWO_OVER_SQRTPI * np.exp(-a.data * a.data))

    out = _np_erf(a.data)
    return _make(out, (a,), backward, "erf")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-form GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))).

    Smooth everywhere, and the backward is the exact derivative of this same
    expression, so finite-difference checks agree to roundoff."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner))

    return _make(out, (a,), backward, "gelu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


# -- reductions ----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        gg = g if (axis is None or keepdims) else np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out, (a,), backward, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; ties share the incoming gradient equally (matches the
    symmetric two-sided finite-difference limit at a tie)."""
    a = as_tensor(a)
    out = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        full = out if (keepdims or axis is None) else np.expand_dims(out, axis)
        mask = (a.data == full).astype(np.float64)
        counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
        gg = g if (keepdims or axis is None) else np.expand_dims(g, axis)
        a.accumulate_grad(mask / counts * gg)

    return _make(out, (a,), backward, "max")


# -- shape manipulation ----------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.transpose(axes)

    def backward(g):
        if a.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            a.accumulate_grad(g.transpose(inv))

    return _make(out, (a,), backward, "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = a.data.swapaxes(ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.swapaxes(ax1, ax2))

    return _make(out, (a,), backward, "swapaxes")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.data.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(out, ts, backward, "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:]) for t in ts]
    return concat(expanded, axis=axis)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[key] = g
            a.accumulate_grad(full)

    return _make(out, (a,), backward, "slice")


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table.accumulate_grad(gt)

    return _make(out, (table,), backward, "take_rows")


def take_flat(a, idx: np.ndarray, batch_ndim: int = 0) -> Tensor:
    """Gather from the flattened non-batch dims: out[b, m] = a[b].flat[idx[m]].

    The index array is plain numpy (no gradient through indices); the
    backward pass scatter-adds, so repeated indices sum their gradients.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    batch_shape = a.data.shape[:batch_ndim]
    flat = a.data.reshape(batch_shape + (-1,))
    out = flat[..., idx]

    def backward(g):
        if not a.requires_grad:
            return
        gflat = np.zeros_like(flat)
        g2 = g.reshape(batch_shape + (idx.size,))
        if batch_ndim == 0:
            np.add.at(gflat, idx.ravel(), g2)
        else:
            gf2 = gflat.reshape(-1, gflat.shape[-1])
            gg2 = g2.reshape(-1, idx.size)
            flat_idx = idx.ravel()
            for b in range(gf2.shape[0]):
                np.add.at(gf2[b], flat_idx, gg2[b])
        a.accumulate_grad(gflat.reshape(a.data.shape))

    return _make(out, (a,), backward, "take_flat")


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two dims by `pad` on every side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = np.pad(a.data, width)

    def backward(g):
        if a.requires_grad:
            sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
            a.accumulate_grad(g[sl])

    return _make(out, (a,), backward, "pad2d")


# -- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), backward, "matmul")


def linear(x, w, b=None) -> Tensor:
    x = as_tensor(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out[0] if squeeze else out


# -- composites -------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted), fused forward/backward."""
    x = as_tensor(x)
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _make(p, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {x.data.shape}")
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    centered = sub(x, shift)
    return sub(centered, log(tsum(exp(centered), axis=axis, keepdims=True)))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean / unit variance, then affine.
    Fused forward/backward (the composite chain was the training hot spot)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match last dimension {d} of {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    y = centered * inv_sigma
    out = y * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * y).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            x.accumulate_grad(
                inv_sigma * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
            )

    return _make(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def window_sum_2d(grid, w: int) -> Tensor:
    """Sum every w-by-w window of a 2-D grid (stride 1, no padding).

    Accumulation runs offset-by-offset in row-major order, the same order a
    double-loop summation uses, so results match that oracle bit for bit.
    """
    grid = as_tensor(grid)
    if grid.data.ndim != 2:
        raise ShapeError(f"window_sum_2d expects a 2-D grid, got shape {grid.data.shape}")
    h, wd = grid.data.shape
    if not (1 <= w <= min(h, wd)):
        raise ValueError(f"window size {w} out of range for grid {h}x{wd}")
    oh, ow = h - w + 1, wd - w + 1
    out = np.zeros((oh, ow))
    for di in range(w):
        for dj in range(w):
            out += grid.data[di : di + oh, dj : dj + ow]

    def backward(g):
        if grid.requires_grad:
            gg = np.zeros_like(grid.data)
            for di in range(w):
                for dj in range(w):
                    gg[di : di + oh, dj : dj + ow] += g
            grid.accumulate_grad(gg)

    return _make(out, (grid,), backward, "window_sum_2d")


def global_norm(tensors: Iterable[Tensor]) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))
