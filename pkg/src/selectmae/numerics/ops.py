"""Differentiable kernels over Tensor, recorded on the active tape.

Every kernel checks its shape contract eagerly, computes the forward
result with numpy, and registers a closure mapping the output gradient
to per-input gradients. Gather uses scatter-add on the way back so
duplicate indices accumulate.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor, record_op

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    record_op((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    record_op((a, b), out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    record_op((a, b), out, bw)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)
    record_op((a,), out, lambda g: (g * s,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims must match, or `b` may be a plain 2-D
    weight applied to every leading slice of `a`."""
    weight_case = b.ndim == 2 and a.ndim > 2
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.shape[-1] != b.shape[-2]
        or (not weight_case and a.shape[:-2] != b.shape[:-2])
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    if weight_case:
        def bw(g):
            flat_a = a.data.reshape(-1, a.shape[-1])
            flat_g = g.reshape(-1, g.shape[-1])
            return g @ b.data.T, flat_a.T @ flat_g
    else:
        def bw(g):
            return g @ _swap(b.data), _swap(a.data) @ g

    record_op((a, b), out, bw)
    return out


def _assert_finite(x: Tensor, op: str):
    # min/max both land non-finite when any entry is nan or +/-inf; two
    # scalar reductions beat materializing an isfinite mask
    if not (np.isfinite(x.data.min()) and np.isfinite(x.data.max())):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _assert_finite(x, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted, out=shifted)
    y = np.divide(e, e.sum(axis=axis, keepdims=True), out=e)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    record_op((x,), out, bw)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _assert_finite(x, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    record_op((x,), out, bw)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    k = x.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {k}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    record_op((x, gain, bias), out, bw)
    return out


def gelu(x: Tensor) -> Tensor:
    # tanh approximation; smooth, so finite-difference checks apply everywhere
    sq = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + _GELU_A * (x.data * sq)))
    out = Tensor(0.5 * x.data * (1.0 + t))

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * ((1.0 - t * t) * du)),)

    record_op((x,), out, bw)
    return out


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    record_op((x,), out, lambda g: (g / x.data,))
    return out


def absolute(x: Tensor) -> Tensor:
    out = Tensor(np.abs(x.data))
    record_op((x,), out, lambda g: (g * np.sign(x.data),))
    return out


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    record_op((x,), out, bw)
    return out


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy() / count,)

    record_op((x,), out, bw)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    record_op((x,), out, lambda g: (g.reshape(x.shape),))
    return out


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes))
    record_op((x,), out, lambda g: (g.transpose(inverse),))
    return out


def gather_rows(x: Tensor, ids) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds duplicate ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"gather_rows: need 2-D input and 1-D ids, got {x.shape} / {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: id out of range for {x.shape[0]} rows")
    out = Tensor(x.data[ids])

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, ids, g)
        return (dx,)

    record_op((x,), out, bw)
    return out


def concat_rows(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    record_op(tuple(parts), out, bw)
    return out


def gather_rows_batched(x: Tensor, ids) -> Tensor:
    """Per-slice row selection: out[b, m] = x[b, ids[b, m]].

    The batched counterpart of `gather_rows`; duplicate ids within a
    slice accumulate on the way back.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if x.ndim != 3 or ids.ndim != 2 or ids.shape[0] != x.shape[0]:
        raise ShapeError(
            f"gather_rows_batched: need (B, N, D) input with (B, M) ids, got {x.shape} / {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[1]):
        raise IndexError(f"gather_rows_batched: id out of range for {x.shape[1]} rows")
    rows = np.arange(x.shape[0])[:, None]
    out = Tensor(x.data[rows, ids])

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, ids), g)
        return (dx,)

    record_op((x,), out, bw)
    return out


def stop_gradient(x: Tensor) -> Tensor:
    """Detach: the result carries the same values but no gradient path."""
    return Tensor(x.data)


def constant(data) -> Tensor:
    return Tensor(data)


# Operator sugar on Tensor; scalars promote through scale().
def _as_op(other):
    return other if isinstance(other, Tensor) else None


def _tensor_add(self, other):
    o = _as_op(other)
    return add(self, o) if o is not None else add(self, Tensor(np.asarray(other, dtype=self.data.dtype)))


def _tensor_sub(self, other):
    o = _as_op(other)
    return sub(self, o) if o is not None else sub(self, Tensor(np.asarray(other, dtype=self.data.dtype)))


def _tensor_mul(self, other):
    if isinstance(other, Tensor):
        return mul(self, other)
    return scale(self, float(other))


Tensor.__add__ = _tensor_add
Tensor.__sub__ = _tensor_sub
Tensor.__mul__ = _tensor_mul
Tensor.__rmul__ = _tensor_mul
Tensor.__matmul__ = matmul
Tensor.__neg__ = lambda self: scale(self, -1.0)
