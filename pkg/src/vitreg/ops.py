"""Neural-network layer primitives: 3D convolution, pooling, trilinear
upsampling, affine maps, layer norm, softmax, dropout.

Each primitive is a taped operation with a hand-derived VJP. The voxel
loops (convolution, pooling, warping) are delegated to
:mod:`vitreg.kernels`; everything else is plain NumPy.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor, record


@dataclass
class ConvKernel:
    """Cubic 3D cross-correlation kernel with per-axis stride/padding."""

    weights: Tensor  # (out_c, in_c, k, k, k)
    bias: Tensor  # (out_c,)
    stride: tuple = (1, 1, 1)
    padding: tuple = (0, 0, 0)

    def __post_init__(self):
        w = self.weights
        if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
            raise ValueError(f"conv weights must be (out,in,k,k,k), got {w.shape}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match out channels {w.shape[0]}"
            )
        self.stride = tuple(int(s) for s in self.stride)
        self.padding = tuple(int(p) for p in self.padding)
        if len(self.stride) != 3 or min(self.stride) < 1:
            raise ValueError(f"stride must be three positive ints, got {self.stride}")
        if len(self.padding) != 3 or min(self.padding) < 0:
            raise ValueError(f"padding must be three non-negative ints, got {self.padding}")

    @property
    def ksize(self):
        return self.weights.shape[2]


def conv3d(x, kernel):
    """Cross-correlate a (B,C,D,H,W) tensor with a ConvKernel plus bias."""
    w, b = kernel.weights, kernel.bias
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be 5-axis (B,C,D,H,W), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}"
        )
    k = kernel.ksize
    for ext, s, p in zip(x.shape[2:], kernel.stride, kernel.padding):
        span = ext + 2 * p - k
        if span < 0 or span % s != 0:
            raise ValueError(
                f"conv3d output extent not integral: extent {ext}, k {k}, "
                f"stride {s}, pad {p}"
            )
    xd, wd = x.data, w.data
    bd = b.data if b is not None else None
    y = kernels.conv3d_forward(xd, wd, bd, kernel.stride, kernel.padding)
    out = Tensor(y)
    need_dx = x.requires_grad
    need_dw = w.requires_grad

    def vjp(g):
        dx, dw, db = kernels.conv3d_backward(
            xd, wd, g, kernel.stride, kernel.padding, need_dx, need_dw
        )
        if b is None:
            return (dx, dw)
        return (dx, dw, db)

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv3d", out, inputs, vjp)


def maxpool3d(x, window=2, stride=2):
    """Max over non-overlapping cubes; returns (pooled, argmax indices).

    The indices are flat positions into the spatial block of the input,
    one per output voxel; backward scatters the gradient there.
    Only window == stride is supported.
    """
    if window != stride:
        raise ValueError("maxpool3d supports window == stride only")
    if x.ndim != 5:
        raise ValueError(f"maxpool3d input must be 5-axis, got {x.shape}")
    for ext in x.shape[2:]:
        if ext % stride != 0:
            raise ValueError(
                f"maxpool3d extents must divide by stride {stride}, got {x.shape[2:]}"
            )
    y, idx = kernels.maxpool_forward(x.data, window)
    out = Tensor(y)
    xshape = x.shape
    pooled = record(
        "maxpool3d",
        out,
        (x,),
        lambda g: (kernels.maxpool_backward(g, idx, xshape),),
    )
    return pooled, idx


def _interp_matrix(n_in, factor, dtype):
    """Per-axis trilinear upsampling matrix, align-corners=false."""
    n_out = n_in * factor
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1.0 - w1)
    np.add.at(mat, (rows, i1), w1)
    return mat.astype(dtype)


def _apply_axis(arr, mat, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def upsample_trilinear(x, factor=2):
    """Upsample each spatial axis by an integer factor >= 2 (trilinear,
    align-corners=false). Separable: one interpolation matrix per axis."""
    factor = int(factor)
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    if x.ndim != 5:
        raise ValueError(f"upsample input must be 5-axis, got {x.shape}")
    mats = [_interp_matrix(ext, factor, x.dtype) for ext in x.shape[2:]]
    y = x.data
    for ax, mat in enumerate(mats):
        y = _apply_axis(y, mat, ax + 2)
    out = Tensor(y)

    def vjp(g):
        for ax in (4, 3, 2):
            g = _apply_axis(g, mats[ax - 2].T, ax)
        return (np.ascontiguousarray(g),)

    return record("upsample", out, (x,), vjp)


def linear(x, w, b=None):
    """Affine map over the last axis: (..., In) -> (..., Out)."""
    if w.ndim != 2:
        raise ValueError(f"linear weight must be 2-axis, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(
            f"linear extent mismatch: input last axis {x.shape[-1]}, weight rows {w.shape[0]}"
        )
    if b is not None and b.shape != (w.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} vs out extent {w.shape[1]}")
    n_in, n_out = w.shape
    x2 = x.data.reshape(-1, n_in)
    y2 = x2 @ w.data
    if b is not None:
        y2 += b.data
    out_shape = x.shape[:-1] + (n_out,)
    out = Tensor(y2.reshape(out_shape))
    wd = w.data

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        dx = (g2 @ wd.T).reshape(x.shape)
        dw = x2.T @ g2
        if b is None:
            return (dx, dw)
        return (dx, dw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record("linear", out, inputs, vjp)


@dataclass
class LayerNormParams:
    """Scale/shift for last-axis normalization."""

    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gamma.ndim != 1 or self.gamma.shape != self.beta.shape:
            raise ValueError(
                f"gamma/beta must be matching vectors, got {self.gamma.shape} "
                f"vs {self.beta.shape}"
            )


def layer_norm(x, p):
    """Normalize the last axis to zero mean / unit population variance,
    then scale by gamma and shift by beta."""
    d = p.gamma.shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"layer_norm extent mismatch: {x.shape[-1]} vs {d}")
    xd = x.data
    mean = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(p.epsilon, dtype=xd.dtype))
    xhat = (xd - mean) * inv
    gd, bd = p.gamma.data, p.beta.data
    out = Tensor(xhat * gd + bd)

    def vjp(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return (dx, dgamma, dbeta)

    return record("layer_norm", out, (x, p.gamma, p.beta), vjp)


def softmax(x):
    """Row softmax over the last axis, max-subtracted for stability."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    s = ex / ex.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return record("softmax", out, (x,), vjp)


def dropout(x, rate, training, rng):
    """Inverted dropout: zero with probability ``rate`` during training and
    scale survivors by 1/(1-rate); identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    m = keep * np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    out = Tensor(x.data * m)
    return record("dropout", out, (x,), lambda g: (g * m,))
