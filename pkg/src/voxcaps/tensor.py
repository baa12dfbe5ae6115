"""Dense float32 tensors and differentiable 3D kernels with hand-derived backwards.

Every operation is a pure function on numpy arrays. Differentiable ops come in
forward/backward pairs; the backward is derived analytically and checked
against central finite differences by :mod:`voxcaps.gradcheck`. The production
data path stores float32, but all kernels preserve the input dtype so the
verification suite can drive them in float64.

Layout conventions (row-major throughout):
    feature volumes   [N, C, H, W, D]      channel axis before spatial axes
    conv weights      [Cout, Cin, k0, k1, k2]
    deconv weights    [Cin, Cout, k0, k1, k2]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an operand's shape violates an operation's contract."""


def as_f32(data) -> np.ndarray:
    """Coerce to a C-contiguous float32 array (the artifact storage dtype)."""
    return np.ascontiguousarray(data, dtype=DTYPE)


def assert_finite(a: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} contains non-finite values")
    return a


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError(f"expected 3 extents, got {len(t)}")
    return t


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (possibly dilated, strided) 3D cross-correlation.

    ``padding`` is the conv-side padding in both directions; for transposed
    convolution the same spec describes the forward conv being inverted.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]
    stride: tuple[int, int, int] = (1, 1, 1)
    dilation: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "dilation", _triple(self.dilation))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("channel counts must be >= 1")
        for name in ("kernel", "stride", "dilation"):
            for ax, v in enumerate(getattr(self, name)):
                if v < 1:
                    raise ShapeError(f"axis {ax}: {name} extent {v} must be >= 1")
        for ax, p in enumerate(self.padding):
            if p < 0:
                raise ShapeError(f"axis {ax}: negative padding {p}")

    def out_extents(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        """floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1, per axis."""
        out = []
        for ax in range(3):
            x = int(spatial[ax])
            span = self.dilation[ax] * (self.kernel[ax] - 1) + 1
            num = x + 2 * self.padding[ax] - span
            if num < 0:
                raise ShapeError(
                    f"axis {ax}: input extent {x} too small for kernel span {span} "
                    f"with padding {self.padding[ax]}"
                )
            out.append(num // self.stride[ax] + 1)
        return tuple(out)

    def deconv_out_extents(self, spatial: Sequence[int]) -> tuple[int, int, int]:
        """Extent formula inverted: (in - 1)*stride - 2*pad + dilation*(k-1) + 1."""
        out = []
        for ax in range(3):
            x = int(spatial[ax])
            v = (x - 1) * self.stride[ax] - 2 * self.padding[ax] \
                + self.dilation[ax] * (self.kernel[ax] - 1) + 1
            if v < 1:
                raise ShapeError(f"axis {ax}: transposed extent {v} < 1")
            out.append(v)
        return tuple(out)


def same_padding(kernel, dilation) -> tuple[int, int, int]:
    """Padding that preserves odd-kernel spatial extents at stride 1."""
    k, d = _triple(kernel), _triple(dilation)
    for ax in range(3):
        if k[ax] % 2 == 0:
            raise ShapeError(f"axis {ax}: even kernel {k[ax]} has no symmetric same-padding")
    return tuple(d[ax] * (k[ax] - 1) // 2 for ax in range(3))


@dataclass
class GradPair:
    """A parameter tensor together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray

    @classmethod
    def of(cls, value: np.ndarray) -> "GradPair":
        return cls(value, np.zeros_like(value))

    def zero_grad(self):
        self.grad[...] = 0.0

    def check(self):
        if self.value.shape != self.grad.shape:
            raise ShapeError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )


# ---------------------------------------------------------------------------
# im2col / col2im: the two primitives every conv-like kernel is built from.
# ---------------------------------------------------------------------------

def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    p0, p1, p2 = padding
    if p0 == p1 == p2 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p0, p0), (p1, p1), (p2, p2)))


def _im2col(xp: np.ndarray, kernel, stride, dilation, out_sp) -> np.ndarray:
    """Gather sliding receptive fields of a padded [N,C,...] volume.

    Returns [N, C*K, P] with P = prod(out_sp) in row-major spatial order and
    the middle axis flattened as (channel, k0, k1, k2). Built as one strided
    slice copy per kernel tap; each copy has contiguous inner runs, which is
    far cheaper than transposing an 8-d sliding-window view.
    """
    n, c = xp.shape[:2]
    k0, k1, k2 = kernel
    s0, s1, s2 = stride
    d0, d1, d2 = dilation
    o0, o1, o2 = out_sp
    cols = np.empty((n, c, k0, k1, k2, o0, o1, o2), dtype=xp.dtype)
    for i0 in range(k0):
        for i1 in range(k1):
            for i2 in range(k2):
                cols[:, :, i0, i1, i2] = xp[
                    :, :,
                    i0 * d0: i0 * d0 + o0 * s0: s0,
                    i1 * d1: i1 * d1 + o1 * s1: s1,
                    i2 * d2: i2 * d2 + o2 * s2: s2]
    return cols.reshape(n, c * k0 * k1 * k2, o0 * o1 * o2)


def _col2im(g_cols: np.ndarray, n, c, spatial, kernel, stride, dilation, padding,
            out_sp, dtype) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add column gradients back to a volume."""
    k0, k1, k2 = kernel
    s0, s1, s2 = stride
    d0, d1, d2 = dilation
    p0, p1, p2 = padding
    o0, o1, o2 = out_sp
    gp = np.zeros((n, c, spatial[0] + 2 * p0, spatial[1] + 2 * p1, spatial[2] + 2 * p2),
                  dtype=dtype)
    g = g_cols.reshape(n, c, k0, k1, k2, o0, o1, o2)
    for i0 in range(k0):
        for i1 in range(k1):
            for i2 in range(k2):
                gp[:, :,
                   i0 * d0: i0 * d0 + o0 * s0: s0,
                   i1 * d1: i1 * d1 + o1 * s1: s1,
                   i2 * d2: i2 * d2 + o2 * s2: s2] += g[:, :, i0, i1, i2]
    if (p0, p1, p2) == (0, 0, 0):
        return gp
    return gp[:, :, p0: gp.shape[2] - p0, p1: gp.shape[3] - p1, p2: gp.shape[4] - p2]


def _check_conv_operands(x, w, spec, weight_layout):
    if x.ndim != 5:
        raise ShapeError(f"expected rank-5 input [N,C,H,W,D], got rank {x.ndim}")
    cin_axis_val = x.shape[1]
    exp_in = spec.in_channels
    if cin_axis_val != exp_in:
        raise ShapeError(f"axis 1: input channels {cin_axis_val} != spec.in_channels {exp_in}")
    if weight_layout == "conv":
        expect = (spec.out_channels, spec.in_channels) + spec.kernel
    else:
        expect = (spec.in_channels, spec.out_channels) + spec.kernel
    if w.shape != expect:
        raise ShapeError(f"weights shape {w.shape} != expected {expect}")


# ---------------------------------------------------------------------------
# Dilated 3D convolution (cross-correlation).
# ---------------------------------------------------------------------------

def conv3d_im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Expose the column matrix so callers can reuse it in the backward pass."""
    out_sp = spec.out_extents(x.shape[2:])
    return _im2col(_pad_spatial(x, spec.padding), spec.kernel, spec.stride,
                   spec.dilation, out_sp)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, spec: ConvSpec,
                   cols: np.ndarray | None = None) -> np.ndarray:
    """Strided, dilated cross-correlation of x [N,Cin,H,W,D] with w [Cout,Cin,k,k,k]."""
    _check_conv_operands(x, w, spec, "conv")
    out_sp = spec.out_extents(x.shape[2:])
    if cols is None:
        cols = conv3d_im2col(x, spec)
    n = x.shape[0]
    co = spec.out_channels
    y = np.matmul(w.reshape(co, -1), cols)                   # [N, Cout, P]
    if b is not None:
        y += b[:, None]
    return y.reshape(n, co, *out_sp)


def conv3d_backward(g_out: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                    cols: np.ndarray | None = None):
    """Gradients of conv3d_forward: returns (grad_x, grad_w, grad_b)."""
    _check_conv_operands(x, w, spec, "conv")
    out_sp = spec.out_extents(x.shape[2:])
    n = x.shape[0]
    co = spec.out_channels
    if g_out.shape != (n, co) + out_sp:
        raise ShapeError(f"grad_out shape {g_out.shape} != forward output {(n, co) + out_sp}")
    if cols is None:
        cols = conv3d_im2col(x, spec)
    p = cols.shape[2]
    g2 = g_out.reshape(n, co, p)
    grad_b = g_out.sum(axis=(0, 2, 3, 4))
    grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    g_cols = np.matmul(w.reshape(co, -1).T, g2)              # [N, Cin*K, P]
    grad_x = _col2im(g_cols, n, spec.in_channels, x.shape[2:], spec.kernel,
                     spec.stride, spec.dilation, spec.padding, out_sp, x.dtype)
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Transposed (fractionally strided) 3D convolution: the adjoint of conv3d.
# ---------------------------------------------------------------------------

def deconv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                     spec: ConvSpec) -> np.ndarray:
    """Transposed convolution of x [N,Cin,...] with w [Cin,Cout,k,k,k].

    Output extents follow ``spec.deconv_out_extents``; the map is exactly the
    adjoint of ``conv3d_forward`` run with the same spec.
    """
    _check_conv_operands(x, w, spec, "deconv")
    n, ci = x.shape[:2]
    co = spec.out_channels
    in_sp = x.shape[2:]
    out_sp = spec.deconv_out_extents(in_sp)
    p = int(np.prod(in_sp))
    x2 = x.reshape(n, ci, p)
    g_cols = np.matmul(w.reshape(ci, -1).T, x2)              # [N, Cout*K, P]
    y = _col2im(g_cols, n, co, out_sp, spec.kernel, spec.stride, spec.dilation,
                spec.padding, in_sp, x.dtype)
    if b is not None:
        y += b.reshape(1, co, 1, 1, 1)
    return y


def deconv3d_backward(g_out: np.ndarray, x: np.ndarray, w: np.ndarray,
                      spec: ConvSpec):
    """Gradients of deconv3d_forward: returns (grad_x, grad_w, grad_b)."""
    _check_conv_operands(x, w, spec, "deconv")
    n, ci = x.shape[:2]
    co = spec.out_channels
    in_sp = x.shape[2:]
    out_sp = spec.deconv_out_extents(in_sp)
    if g_out.shape != (n, co) + out_sp:
        raise ShapeError(f"grad_out shape {g_out.shape} != forward output {(n, co) + out_sp}")
    p = int(np.prod(in_sp))
    cols_g = _im2col(_pad_spatial(g_out, spec.padding), spec.kernel, spec.stride,
                     spec.dilation, in_sp)                   # [N, Cout*K, P]
    grad_x = np.matmul(w.reshape(ci, -1), cols_g).reshape(x.shape)
    x2 = x.reshape(n, ci, p)
    grad_w = np.matmul(x2, cols_g.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = g_out.sum(axis=(0, 2, 3, 4))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Batch normalization over the channel axis of [N, C, ...] volumes.
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class RunningStats:
    """Exponential running mean/variance used by eval-mode batch norm."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def for_channels(cls, c: int, dtype=DTYPE) -> "RunningStats":
        return cls(np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype))


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      stats: RunningStats | None, mode: str,
                      eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> np.ndarray:
    """Normalize per channel; train mode uses batch statistics and updates
    ``stats`` in place, eval mode reads ``stats``."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c}")
    shp = _bn_shape(x)
    if mode == "train":
        axes = _bn_axes(x)
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if stats is not None:
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
            stats.var = (1.0 - momentum) * stats.var + momentum * var
    elif mode == "eval":
        if stats is None:
            raise ValueError("eval mode requires running stats")
        mu, var = stats.mean, stats.var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xhat = (x - mu.reshape(shp)) / np.sqrt(var.reshape(shp) + eps)
    return gamma.reshape(shp) * xhat + beta.reshape(shp)


def batchnorm_backward(g_out: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                       eps: float = BN_EPS):
    """Train-mode gradients; batch statistics are recomputed from x."""
    axes = _bn_axes(x)
    shp = _bn_shape(x)
    m = x.size // x.shape[1]
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xc = x - mu
    xhat = xc * invstd
    dgamma = (g_out * xhat).sum(axis=axes)
    dbeta = g_out.sum(axis=axes)
    dxhat = g_out * gamma.reshape(shp)
    # dx = invstd/m * (m*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
    grad_x = (invstd / m) * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return grad_x, dgamma, dbeta


# ---------------------------------------------------------------------------
# Elementwise / reshaping suite.
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(g_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g_out * (x > 0)


def _check_axis(x, axis) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    return axis % x.ndim


def softmax_forward(x: np.ndarray, axis: int) -> np.ndarray:
    axis = _check_axis(x, axis)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(g_out: np.ndarray, y: np.ndarray, axis: int) -> np.ndarray:
    """VJP given the forward output y = softmax(x, axis)."""
    axis = _check_axis(y, axis)
    return y * (g_out - (g_out * y).sum(axis=axis, keepdims=True))


def l2_norm_forward(x: np.ndarray, axis: int, eps: float = 1e-12) -> np.ndarray:
    axis = _check_axis(x, axis)
    return np.sqrt((x * x).sum(axis=axis) + eps)


def l2_norm_backward(g_out: np.ndarray, x: np.ndarray, axis: int,
                     eps: float = 1e-12) -> np.ndarray:
    axis = _check_axis(x, axis)
    norms = np.sqrt((x * x).sum(axis=axis, keepdims=True) + eps)
    return np.expand_dims(g_out, axis) * x / norms


def concat_forward(parts: Sequence[np.ndarray], axis: int) -> np.ndarray:
    _check_axis(parts[0], axis)
    return np.concatenate(parts, axis=axis)


def concat_backward(g_out: np.ndarray, sizes: Sequence[int], axis: int):
    """Split the concatenated gradient back into per-part gradients."""
    _check_axis(g_out, axis)
    splits = np.cumsum(sizes)[:-1]
    return np.split(g_out, splits, axis=axis)


def reshape_forward(x: np.ndarray, shape) -> np.ndarray:
    return x.reshape(shape)


def reshape_backward(g_out: np.ndarray, orig_shape) -> np.ndarray:
    return g_out.reshape(orig_shape)


def downsample_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor label downsampling of the last three axes.

    Samples the voxel at offset factor//2 inside each factor^3 block, so a
    constant block maps to the same constant.
    """
    if factor < 1:
        raise ShapeError(f"factor {factor} must be >= 1")
    for ax in range(labels.ndim - 3, labels.ndim):
        if labels.shape[ax] % factor != 0:
            raise ShapeError(
                f"axis {ax}: extent {labels.shape[ax]} not divisible by factor {factor}"
            )
    o = factor // 2
    return labels[..., o::factor, o::factor, o::factor]
