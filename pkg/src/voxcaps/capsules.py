"""Capsule math: squash, iterative routing-by-agreement, and 3D capsule convolution.

A capsule is a vector whose norm encodes presence probability and whose
direction encodes configuration. Capsule layers here are convolutional: a
learned transformation per (child type, kernel offset) produces prediction
vectors for every parent type, shared across spatial positions, and routing
assigns children to parents through softmax-normalized coupling coefficients.

Grid layout: capsule feature maps are [N, H, W, D, C, A] with C capsule types
of dimension A at every voxel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ConvSpec,
    ShapeError,
    _col2im,
    _im2col,
    _pad_spatial,
    softmax_backward,
    softmax_forward,
)

SQUASH_EPS = 1e-9
_CH_AXIS = -3   # child axis of routing tensors [..., children, parents, dim]


@dataclass
class CapsuleGrid:
    """A tensor viewed as an H x W x D grid of C capsule types of dimension A."""

    array: np.ndarray   # [N, H, W, D, C, A]

    def __post_init__(self):
        if self.array.ndim != 6:
            raise ShapeError(
                f"capsule grid must be [N,H,W,D,C,A], got rank {self.array.ndim}"
            )

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.array.shape[1:4]

    @property
    def caps_types(self) -> int:
        return self.array.shape[4]

    @property
    def caps_dim(self) -> int:
        return self.array.shape[5]


@dataclass(frozen=True)
class CapsConvSpec:
    """Geometry of one convolutional capsule layer."""

    in_types: int
    in_dim: int
    out_types: int
    out_dim: int
    kernel: tuple[int, int, int] = (3, 3, 3)
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (1, 1, 1)
    routing_iterations: int = 3

    def __post_init__(self):
        for name in ("in_types", "in_dim", "out_types", "out_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1")
        if self.routing_iterations < 1:
            raise ShapeError("routing_iterations must be >= 1")
        object.__setattr__(self, "conv", ConvSpec(
            in_channels=self.in_types * self.in_dim,
            out_channels=self.out_types * self.out_dim,
            kernel=self.kernel, stride=self.stride, padding=self.padding))

    conv: ConvSpec = None  # filled in __post_init__; geometry helper only


def caps_weight_shape(spec: CapsConvSpec) -> tuple[int, ...]:
    """Transformation weights: [in_types, k0, k1, k2, in_dim, out_types, out_dim]."""
    return (spec.in_types,) + spec.conv.kernel + (spec.in_dim, spec.out_types, spec.out_dim)


# ---------------------------------------------------------------------------
# Squash nonlinearity.
# ---------------------------------------------------------------------------

def squash(v: np.ndarray, axis: int = -1, eps: float = SQUASH_EPS) -> np.ndarray:
    """(|v|^2 / (1 + |v|^2)) * v / |v|; keeps direction, maps norm into [0, 1)."""
    sq = (v * v).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    return (sq / (1.0 + sq)) * v / (n + eps)


def squash_backward(g_out: np.ndarray, v: np.ndarray, axis: int = -1,
                    eps: float = SQUASH_EPS) -> np.ndarray:
    sq = (v * v).sum(axis=axis, keepdims=True)
    n = np.sqrt(sq)
    f = sq / ((1.0 + sq) * (n + eps))
    # 2 * d f / d sq, with the norm guarded like the forward pass
    df2 = (1.0 - sq) / ((n + eps) * (1.0 + sq) ** 2)
    dot = (g_out * v).sum(axis=axis, keepdims=True)
    return f * g_out + df2 * dot * v


# ---------------------------------------------------------------------------
# Dynamic routing (unrolled, differentiable end to end).
# ---------------------------------------------------------------------------

def route_forward(u_hat: np.ndarray, iterations: int):
    """Routing-by-agreement over [..., children, parents, dim] predictions.

    Logits start at zero; each round couples children to parents by softmax
    over the parent axis, aggregates, squashes, and (except on the final
    round) reinforces logits by prediction-output agreement. Returns the
    parent capsules [..., parents, dim] and the per-iteration cache needed by
    :func:`route_backward`.
    """
    if iterations < 1:
        raise ShapeError("iterations must be >= 1")
    if not np.all(np.isfinite(u_hat)):
        raise ValueError("routing predictions contain non-finite values")
    parents = u_hat.shape[-2]
    inv = np.asarray(1.0 / parents, dtype=u_hat.dtype)
    cache = []
    b = v = None
    for t in range(iterations):
        if t == 0:
            # logits start at zero, so the first couplings are exactly uniform
            c = np.broadcast_to(inv, u_hat.shape[:-1])
            s = u_hat.sum(axis=_CH_AXIS) * inv
        else:
            c = softmax_forward(b, axis=-1)
            s = np.einsum("...kc,...kca->...ca", c, u_hat)
        v = squash(s, axis=-1)
        cache.append((c, s, v))
        if t < iterations - 1:
            agree = np.einsum("...kca,...ca->...kc", u_hat, v)
            b = agree if t == 0 else b + agree
    return v, cache


def route_backward(g_out: np.ndarray, u_hat: np.ndarray, cache) -> np.ndarray:
    """Gradient of route_forward w.r.t. the predictions u_hat."""
    iters = len(cache)
    g_u = np.zeros_like(u_hat)
    g_b_next = None
    for t in range(iters - 1, -1, -1):
        c, s, v = cache[t]
        if t == iters - 1:
            g_v = g_out
        else:
            # v_t fed the agreement update b_{t+1} = b_t + <u_hat, v_t>
            g_v = np.einsum("...kc,...kca->...ca", g_b_next, u_hat)
            g_u += g_b_next[..., None] * np.expand_dims(v, _CH_AXIS)
        g_s = squash_backward(g_v, s, axis=-1)
        g_u += c[..., None] * np.expand_dims(g_s, _CH_AXIS)
        if t == 0:
            break  # b_0 is the zero constant; its gradient feeds nothing
        g_c = np.einsum("...kca,...ca->...kc", u_hat, g_s)
        g_b = softmax_backward(g_c, c, axis=-1)
        if t < iters - 1:
            g_b = g_b + g_b_next
        g_b_next = g_b
    return g_u


def dynamic_routing(predictions: np.ndarray, iterations: int) -> np.ndarray:
    """Route [children, parents, dim] predictions into [parents, dim] capsules."""
    if predictions.ndim != 3:
        raise ShapeError("predictions must be [children, parents, dim]")
    v, _ = route_forward(predictions[None], iterations)
    return v[0]


def routing_couplings(u_hat: np.ndarray, iterations: int):
    """Coupling coefficients per iteration (for invariant checks and probes)."""
    _, cache = route_forward(u_hat, iterations)
    return [c for c, _, _ in cache]


# ---------------------------------------------------------------------------
# Convolutional capsule layer.
# ---------------------------------------------------------------------------

@dataclass
class CapsConvCache:
    """Everything the capsule-conv backward pass needs from the forward pass."""

    x_shape: tuple
    spec: CapsConvSpec
    weights: np.ndarray     # [Ci, k0, k1, k2, Ai, Co, Ao]
    cols_t: np.ndarray      # [CH, N*P, in_dim]
    u_hat: np.ndarray       # [N, P, CH, out_types, out_dim]
    route_cache: list
    out_sp: tuple


def _grid_to_channels(x: np.ndarray) -> np.ndarray:
    # [N,H,W,D,C,A] -> [N, C*A, H, W, D]
    n, h, w, d, c, a = x.shape
    return np.ascontiguousarray(x.transpose(0, 4, 5, 1, 2, 3)).reshape(n, c * a, h, w, d)


def _channels_to_grid(x: np.ndarray, c: int, a: int) -> np.ndarray:
    n, ca, h, w, d = x.shape
    return np.ascontiguousarray(
        x.reshape(n, c, a, h, w, d).transpose(0, 3, 4, 5, 1, 2))


def caps_conv3d_forward(x: np.ndarray, weights: np.ndarray, spec: CapsConvSpec):
    """One convolutional capsule layer over a [N,H,W,D,Ci,Ai] grid.

    Children are the Ci * k^3 capsules in each receptive field; their
    prediction vectors are routed into Co parent capsules of dimension Ao at
    every output position. Returns ([N,o0,o1,o2,Co,Ao], cache).
    """
    if x.ndim != 6:
        raise ShapeError("capsule input must be [N,H,W,D,C,A]")
    n = x.shape[0]
    ci, ai = x.shape[4], x.shape[5]
    if (ci, ai) != (spec.in_types, spec.in_dim):
        raise ShapeError(
            f"input capsules ({ci} types, dim {ai}) != spec "
            f"({spec.in_types} types, dim {spec.in_dim})")
    if weights.shape != caps_weight_shape(spec):
        raise ShapeError(f"weights shape {weights.shape} != {caps_weight_shape(spec)}")
    conv = spec.conv
    out_sp = conv.out_extents(x.shape[1:4])
    k = int(np.prod(conv.kernel))
    ch = ci * k
    co, ao = spec.out_types, spec.out_dim

    xc = _grid_to_channels(x)
    cols = _im2col(_pad_spatial(xc, conv.padding), conv.kernel, conv.stride,
                   conv.dilation, out_sp)                     # [N, Ci*Ai*K, P]
    p = cols.shape[2]
    # children ordered (ci, k); trailing axis is the capsule vector
    cols_t = np.ascontiguousarray(
        cols.reshape(n, ci, ai, k, p)
            .transpose(1, 3, 0, 4, 2).reshape(ch, n * p, ai))  # [CH, N*P, Ai]
    w_t = weights.reshape(ci * k, ai, co * ao)                # [CH, Ai, Co*Ao]
    u_hat = np.matmul(cols_t, w_t)                            # [CH, N*P, Co*Ao]
    u_hat = u_hat.transpose(1, 0, 2).reshape(n, p, ch, co, ao)

    v, route_cache = route_forward(u_hat, spec.routing_iterations)
    out = v.reshape(n, *out_sp, co, ao)
    cache = CapsConvCache(x.shape, spec, weights, cols_t, u_hat, route_cache, out_sp)
    return out, cache


def caps_conv3d_backward(g_out: np.ndarray, cache: CapsConvCache):
    """Gradients of caps_conv3d_forward: returns (grad_input_grid, grad_weights)."""
    spec = cache.spec
    conv = spec.conv
    n, h, w, d, ci, ai = cache.x_shape
    co, ao = spec.out_types, spec.out_dim
    k = int(np.prod(conv.kernel))
    ch = ci * k
    p = int(np.prod(cache.out_sp))
    if g_out.shape != (n, *cache.out_sp, co, ao):
        raise ShapeError(
            f"grad shape {g_out.shape} != output {(n, *cache.out_sp, co, ao)}")

    g_v = g_out.reshape(n, p, co, ao)
    g_uhat = route_backward(g_v, cache.u_hat, cache.route_cache)
    g_uhat_t = np.ascontiguousarray(
        g_uhat.reshape(n * p, ch, co * ao).transpose(1, 0, 2))   # [CH, N*P, Co*Ao]

    # grad wrt transforms: cols^T @ g_uhat, batched over children
    g_w = np.matmul(cache.cols_t.transpose(0, 2, 1), g_uhat_t)   # [CH, Ai, Co*Ao]
    g_w = g_w.reshape((ci,) + conv.kernel + (ai, co, ao))

    w_t = cache.weights.reshape(ch, ai, co * ao)
    g_cols_t = np.matmul(g_uhat_t, w_t.transpose(0, 2, 1))       # [CH, N*P, Ai]
    g_cols = (g_cols_t.reshape(ci, k, n, p, ai)
              .transpose(2, 0, 4, 1, 3)                          # [N, Ci, Ai, K, P]
              .reshape(n, ci * ai * k, p))
    g_xc = _col2im(g_cols, n, ci * ai, (h, w, d), conv.kernel, conv.stride,
                   conv.dilation, conv.padding, cache.out_sp, g_out.dtype)
    return _channels_to_grid(g_xc, ci, ai), g_w


# ---------------------------------------------------------------------------
# Capsule <-> tensor reshapes and lengths.
# ---------------------------------------------------------------------------

def flatten_to_tensor(grid: np.ndarray) -> np.ndarray:
    """[N,H,W,D,C,A] -> [N,H,W,D,C*A]; lossless."""
    n, h, w, d, c, a = grid.shape
    return grid.reshape(n, h, w, d, c * a)


def from_tensor(t: np.ndarray, caps_types: int, caps_dim: int) -> np.ndarray:
    """[N,H,W,D,C*A] -> [N,H,W,D,C,A]; the channel extent must equal C*A."""
    if t.ndim != 5:
        raise ShapeError("expected [N,H,W,D,channels]")
    chans = t.shape[-1]
    if chans != caps_types * caps_dim:
        raise ShapeError(
            f"channel extent {chans} != caps_types*caps_dim = {caps_types * caps_dim}")
    n, h, w, d = t.shape[:4]
    return t.reshape(n, h, w, d, caps_types, caps_dim)


def capsule_lengths(grid: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Euclidean norm along the capsule-dimension axis: [N,H,W,D,C,A] -> [N,H,W,D,C]."""
    return np.sqrt((grid * grid).sum(axis=-1) + eps)


def capsule_lengths_backward(g_out: np.ndarray, grid: np.ndarray,
                             eps: float = 1e-12) -> np.ndarray:
    norms = np.sqrt((grid * grid).sum(axis=-1, keepdims=True) + eps)
    return g_out[..., None] * grid / norms
