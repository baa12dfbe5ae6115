"""Training objectives and their analytic gradients.

Downstream segmentation optimizes an unweighted sum of three terms: a margin
loss on class-capsule lengths at the coarse grid, a weighted softmax
cross-entropy on the dense logits, and a foreground-masked reconstruction
error. Pretext pretraining minimizes the distance between features of two
differently transformed views of the same volume.

Backward functions return gradients of the scalar loss directly (no incoming
cotangent); every one is covered by the finite-difference suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, downsample_labels, softmax_forward

MARGIN_POS = 0.9
MARGIN_NEG = 0.1
MARGIN_LAMBDA = 0.5


# ---------------------------------------------------------------------------
# Margin loss on capsule lengths.
# ---------------------------------------------------------------------------

def margin_loss(lengths: np.ndarray, onehot: np.ndarray,
                m_pos: float = MARGIN_POS, m_neg: float = MARGIN_NEG,
                lam: float = MARGIN_LAMBDA) -> float:
    """T_k max(0, m+ - |v_k|)^2 + lam (1-T_k) max(0, |v_k| - m-)^2, averaged.

    The mean runs over every (position, class) entry so the value does not
    scale with grid size or class count.
    """
    if lengths.shape != onehot.shape:
        raise ShapeError(f"lengths {lengths.shape} vs targets {onehot.shape}")
    pos = np.maximum(0.0, m_pos - lengths)
    neg = np.maximum(0.0, lengths - m_neg)
    per = onehot * pos ** 2 + lam * (1.0 - onehot) * neg ** 2
    return float(per.mean())


def margin_loss_backward(lengths: np.ndarray, onehot: np.ndarray,
                         m_pos: float = MARGIN_POS, m_neg: float = MARGIN_NEG,
                         lam: float = MARGIN_LAMBDA) -> np.ndarray:
    pos = np.maximum(0.0, m_pos - lengths)
    neg = np.maximum(0.0, lengths - m_neg)
    g = -2.0 * onehot * pos + 2.0 * lam * (1.0 - onehot) * neg
    return g / lengths.size


# ---------------------------------------------------------------------------
# Weighted softmax cross-entropy over dense voxel logits (class axis last).
# ---------------------------------------------------------------------------

def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                           class_weights: np.ndarray) -> float:
    """mean over voxels of w[label] * -log softmax(logits)[label]."""
    if logits.shape[:-1] != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[-1]
    if len(class_weights) != k:
        raise ShapeError(f"{len(class_weights)} weights for {k} classes")
    p = softmax_forward(logits, axis=-1)
    py = np.take_along_axis(p, labels[..., None], axis=-1)[..., 0]
    w = np.asarray(class_weights)[labels]
    return float((w * -np.log(np.maximum(py, 1e-30))).sum() / labels.size)


def weighted_cross_entropy_backward(logits: np.ndarray, labels: np.ndarray,
                                    class_weights: np.ndarray) -> np.ndarray:
    p = softmax_forward(logits, axis=-1)
    y = np.zeros_like(p)
    np.put_along_axis(y, labels[..., None], 1.0, axis=-1)
    w = np.asarray(class_weights)[labels]
    return w[..., None] * (p - y) / labels.size


def onehot_labels(labels: np.ndarray, num_classes: int,
                  dtype=np.float64) -> np.ndarray:
    """Integer labels [...] -> one-hot [..., num_classes]."""
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ShapeError(
            f"labels outside [0, {num_classes}): {labels.min()}..{labels.max()}")
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------------------
# Foreground-masked reconstruction error.
# ---------------------------------------------------------------------------

def masked_reconstruction_loss(recon: np.ndarray, orig: np.ndarray,
                               mask: np.ndarray) -> float:
    """Mean squared error over mask-selected voxels; 0 when the mask is empty."""
    if recon.shape != orig.shape:
        raise ShapeError(f"recon {recon.shape} vs target {orig.shape}")
    m = np.broadcast_to(mask, recon.shape)
    denom = m.sum()
    if denom == 0:
        return 0.0
    return float((m * (recon - orig) ** 2).sum() / denom)


def masked_reconstruction_loss_backward(recon: np.ndarray, orig: np.ndarray,
                                        mask: np.ndarray) -> np.ndarray:
    m = np.broadcast_to(mask, recon.shape)
    denom = m.sum()
    if denom == 0:
        return np.zeros_like(recon)
    return 2.0 * m * (recon - orig) / denom


# ---------------------------------------------------------------------------
# Pretext objective: distance between features of two transformed views.
# ---------------------------------------------------------------------------

def pretext_loss(feat_a: np.ndarray, feat_b: np.ndarray) -> float:
    """Euclidean norm of the whole feature difference; exactly 0 for equal inputs."""
    if feat_a.shape != feat_b.shape:
        raise ShapeError(f"feature shapes differ: {feat_a.shape} vs {feat_b.shape}")
    d = feat_a - feat_b
    return float(np.sqrt((d * d).sum()))


def pretext_loss_backward(feat_a: np.ndarray, feat_b: np.ndarray,
                          eps: float = 1e-12):
    """Gradients w.r.t. both feature tensors (they are +/- of each other)."""
    d = feat_a - feat_b
    n = np.sqrt((d * d).sum())
    g = d / (n + eps)
    return g, -g


# ---------------------------------------------------------------------------
# Combined downstream objective.
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    margin: float
    ce: float
    recon: float

    @property
    def total(self) -> float:
        return self.margin + self.ce + self.recon


@dataclass
class DownstreamTerms:
    """Loss values plus the gradients the network backward pass consumes."""

    breakdown: LossBreakdown
    g_logits: np.ndarray    # [N, classes, H, W, D]
    g_lengths: np.ndarray   # [N, h, w, d, classes]
    g_recon: np.ndarray     # [N, in_channels, H, W, D]


def downstream_terms(out, x: np.ndarray, labels: np.ndarray, num_classes: int,
                     class_weights=None, use_margin: bool = True,
                     use_ce: bool = True, use_recon: bool = True) -> DownstreamTerms:
    """Evaluate the three-term objective for one forward pass.

    ``out`` carries ``logits`` [N,K,H,W,D], ``lengths`` [N,h,w,d,K] from the
    coarse class-capsule grid, and ``recon`` [N,C,H,W,D]. The margin target is
    the label volume downsampled to the coarse grid; the reconstruction mask
    is the foreground of the labels.
    """
    if class_weights is None:
        class_weights = np.ones(num_classes)
    labels = np.asarray(labels)

    if use_margin:
        factor = labels.shape[-1] // out.lengths.shape[3]
        coarse = downsample_labels(labels, factor)
        onehot = onehot_labels(coarse, num_classes, dtype=out.lengths.dtype)
        l_margin = margin_loss(out.lengths, onehot)
        g_lengths = margin_loss_backward(out.lengths, onehot)
    else:
        l_margin, g_lengths = 0.0, np.zeros_like(out.lengths)

    if use_ce:
        # CE works class-axis-last; logits live channel-first
        lg = np.moveaxis(out.logits, 1, -1)
        l_ce = weighted_cross_entropy(lg, labels, class_weights)
        g_logits = np.moveaxis(
            weighted_cross_entropy_backward(lg, labels, class_weights), -1, 1)
    else:
        l_ce, g_logits = 0.0, np.zeros_like(out.logits)

    if use_recon:
        mask = (labels > 0).astype(x.dtype)[:, None]
        l_recon = masked_reconstruction_loss(out.recon, x, mask)
        g_recon = masked_reconstruction_loss_backward(out.recon, x, mask)
    else:
        l_recon, g_recon = 0.0, np.zeros_like(out.recon)

    return DownstreamTerms(LossBreakdown(l_margin, l_ce, l_recon),
                           g_logits, g_lengths, g_recon)
