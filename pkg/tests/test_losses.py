"""Loss values against hand-derived oracles."""

import numpy as np
import pytest

from voxcaps.losses import (
    LossBreakdown, ShapeError, margin_loss, margin_loss_backward,
    masked_reconstruction_loss, onehot_labels, pretext_loss,
    pretext_loss_backward, weighted_cross_entropy,
    weighted_cross_entropy_backward,
)


# --- margin loss: T max(0, 0.9-L)^2 + 0.5 (1-T) max(0, L-0.1)^2, mean ------

def test_margin_zero_at_targets():
    # positive class at length 0.9 and negative at 0.1 both sit on the hinge
    lengths = np.array([[0.9, 0.1]])
    onehot = np.array([[1.0, 0.0]])
    assert margin_loss(lengths, onehot) == 0.0


def test_margin_worst_positive():
    # a positive class at length 0 contributes 0.81 per entry
    assert abs(margin_loss(np.array([0.0]), np.array([1.0])) - 0.81) < 1e-12


def test_margin_negative_penalty():
    # a negative class at length 0.6: 0.5 * (0.5)^2 = 0.125
    assert abs(margin_loss(np.array([0.6]), np.array([0.0])) - 0.125) < 1e-12


def test_margin_mean_over_entries():
    lengths = np.array([[0.0, 0.6], [0.9, 0.1]])
    onehot = np.array([[1.0, 0.0], [1.0, 0.0]])
    want = (0.81 + 0.125 + 0.0 + 0.0) / 4.0
    assert abs(margin_loss(lengths, onehot) - want) < 1e-12


def test_margin_gradient_sign():
    g = margin_loss_backward(np.array([0.5, 0.5]), np.array([1.0, 0.0]))
    assert g[0] < 0   # push positive length up
    assert g[1] > 0   # push negative length down


def test_margin_shape_mismatch():
    with pytest.raises(ShapeError):
        margin_loss(np.zeros((2, 3)), np.zeros((2, 2)))


# --- weighted cross entropy -----------------------------------------------

def test_ce_uniform_logits_is_log_k():
    logits = np.zeros((2, 2, 2, 3))
    labels = np.zeros((2, 2, 2), dtype=np.int64)
    got = weighted_cross_entropy(logits, labels, np.ones(3))
    assert abs(got - np.log(3.0)) < 1e-6

    logits2 = np.zeros((5, 2))
    labels2 = np.ones(5, dtype=np.int64)
    assert abs(weighted_cross_entropy(logits2, labels2, np.ones(2))
               - np.log(2.0)) < 1e-6


def test_ce_confident_correct_is_small():
    logits = np.zeros((1, 2))
    logits[0, 1] = 20.0
    labels = np.array([1])
    assert weighted_cross_entropy(logits, labels, np.ones(2)) < 1e-6


def test_ce_weights_scale_per_label():
    logits = np.zeros((2, 2))
    labels = np.array([0, 1])
    base = weighted_cross_entropy(logits, labels, np.ones(2))
    up = weighted_cross_entropy(logits, labels, np.array([3.0, 1.0]))
    # label-0 voxel triples, label-1 unchanged: mean goes from ln2 to 2*ln2
    assert abs(base - np.log(2.0)) < 1e-6
    assert abs(up - 2.0 * np.log(2.0)) < 1e-6


def test_ce_gradient_sums_to_zero_unweighted():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((4, 3))
    labels = rng.integers(0, 3, 4)
    g = weighted_cross_entropy_backward(logits, labels, np.ones(3))
    # per-voxel softmax gradient sums to zero over classes
    np.testing.assert_allclose(g.sum(axis=-1), 0.0, atol=1e-12)


def test_onehot_roundtrip():
    labels = np.array([[0, 2], [1, 1]])
    oh = onehot_labels(labels, 3)
    assert oh.shape == (2, 2, 3)
    np.testing.assert_array_equal(oh.argmax(-1), labels)
    np.testing.assert_allclose(oh.sum(-1), 1.0)
    with pytest.raises(ShapeError):
        onehot_labels(np.array([3]), 3)


# --- masked reconstruction -------------------------------------------------

def test_recon_zero_on_perfect():
    x = np.ones((1, 2, 4, 4, 4))
    mask = np.ones((1, 1, 4, 4, 4))
    assert masked_reconstruction_loss(x, x, mask) == 0.0


def test_recon_empty_mask_is_zero():
    a = np.zeros((1, 1, 2, 2, 2))
    b = np.ones_like(a)
    assert masked_reconstruction_loss(a, b, np.zeros_like(a)) == 0.0


def test_recon_masked_mean():
    # one masked voxel off by 2 in each of 2 channels: mean sq err = 4
    recon = np.zeros((1, 2, 2, 2, 2))
    orig = np.zeros_like(recon)
    orig[0, :, 0, 0, 0] = 2.0
    mask = np.zeros((1, 1, 2, 2, 2))
    mask[0, 0, 0, 0, 0] = 1.0
    assert abs(masked_reconstruction_loss(recon, orig, mask) - 4.0) < 1e-12


# --- pretext distance ------------------------------------------------------

def test_pretext_identity_is_zero():
    a = np.arange(24.0).reshape(2, 3, 4)
    assert pretext_loss(a, a) == 0.0


def test_pretext_euclidean():
    a = np.zeros((2, 2))
    b = np.ones((2, 2))
    assert abs(pretext_loss(a, b) - 2.0) < 1e-12  # sqrt(4 * 1)


def test_pretext_gradients_oppose():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    ga, gb = pretext_loss_backward(a, b)
    np.testing.assert_allclose(ga, -gb)
    # unit-norm gradient: the loss is an L2 distance
    assert abs(np.linalg.norm(ga) - 1.0) < 1e-6


# --- combination -----------------------------------------------------------

def test_breakdown_total_is_sum():
    b = LossBreakdown(margin=0.25, ce=1.5, recon=0.125)
    assert abs(b.total - 1.875) < 1e-12
