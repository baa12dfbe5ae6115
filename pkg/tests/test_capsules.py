"""Routing invariants, squash properties, and the capsule conv layer."""

import numpy as np
import pytest

from voxcaps.capsules import (
    CapsConvSpec, ShapeError, caps_conv3d_backward, caps_conv3d_forward,
    caps_weight_shape, dynamic_routing, route_backward, route_forward,
    routing_couplings, squash,
)


def _preds(rng, children=12, parents=3, dim=4, lead=()):
    return rng.standard_normal(lead + (children, parents, dim)).astype(np.float64)


def test_squash_norm_below_one():
    rng = np.random.default_rng(0)
    for scale in (1e-4, 1.0, 1e4):
        v = rng.standard_normal((50, 8)) * scale
        n = np.linalg.norm(squash(v), axis=-1)
        assert (n < 1.0).all()
        assert (n >= 0.0).all()


def test_squash_keeps_direction():
    v = np.array([[3.0, 4.0, 0.0]])
    s = squash(v)
    cos = (s * v).sum() / (np.linalg.norm(s) * np.linalg.norm(v))
    assert abs(cos - 1.0) < 1e-6


def test_squash_norm_formula():
    # |squash(v)| == |v|^2 / (1 + |v|^2) for |v| = 2: 4/5
    v = np.array([[2.0, 0.0]])
    assert abs(np.linalg.norm(squash(v)) - 0.8) < 1e-6


def test_squash_zero_is_zero():
    np.testing.assert_allclose(squash(np.zeros((3, 5))), 0.0)


def test_couplings_sum_to_one_over_parents():
    rng = np.random.default_rng(1)
    u = _preds(rng, lead=(2, 6))
    for c in routing_couplings(u, 3):
        np.testing.assert_allclose(np.asarray(c).sum(axis=-1), 1.0, atol=1e-6)


def test_first_couplings_uniform():
    rng = np.random.default_rng(2)
    u = _preds(rng, parents=4)
    c0 = np.asarray(routing_couplings(u, 3)[0])
    np.testing.assert_allclose(c0, 0.25, atol=1e-7)


def test_routing_concentrates_on_agreeing_parent():
    # children all predict the same vector for parent 0 and noise elsewhere:
    # couplings for parent 0 must grow across iterations
    rng = np.random.default_rng(3)
    u = rng.standard_normal((10, 3, 4)) * 0.1
    u[:, 0, :] = np.array([2.0, 0.0, 0.0, 0.0])
    cs = routing_couplings(u, 3)
    mean0 = [float(np.asarray(c)[:, 0].mean()) for c in cs]
    assert mean0[1] > mean0[0] - 1e-9
    assert mean0[2] > mean0[1] - 1e-9
    assert mean0[-1] > 1.0 / 3.0 + 0.05


def test_routing_child_permutation_invariance():
    # parent outputs must not depend on the order of children
    rng = np.random.default_rng(4)
    u = _preds(rng, children=9)
    v = dynamic_routing(u, 3)
    perm = rng.permutation(9)
    v_p = dynamic_routing(u[perm], 3)
    np.testing.assert_allclose(v, v_p, atol=1e-6)


def test_routing_single_iteration_is_uniform_sum():
    # couplings normalize over parents, so round one weights every child 1/P
    rng = np.random.default_rng(5)
    u = _preds(rng, children=7, parents=2, dim=3)
    v = dynamic_routing(u, 1)
    want = squash(u.sum(axis=0) / 2.0, axis=-1)
    np.testing.assert_allclose(v, want, atol=1e-7)


def test_routing_output_norms_below_one():
    rng = np.random.default_rng(6)
    v = dynamic_routing(_preds(rng) * 10.0, 3)
    assert (np.linalg.norm(v, axis=-1) < 1.0).all()


def test_routing_rejects_nonfinite():
    u = np.zeros((4, 2, 3))
    u[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        route_forward(u[None], 3)


def test_routing_rejects_zero_iterations():
    with pytest.raises(ShapeError):
        route_forward(np.zeros((1, 4, 2, 3)), 0)


def test_route_backward_matches_finite_difference():
    rng = np.random.default_rng(7)
    u = _preds(rng, children=5, parents=2, dim=3, lead=(1,))
    v, cache = route_forward(u, 3)
    g_out = rng.standard_normal(v.shape)
    g_u = route_backward(g_out, u, cache)
    # directional derivative against central difference
    direction = rng.standard_normal(u.shape)
    h = 1e-6
    f_p, _ = route_forward(u + h * direction, 3)
    f_m, _ = route_forward(u - h * direction, 3)
    fd = float((g_out * (f_p - f_m)).sum() / (2 * h))
    an = float((g_u * direction).sum())
    assert abs(fd - an) < 1e-5 * max(1.0, abs(fd))


def test_caps_conv_shapes():
    spec = CapsConvSpec(in_types=2, in_dim=4, out_types=3, out_dim=6,
                        kernel=(3, 3, 3), stride=(2, 2, 2), padding=(1, 1, 1))
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 8, 8, 8, 2, 4)).astype(np.float32)
    w = rng.standard_normal(caps_weight_shape(spec)).astype(np.float32) * 0.1
    y, cache = caps_conv3d_forward(x, w, spec)
    assert y.shape == (1, 4, 4, 4, 3, 6)
    g = rng.standard_normal(y.shape).astype(np.float32)
    gx, gw = caps_conv3d_backward(g, cache)
    assert gx.shape == x.shape
    assert gw.shape == w.shape


def test_caps_conv_norms_bounded():
    spec = CapsConvSpec(in_types=1, in_dim=4, out_types=2, out_dim=4,
                        kernel=(3, 3, 3), padding=(1, 1, 1))
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 6, 6, 6, 1, 4)).astype(np.float32) * 5
    w = rng.standard_normal(caps_weight_shape(spec)).astype(np.float32)
    y, _ = caps_conv3d_forward(x, w, spec)
    assert (np.linalg.norm(y, axis=-1) < 1.0).all()


def test_caps_weight_shape():
    spec = CapsConvSpec(in_types=2, in_dim=4, out_types=3, out_dim=6)
    assert caps_weight_shape(spec) == (2, 3, 3, 3, 4, 3, 6)
