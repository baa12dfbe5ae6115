"""Pretext transforms, the invariance objective, and collapse guards."""

import numpy as np
import pytest

from voxcaps.network import ArchSpec, DilatedStem
from voxcaps.ssl import (
    COLLAPSE_THRESHOLD, NUM_TRANSFORMS, PretrainConfig, TransformSpec,
    apply_transform, collapse_monitor, default_transforms, pretrain,
    read_pretext_log, sample_transform_pair, write_pretext_log,
)
from voxcaps.tensor import ShapeError


def _vol(rng, channels=2, extent=16):
    return rng.standard_normal((channels, extent, extent, extent)).astype(np.float32)


def test_default_set_has_seven_entries():
    ts = default_transforms(3, (16, 16, 16))
    assert len(ts) == NUM_TRANSFORMS
    assert ts[0].kind == "identity"
    kinds = {t.kind for t in ts}
    assert kinds == {"identity", "zero_channel", "swap_patches", "blur", "noise"}


def test_transforms_preserve_shape_and_dtype():
    rng = np.random.default_rng(0)
    v = _vol(rng, channels=3)
    for t in default_transforms(3, v.shape[1:]):
        out = apply_transform(v, t)
        assert out.shape == v.shape
        assert out.dtype == v.dtype


def test_identity_copies():
    v = _vol(np.random.default_rng(1))
    out = apply_transform(v, TransformSpec("identity"))
    np.testing.assert_array_equal(out, v)
    out[0, 0, 0, 0] = 99.0
    assert v[0, 0, 0, 0] != 99.0  # no aliasing


def test_zero_channel():
    v = _vol(np.random.default_rng(2))
    out = apply_transform(v, TransformSpec("zero_channel", channel=1))
    np.testing.assert_array_equal(out[1], 0.0)
    np.testing.assert_array_equal(out[0], v[0])
    with pytest.raises(ShapeError):
        apply_transform(v, TransformSpec("zero_channel", channel=5))


def test_swap_patches_is_an_involution():
    # applying the same deterministic swap twice restores the volume
    v = _vol(np.random.default_rng(3))
    t = TransformSpec("swap_patches", count=3, size=4, seed=17)
    once = apply_transform(v, t)
    assert not np.array_equal(once, v)
    twice = apply_transform(once, t)
    np.testing.assert_array_equal(twice, v)


def test_swap_patches_preserves_histogram():
    v = _vol(np.random.default_rng(4))
    t = TransformSpec("swap_patches", count=4, size=4, seed=5)
    out = apply_transform(v, t)
    np.testing.assert_allclose(np.sort(out.ravel()), np.sort(v.ravel()))


def test_blur_preserves_mean_reduces_variance():
    v = _vol(np.random.default_rng(5))
    out = apply_transform(v, TransformSpec("blur", sigma=1.5))
    # nearest-mode edges re-weight boundary voxels, so the mean only holds
    # to within a few standard errors
    assert abs(out.mean() - v.mean()) < 0.05
    assert out.std() < 0.6 * v.std()


def test_noise_is_seeded():
    v = _vol(np.random.default_rng(6))
    t = TransformSpec("noise", sigma=0.1, seed=9)
    a, b = apply_transform(v, t), apply_transform(v, t)
    np.testing.assert_array_equal(a, b)
    c = apply_transform(v, TransformSpec("noise", sigma=0.1, seed=10))
    assert not np.array_equal(a, c)


def test_pair_sampling_reproducible_and_fresh():
    ts = default_transforms(2, (16, 16, 16))
    i1, j1, a1, b1 = sample_transform_pair(np.random.default_rng(0), ts)
    i2, j2, a2, b2 = sample_transform_pair(np.random.default_rng(0), ts)
    assert (i1, j1, a1, b1) == (i2, j2, a2, b2)
    # seed-bearing transforms must differ between successive draws
    rng = np.random.default_rng(1)
    seen = set()
    for _ in range(30):
        _, _, a, b = sample_transform_pair(rng, ts)
        for t in (a, b):
            if t.kind in ("swap_patches", "noise"):
                seen.add(t.seed)
    assert len(seen) > 5


def test_collapse_monitor():
    flat = np.ones((4, 8, 2, 2, 2))
    var, collapsed = collapse_monitor(flat)
    assert collapsed and var < COLLAPSE_THRESHOLD
    alive = np.random.default_rng(7).standard_normal((4, 8, 2, 2, 2))
    var, collapsed = collapse_monitor(alive)
    assert not collapsed and var > 0.5
    with pytest.raises(ShapeError):
        collapse_monitor(flat[:1])


def test_pretrain_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(steps=0)
    with pytest.raises(ValueError):
        PretrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        PretrainConfig(variance_floor=1.5)


def _micro_stem(seed=0, channels=2):
    arch = ArchSpec.micro(2, in_channels=channels)
    return DilatedStem(channels, arch.stem_channels, arch.stem_dilations,
                       np.random.default_rng(seed))


def test_pretrain_runs_and_is_deterministic():
    rng = np.random.default_rng(8)
    vols = [_vol(rng) for _ in range(3)]
    cfg = PretrainConfig(steps=5, learning_rate=3e-5, seed=4)

    hist1 = pretrain(vols, _micro_stem(3), cfg)
    hist2 = pretrain(vols, _micro_stem(3), cfg)
    assert len(hist1) == 5
    assert [r.loss for r in hist1] == [r.loss for r in hist2]
    assert all(np.isfinite(r.loss) for r in hist1)
    assert not any(r.collapsed for r in hist1)


def test_pretrain_changes_weights():
    rng = np.random.default_rng(9)
    vols = [_vol(rng) for _ in range(2)]
    stem = _micro_stem(5)
    before = {k: p.value.copy() for k, p in stem.named_params()}
    pretrain(vols, stem, PretrainConfig(steps=3, learning_rate=1e-4, seed=0))
    after = dict(stem.named_params())
    assert any(not np.array_equal(before[k], after[k].value) for k in before)


def test_variance_floor_stops_early():
    # an aggressive rate drives features toward constancy; the floor must
    # stop the loop before the probe variance erodes past its budget
    rng = np.random.default_rng(10)
    vols = [_vol(rng) for _ in range(3)]
    stem = _micro_stem(6)
    cfg = PretrainConfig(steps=400, learning_rate=5e-3, seed=1,
                         variance_floor=0.9)
    hist = pretrain(vols, stem, cfg)
    assert len(hist) < 400


def test_pretext_log_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    vols = [_vol(rng) for _ in range(2)]
    hist = pretrain(vols, _micro_stem(7),
                    PretrainConfig(steps=4, learning_rate=3e-5, seed=2))
    path = str(tmp_path / "pretext.tsv")
    write_pretext_log(path, hist)
    back = read_pretext_log(path)
    assert len(back) == len(hist)
    for a, b in zip(hist, back):
        assert (a.step, a.i, a.j, a.collapsed) == (b.step, b.i, b.j, b.collapsed)
        assert abs(a.loss - b.loss) < 1e-6
        assert abs(a.variance - b.variance) < 1e-9
