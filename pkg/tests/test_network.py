"""End-to-end network contracts: shapes, modes, checkpoints."""

import os

import numpy as np
import pytest

from voxcaps.network import (
    ArchSpec, CapsSegNet, DilatedStem, ShapeError, load_checkpoint,
    save_checkpoint, stem_entries,
)


def micro_net(seed=0, classes=2, channels=1):
    return CapsSegNet(ArchSpec.micro(classes, in_channels=channels), seed=seed)


def test_forward_shapes():
    net = micro_net(classes=3, channels=2)
    x = np.random.default_rng(0).standard_normal((1, 2, 16, 16, 16))
    out = net.forward(x, "train")
    assert out.logits.shape == (1, 3, 16, 16, 16)
    assert out.lengths.shape == (1, 2, 2, 2, 3)  # three stride-2 stages: /8
    assert out.recon.shape == (1, 2, 16, 16, 16)
    assert np.isfinite(out.logits).all()
    assert (out.lengths >= 0).all() and (out.lengths < 1).all()


def test_forward_rejects_bad_input():
    net = micro_net()
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 2, 16, 16, 16)))   # wrong channels
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 12, 16, 16)))   # not divisible by 8
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 16, 16, 16)), mode="predict")


def test_eval_mode_is_per_sample():
    # after one train pass primes running stats, eval output for a sample
    # must not depend on what else sits in the batch
    net = micro_net(seed=1)
    rng = np.random.default_rng(1)
    a = rng.standard_normal((1, 1, 16, 16, 16))
    b = rng.standard_normal((1, 1, 16, 16, 16))
    net.forward(np.concatenate([a, b]), "train")
    solo = net.forward(a, "eval").logits
    batched = net.forward(np.concatenate([a, b]), "eval").logits[:1]
    np.testing.assert_allclose(solo, batched, rtol=1e-5, atol=1e-6)


def test_eval_does_not_mutate_state():
    net = micro_net(seed=2)
    x = np.random.default_rng(2).standard_normal((1, 1, 16, 16, 16))
    net.forward(x, "train")
    before = {k: v.copy() for k, v in net.state_entries().items()}
    net.forward(x, "eval")
    after = net.state_entries()
    assert sorted(before) == sorted(after)
    for k in before:
        np.testing.assert_array_equal(before[k], after[k])


def test_train_mode_updates_running_stats():
    net = micro_net(seed=3)
    x = np.random.default_rng(3).standard_normal((1, 1, 16, 16, 16))
    before = {k: v.copy() for k, v in net.state_entries().items()
              if "running" in k}
    assert before, "expected running-stat entries in the state dict"
    net.forward(x, "train")
    after = net.state_entries()
    changed = any(not np.array_equal(before[k], after[k]) for k in before)
    assert changed


def test_param_count_frozen():
    # any drift here is an architecture change and must be deliberate
    assert micro_net().param_count() == 68339
    assert micro_net(classes=3, channels=3).param_count() == 70730


def test_seed_determinism():
    n1, n2 = micro_net(seed=5), micro_net(seed=5)
    for (k1, p1), (k2, p2) in zip(sorted(n1.named_params()),
                                  sorted(n2.named_params())):
        assert k1 == k2
        np.testing.assert_array_equal(p1.value, p2.value)
    n3 = micro_net(seed=6)
    vals5 = np.concatenate([p.value.ravel() for _, p in sorted(n1.named_params())])
    vals6 = np.concatenate([p.value.ravel() for _, p in sorted(n3.named_params())])
    assert not np.array_equal(vals5, vals6)


def test_state_roundtrip_through_checkpoint(tmp_path):
    net = micro_net(seed=7)
    x = np.random.default_rng(7).standard_normal((1, 1, 16, 16, 16))
    net.forward(x, "train")  # move running stats off their init
    path = os.path.join(tmp_path, "net.vxc")
    save_checkpoint(path, net.state_entries(), meta={"kind": "model", "tag": 3})
    entries, meta = load_checkpoint(path)
    assert meta["kind"] == "model" and meta["tag"] == 3

    other = micro_net(seed=99)
    other.load_state_entries(entries)
    out_a = net.forward(x, "eval").logits
    out_b = other.forward(x, "eval").logits
    np.testing.assert_array_equal(out_a, out_b)


def test_checkpoint_rejects_garbage(tmp_path):
    path = os.path.join(tmp_path, "bad.vxc")
    with open(path, "wb") as f:
        f.write(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_load_strict_flags_missing_keys():
    net = micro_net()
    partial = dict(list(net.state_entries().items())[:3])
    with pytest.raises(KeyError):
        net.load_state_entries(partial)
    net.load_state_entries(partial, strict=False)  # subset loads fine


def test_stem_entries_subset_and_transfer():
    arch = ArchSpec.micro(2)
    donor = CapsSegNet(arch, seed=11)
    sub = stem_entries(donor)
    assert sub and all(k.startswith("stem.") for k in sub)

    recv = CapsSegNet(arch, seed=12)
    recv.load_state_entries(sub, strict=False)
    got = dict(recv.named_params())
    want = dict(donor.named_params())
    for k in sub:
        if k in want:  # running stats live in state, not params
            np.testing.assert_array_equal(got[k].value, want[k].value)


def test_standalone_stem_matches_network_stem():
    arch = ArchSpec.micro(2, in_channels=2)
    stem = DilatedStem(arch.in_channels, arch.stem_channels,
                       arch.stem_dilations, np.random.default_rng(4))
    net = CapsSegNet(arch, seed=13)
    net.load_state_entries(stem_entries(stem), strict=False)
    x = np.random.default_rng(5).standard_normal((1, 2, 16, 16, 16)).astype(np.float32)
    np.testing.assert_allclose(stem.forward(x), net.stem.forward(x),
                               rtol=1e-6, atol=1e-7)


def test_recalibration_is_seeded_and_effective():
    arch = ArchSpec.micro(2)
    a, b = CapsSegNet(arch, seed=20), CapsSegNet(arch, seed=20)
    sample = np.random.default_rng(0).standard_normal((1, 16, 16, 16)).astype(np.float32)
    a.recalibrate_caps(3, sample=sample)
    b.recalibrate_caps(3, sample=sample)
    for (ka, pa), (kb, pb) in zip(sorted(a.named_params()),
                                  sorted(b.named_params())):
        np.testing.assert_array_equal(pa.value, pb.value)
    out = a.forward(sample[None], "train")
    # calibrated capsule scales keep class lengths in a usable band
    assert 0.01 < float(out.lengths.mean()) < 0.99


def test_zero_grad_clears_accumulation():
    net = micro_net(seed=8)
    x = np.random.default_rng(8).standard_normal((1, 1, 16, 16, 16))
    out = net.forward(x, "train")
    net.backward(np.ones_like(out.logits), np.ones_like(out.lengths),
                 np.ones_like(out.recon))
    some_grad = any(np.abs(p.grad).sum() > 0 for _, p in net.named_params())
    assert some_grad
    net.zero_grad()
    for _, p in net.named_params():
        np.testing.assert_array_equal(p.grad, 0.0)


def test_arch_validation():
    with pytest.raises(ShapeError):
        ArchSpec(num_classes=1)
    with pytest.raises(ShapeError):
        ArchSpec(num_classes=2, caps_types=(4, 4, 4, 2, 2, 3))  # last != classes
    with pytest.raises(ShapeError):
        ArchSpec(num_classes=2, decoder_channels=(8, 8))  # stages != stride-2 count


def test_no_stem_variant_runs():
    arch = ArchSpec.micro(2, use_stem=False)
    net = CapsSegNet(arch, seed=9)
    assert net.stem is None
    x = np.random.default_rng(9).standard_normal((1, 1, 16, 16, 16))
    out = net.forward(x, "train")
    assert out.logits.shape == (1, 2, 16, 16, 16)
