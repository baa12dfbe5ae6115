"""Volume format, manifests, phantom generation, and golden files.

Golden fixtures live in tests/golden/ and pin the on-disk formats. To
regenerate after a deliberate format change: python3 tests/test_data.py
"""

import dataclasses
import os

import numpy as np
import pytest

from voxcaps.data import (
    LabeledVolume, PhantomSpec, generate_phantom, generate_phantoms,
    load_dataset, nearest_mean_labels, read_manifest, read_volume,
    write_manifest, write_volume,
)
from voxcaps.network import load_checkpoint, save_checkpoint
from voxcaps.tensor import ShapeError
from voxcaps.training import dice_score

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def _golden_volume() -> LabeledVolume:
    spec = PhantomSpec.easy((16, 16, 16), num_classes=2, channels=2, seed=123)
    return generate_phantom(spec, 0)


def _golden_entries():
    rng = np.random.default_rng(321)
    return {
        "layer.w": rng.standard_normal((3, 2, 2)).astype(np.float32),
        "layer.b": np.zeros(3, dtype=np.float32),
        "stats.mean": rng.standard_normal(4).astype(np.float32),
    }


def regenerate():
    os.makedirs(GOLDEN, exist_ok=True)
    write_volume(_golden_volume(), GOLDEN)
    save_checkpoint(os.path.join(GOLDEN, "golden.vxc"), _golden_entries(),
                    meta={"kind": "golden", "note": "format pin"})
    print(f"regenerated golden files in {GOLDEN}")


# --- volume format ---------------------------------------------------------

def test_volume_roundtrip(tmp_path):
    v = _golden_volume()
    header = write_volume(v, tmp_path)
    back = read_volume(header)
    np.testing.assert_array_equal(back.image, v.image)
    np.testing.assert_array_equal(back.labels, v.labels)
    assert back.volume_id == v.volume_id
    assert back.spacing == v.spacing


def test_volume_write_is_bit_stable(tmp_path):
    # write -> read -> write must reproduce the files byte for byte
    v = _golden_volume()
    h1 = write_volume(v, os.path.join(tmp_path, "a"))
    h2 = write_volume(read_volume(h1), os.path.join(tmp_path, "b"))
    for p1, p2 in zip(_volume_files(h1), _volume_files(h2)):
        assert _read_bytes(p1) == _read_bytes(p2)


def _volume_files(header_path):
    base = os.path.splitext(header_path)[0]
    return [header_path, base + ".img", base + ".lbl"]


def _read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


def test_volume_matches_golden(tmp_path):
    h = write_volume(_golden_volume(), tmp_path)
    for fresh, pinned in zip(_volume_files(h),
                             _volume_files(os.path.join(GOLDEN, "vol_000.hdr"))):
        assert _read_bytes(fresh) == _read_bytes(pinned), \
            f"volume format drifted from golden {os.path.basename(pinned)}"


def test_golden_volume_still_readable():
    v = read_volume(os.path.join(GOLDEN, "vol_000.hdr"))
    assert v.image.shape == (2, 16, 16, 16)
    assert v.image.dtype == np.float32
    assert v.labels.dtype == np.uint8


# --- checkpoint format -----------------------------------------------------

def test_checkpoint_roundtrip_bit_stable(tmp_path):
    p1 = os.path.join(tmp_path, "a.vxc")
    p2 = os.path.join(tmp_path, "b.vxc")
    save_checkpoint(p1, _golden_entries(), meta={"kind": "golden",
                                                 "note": "format pin"})
    entries, meta = load_checkpoint(p1)
    save_checkpoint(p2, entries, meta=meta)
    assert _read_bytes(p1) == _read_bytes(p2)


def test_checkpoint_matches_golden(tmp_path):
    fresh = os.path.join(tmp_path, "fresh.vxc")
    save_checkpoint(fresh, _golden_entries(), meta={"kind": "golden",
                                                    "note": "format pin"})
    assert _read_bytes(fresh) == _read_bytes(os.path.join(GOLDEN, "golden.vxc")), \
        "checkpoint format drifted from golden"


def test_golden_checkpoint_still_readable():
    entries, meta = load_checkpoint(os.path.join(GOLDEN, "golden.vxc"))
    want = _golden_entries()
    assert meta["kind"] == "golden"
    assert sorted(entries) == sorted(want)
    for k in want:
        np.testing.assert_array_equal(entries[k], want[k])


# --- manifests -------------------------------------------------------------

def test_manifest_roundtrip(tmp_path):
    splits = {"train": ["vol_000", "vol_002"], "val": ["vol_001"]}
    write_manifest(tmp_path, splits)
    assert read_manifest(tmp_path) == splits


def test_load_dataset_by_split(tmp_path):
    spec = PhantomSpec.easy((16, 16, 16), num_classes=2, channels=1, seed=9)
    vols = generate_phantoms(spec, 3)
    for v in vols:
        write_volume(v, tmp_path)
    write_manifest(tmp_path, {"train": [vols[0].volume_id, vols[1].volume_id],
                              "val": [vols[2].volume_id]})
    train = load_dataset(tmp_path, "train")
    assert [v.volume_id for v in train] == ["vol_000", "vol_001"]
    val = load_dataset(tmp_path, "val")
    assert [v.volume_id for v in val] == ["vol_002"]
    with pytest.raises(ValueError):
        load_dataset(tmp_path, "test")


# --- phantoms --------------------------------------------------------------

def test_phantom_determinism():
    spec = PhantomSpec.hard((16, 16, 16), num_classes=3, channels=3, seed=4)
    a, b = generate_phantom(spec, 5), generate_phantom(spec, 5)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_phantom(spec, 6)
    assert not np.array_equal(a.labels, c.labels)


def test_phantom_index_independence():
    # volume k does not depend on how many volumes are generated
    spec = PhantomSpec.easy((16, 16, 16), num_classes=2, channels=1, seed=2)
    solo = generate_phantom(spec, 3)
    batch = generate_phantoms(spec, 6)[3]
    np.testing.assert_array_equal(solo.image, batch.image)


def test_phantom_all_classes_present():
    spec = PhantomSpec.hard((16, 16, 16), num_classes=4, channels=2, seed=1)
    for v in generate_phantoms(spec, 4):
        present = set(np.unique(v.labels))
        assert present == set(range(4)), f"{v.volume_id}: classes {present}"


def test_noiseless_phantom_recovered_by_nearest_mean():
    # with the noise table zeroed the generator's own intensity model must
    # be exactly recoverable: the analytic oracle scores Dice 1.0
    spec = dataclasses.replace(
        PhantomSpec.easy((16, 16, 16), num_classes=3, channels=2, seed=8),
        stds=(0.0, 0.0, 0.0))
    v = generate_phantom(spec, 0)
    pred = nearest_mean_labels(v.image, spec)
    for k in range(3):
        assert dice_score(pred, v.labels, k) == 1.0


def test_noisy_hard_tier_is_not_trivial():
    # the hard tier must keep per-voxel evidence weak: nearest-mean slips
    spec = PhantomSpec.hard((16, 16, 16), num_classes=3, channels=3, seed=3)
    v = generate_phantom(spec, 0)
    pred = nearest_mean_labels(v.image, spec)
    scores = [dice_score(pred, v.labels, k) for k in range(1, 3)]
    assert min(scores) < 0.97


def test_volume_validation():
    with pytest.raises(ShapeError):
        LabeledVolume(np.zeros((4, 4, 4), dtype=np.float32),
                      np.zeros((4, 4, 4), dtype=np.uint8))
    with pytest.raises(ShapeError):
        LabeledVolume(np.zeros((1, 4, 4, 4), dtype=np.float32),
                      np.zeros((4, 4, 5), dtype=np.uint8))
    with pytest.raises(ShapeError):
        PhantomSpec((12, 16, 16), 2)  # extents must be multiples of 8, >= 16


if __name__ == "__main__":
    regenerate()
