"""Labeled-volume I/O and synthetic phantom generation.

Experiments run on generated phantoms so nothing external is required: each
volume is a labeled arrangement of simple solids (spheres, shells, tubes)
with per-class intensities plus Gaussian noise. Class geometry is recoverable
by construction: classifying a noiseless image by nearest class mean
reproduces the labels exactly, which pins the generator's self-consistency.

On-disk format is deliberately minimal: a text header naming shapes, dtypes
and payload files; a raw little-endian float32 image; a raw uint8 label
volume. A manifest file lists volume ids per split.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, as_f32

HEADER_SUFFIX = ".hdr"
IMAGE_SUFFIX = ".img"
LABEL_SUFFIX = ".lbl"
FORMAT_TAG = "voxvol 1"
IMAGE_DTYPE_TAG = "float32-le"
LABEL_DTYPE_TAG = "uint8"

SHAPE_FAMILIES = ("sphere", "shell", "tube")


@dataclass
class LabeledVolume:
    """One segmentation example: multi-channel image plus dense class labels."""

    image: np.ndarray                  # [C, H, W, D] float32
    labels: np.ndarray                 # [H, W, D] uint8
    spacing: tuple = (1.0, 1.0, 1.0)   # mm, informational
    volume_id: str = "vol"

    def __post_init__(self):
        self.image = as_f32(self.image)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.image.ndim != 4:
            raise ShapeError(f"image must be [C,H,W,D], got rank {self.image.ndim}")
        if self.image.shape[1:] != self.labels.shape:
            raise ShapeError(
                f"image extents {self.image.shape[1:]} != labels {self.labels.shape}")

    @property
    def channels(self) -> int:
        return self.image.shape[0]

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.labels.shape


# ---------------------------------------------------------------------------
# File format.
# ---------------------------------------------------------------------------

def write_volume(v: LabeledVolume, directory: str) -> str:
    """Write header + payloads under ``directory``; returns the header path."""
    os.makedirs(directory, exist_ok=True)
    base = v.volume_id
    header = os.path.join(directory, base + HEADER_SUFFIX)
    lines = [
        f"format: {FORMAT_TAG}",
        f"id: {base}",
        "shape: " + " ".join(str(e) for e in v.extents),
        f"channels: {v.channels}",
        "spacing_mm: " + " ".join(f"{s:g}" for s in v.spacing),
        f"image_dtype: {IMAGE_DTYPE_TAG}",
        f"label_dtype: {LABEL_DTYPE_TAG}",
        f"image_file: {base}{IMAGE_SUFFIX}",
        f"label_file: {base}{LABEL_SUFFIX}",
    ]
    with open(header, "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(os.path.join(directory, base + IMAGE_SUFFIX), "wb") as f:
        f.write(np.ascontiguousarray(v.image, dtype="<f4").tobytes())
    with open(os.path.join(directory, base + LABEL_SUFFIX), "wb") as f:
        f.write(v.labels.tobytes())
    return header


def _parse_header(path: str) -> dict:
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition(":")
            if not _:
                raise ValueError(f"{path}: malformed header line {line!r}")
            fields[key.strip()] = val.strip()
    return fields


def read_volume(header_path: str) -> LabeledVolume:
    fields = _parse_header(header_path)
    if fields.get("format") != FORMAT_TAG:
        raise ValueError(f"{header_path}: unknown format {fields.get('format')!r}")
    if fields.get("image_dtype") != IMAGE_DTYPE_TAG:
        raise ValueError(f"{header_path}: unknown image dtype tag "
                         f"{fields.get('image_dtype')!r}")
    if fields.get("label_dtype") != LABEL_DTYPE_TAG:
        raise ValueError(f"{header_path}: unknown label dtype tag "
                         f"{fields.get('label_dtype')!r}")
    shape = tuple(int(t) for t in fields["shape"].split())
    channels = int(fields["channels"])
    spacing = tuple(float(t) for t in fields["spacing_mm"].split())
    directory = os.path.dirname(header_path)

    img_path = os.path.join(directory, fields["image_file"])
    with open(img_path, "rb") as f:
        raw = f.read()
    expect = channels * int(np.prod(shape)) * 4
    if len(raw) != expect:
        raise ValueError(
            f"{img_path}: image payload is {len(raw)} bytes, header implies {expect}")
    image = np.frombuffer(raw, dtype="<f4").reshape((channels,) + shape).copy()

    lbl_path = os.path.join(directory, fields["label_file"])
    with open(lbl_path, "rb") as f:
        raw = f.read()
    expect = int(np.prod(shape))
    if len(raw) != expect:
        raise ValueError(
            f"{lbl_path}: label payload is {len(raw)} bytes, header implies {expect}")
    labels = np.frombuffer(raw, dtype=np.uint8).reshape(shape).copy()
    return LabeledVolume(image, labels, spacing, fields["id"])


MANIFEST_NAME = "manifest.txt"


def write_manifest(directory: str, splits: dict[str, list[str]]):
    """Lines of "<split>\\t<volume id>", one per volume, split order stable."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), "w") as f:
        for split in sorted(splits):
            for vid in splits[split]:
                f.write(f"{split}\t{vid}\n")


def read_manifest(directory: str) -> dict[str, list[str]]:
    path = os.path.join(directory, MANIFEST_NAME)
    splits: dict[str, list[str]] = {}
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            split, _, vid = line.partition("\t")
            if not vid:
                raise ValueError(f"{path}: malformed manifest line {line!r}")
            splits.setdefault(split, []).append(vid)
    return splits


def load_dataset(directory: str, split: str = "all") -> list[LabeledVolume]:
    ids = read_manifest(directory).get(split)
    if ids is None:
        raise ValueError(f"no split {split!r} in {directory}")
    return [read_volume(os.path.join(directory, vid + HEADER_SUFFIX)) for vid in ids]


# ---------------------------------------------------------------------------
# Phantom generation.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a family of random labeled volumes.

    ``means[k][c]`` is the noiseless intensity of class k in channel c;
    distinct per-class means make geometry recoverable by nearest-mean
    classification. ``families`` assigns one solid family per foreground
    class. The hard tier narrows the intensity gaps and thins the shell
    walls so there is headroom for pretraining to matter.
    """

    extents: tuple[int, int, int]
    num_classes: int
    channels: int = 3
    families: tuple[str, ...] = ()
    means: tuple = ()
    stds: tuple = ()
    thin_shells: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("need at least background + 1 class")
        for e in self.extents:
            if e < 16 or e % 8 != 0:
                raise ShapeError(
                    f"extents must be multiples of 8 and >= 16, got {self.extents}")
        if not self.families:
            fams = tuple(SHAPE_FAMILIES[k % len(SHAPE_FAMILIES)]
                         for k in range(self.num_classes - 1))
            object.__setattr__(self, "families", fams)
        for fam in self.families:
            if fam not in SHAPE_FAMILIES:
                raise ValueError(f"unknown shape family {fam!r}")

    @classmethod
    def easy(cls, extents, num_classes: int, channels: int = 3,
             seed: int = 0) -> "PhantomSpec":
        """Well-separated class intensities, solid geometry."""
        base = np.linspace(0.2, 1.0, num_classes)
        return cls(extents=tuple(extents), num_classes=num_classes,
                   channels=channels, means=_mean_table(base, channels),
                   stds=(0.06,) * num_classes, thin_shells=False, seed=seed)

    @classmethod
    def hard(cls, extents, num_classes: int, channels: int = 3,
             seed: int = 0) -> "PhantomSpec":
        """Overlapping noisy intensities and thin shell walls.

        Intensity gaps sit near twice the noise std, so per-voxel evidence
        is weak but learnable; geometry stays resolvable at small extents.
        """
        base = np.linspace(0.30, 0.70, num_classes)
        return cls(extents=tuple(extents), num_classes=num_classes,
                   channels=channels, means=_mean_table(base, channels),
                   stds=(0.11,) * num_classes, thin_shells=True, seed=seed)

    def mean_table(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)

    def std_table(self) -> np.ndarray:
        return np.asarray(self.stds, dtype=np.float64)


def _mean_table(base, channels: int) -> tuple:
    # small per-channel tilt so channels are correlated but not identical
    delta = np.linspace(-0.04, 0.04, channels)
    return tuple(tuple(float(b + d) for d in delta) for b in base)


def _rasterize(family: str, labels: np.ndarray, cls: int, rng,
               thin_shells: bool):
    """Stamp one random instance of a solid family into the label volume."""
    h, w, d = labels.shape
    m = min(h, w, d)
    zz, yy, xx = np.ogrid[:h, :w, :d]
    r = rng.uniform(0.12, 0.2) * m
    if family == "sphere":
        c = [rng.uniform(r, e - r) for e in (h, w, d)]
        sq = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        labels[sq <= r * r] = cls
    elif family == "shell":
        r = rng.uniform(0.16, 0.24) * m
        c = [rng.uniform(r, e - r) for e in (h, w, d)]
        wall = rng.uniform(1.0, 1.6) if thin_shells else rng.uniform(2.5, 3.5)
        sq = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        labels[(sq <= r * r) & (sq > (r - wall) ** 2)] = cls
    elif family == "tube":
        axis = int(rng.integers(0, 3))
        rad = rng.uniform(0.08, 0.14) * m
        coords = [zz, yy, xx]
        ext = (h, w, d)
        perp = [a for a in range(3) if a != axis]
        c = [rng.uniform(rad, ext[a] - rad) for a in perp]
        lo = int(rng.uniform(0, 0.25) * ext[axis])
        hi = int(rng.uniform(0.75, 1.0) * ext[axis])
        sq = (coords[perp[0]] - c[0]) ** 2 + (coords[perp[1]] - c[1]) ** 2
        span = (coords[axis] >= lo) & (coords[axis] < hi)
        labels[(sq <= rad * rad) & span] = cls
    else:
        raise ValueError(f"unknown shape family {family!r}")


def generate_phantom(spec: PhantomSpec, index: int) -> LabeledVolume:
    """Volume ``index`` of the family; independent of how many others exist."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    labels = np.zeros(spec.extents, dtype=np.uint8)
    for k in range(1, spec.num_classes):
        for _ in range(int(rng.integers(1, 3))):
            _rasterize(spec.families[k - 1], labels, k, rng, spec.thin_shells)
    # later stamps overwrite earlier classes; repair until everyone is present
    for _ in range(4):
        missing = [k for k in range(1, spec.num_classes) if not (labels == k).any()]
        if not missing:
            break
        for k in missing:
            _rasterize(spec.families[k - 1], labels, k, rng, spec.thin_shells)
    else:
        raise RuntimeError(
            f"could not place all classes in volume {index} (seed {spec.seed})")

    means = spec.mean_table()
    stds = spec.std_table()
    clean = means.T[:, labels]                          # [C, H, W, D]
    noise = rng.standard_normal((spec.channels,) + spec.extents)
    image = clean + noise * stds[labels]
    return LabeledVolume(as_f32(image), labels,
                         volume_id=f"vol_{index:03d}")


def generate_phantoms(spec: PhantomSpec, count: int) -> list[LabeledVolume]:
    return [generate_phantom(spec, i) for i in range(count)]


def nearest_mean_labels(image: np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Classify voxels by nearest class-mean vector; exact on noiseless images."""
    means = spec.mean_table()                           # [K, C]
    img = np.asarray(image, dtype=np.float64)
    dists = ((img[None] - means[:, :, None, None, None]) ** 2).sum(axis=1)
    return dists.argmin(axis=0).astype(np.uint8)
