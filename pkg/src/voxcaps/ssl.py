"""Self-supervised pretraining of the stem on transformed volume pairs.

Seven transformations (the first is identity) produce two random views of a
volume; the stem is trained to give both views the same features by
minimizing the Euclidean distance between its outputs. Only stem parameters
are optimized; afterwards they are transplanted into the full network by
name.

The objective admits a degenerate solution: a stem mapping every input to a
constant scores zero on all pairs. Training does not prevent this; it makes
it observable. Every step records the feature variance over a fixed probe
batch and flags collapse when it falls below threshold.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from .losses import pretext_loss, pretext_loss_backward
from .network import DilatedStem
from .tensor import ShapeError

NUM_TRANSFORMS = 7
COLLAPSE_THRESHOLD = 1e-6


@dataclass(frozen=True)
class TransformSpec:
    """One deterministic volume transformation.

    kinds: identity | zero_channel(channel) | swap_patches(count, size, seed)
    | blur(sigma) | noise(sigma, seed). Noise sigma is relative to the
    input's intensity std so one spec serves volumes of any scale.
    """

    kind: str
    channel: int = 0
    count: int = 0
    size: int = 0
    sigma: float = 0.0
    seed: int = 0

    def describe(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "zero_channel":
            return f"zero_channel({self.channel})"
        if self.kind == "swap_patches":
            return f"swap_patches({self.count}x{self.size}, seed={self.seed})"
        if self.kind == "blur":
            return f"blur(sigma={self.sigma})"
        if self.kind == "noise":
            return f"noise(sigma={self.sigma}, seed={self.seed})"
        return self.kind


def default_transforms(channels: int, extents, seed: int = 0) -> list[TransformSpec]:
    """The seven-entry set: identity first, then three zero-channel slots
    (cycling the available channels), patch swapping, blur, and noise."""
    size = max(1, min(extents) // 4)
    return [
        TransformSpec("identity"),
        TransformSpec("zero_channel", channel=0 % channels),
        TransformSpec("zero_channel", channel=1 % channels),
        TransformSpec("zero_channel", channel=2 % channels),
        TransformSpec("swap_patches", count=4, size=size, seed=seed),
        TransformSpec("blur", sigma=1.5),
        TransformSpec("noise", sigma=0.1, seed=seed + 1),
    ]


def _swap_pairs(shape, count: int, size: int, seed: int):
    """Deterministic disjoint patch-pair corners. Same spec, same pairs."""
    rng = np.random.default_rng(seed)
    chosen: list[tuple[int, int, int]] = []
    attempts = 0
    while len(chosen) < 2 * count:
        if attempts > 500:
            raise RuntimeError(
                f"cannot place {2 * count} disjoint {size}^3 patches in {shape}")
        attempts += 1
        corner = tuple(int(rng.integers(0, e - size + 1)) for e in shape)
        if all(any(abs(corner[a] - c[a]) >= size for a in range(3))
               for c in chosen):
            chosen.append(corner)
    return [(chosen[2 * i], chosen[2 * i + 1]) for i in range(count)]


def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def apply_transform(v: np.ndarray, t: TransformSpec) -> np.ndarray:
    """Transform a [C,H,W,D] volume; output shape always equals input shape."""
    if v.ndim != 4:
        raise ShapeError(f"expected [C,H,W,D], got rank {v.ndim}")
    if t.kind == "identity":
        return v.copy()
    if t.kind == "zero_channel":
        if not 0 <= t.channel < v.shape[0]:
            raise ShapeError(
                f"channel {t.channel} out of range for {v.shape[0]} channels")
        out = v.copy()
        out[t.channel] = 0.0
        return out
    if t.kind == "swap_patches":
        if t.size > min(v.shape[1:]):
            raise ShapeError(
                f"patch edge {t.size} exceeds volume extents {v.shape[1:]}")
        out = v.copy()
        for (a, b) in _swap_pairs(v.shape[1:], t.count, t.size, t.seed):
            sa = (slice(None),) + tuple(slice(c, c + t.size) for c in a)
            sb = (slice(None),) + tuple(slice(c, c + t.size) for c in b)
            tmp = out[sa].copy()
            out[sa] = out[sb]
            out[sb] = tmp
        return out
    if t.kind == "blur":
        k = _gauss_kernel(t.sigma).astype(v.dtype)
        out = v
        for axis in (1, 2, 3):
            out = convolve1d(out, k, axis=axis, mode="nearest")
        return out
    if t.kind == "noise":
        rng = np.random.default_rng(t.seed)
        scale = t.sigma * float(v.std())
        return v + (rng.standard_normal(v.shape) * scale).astype(v.dtype)
    raise ValueError(f"unknown transform kind {t.kind!r}")


def sample_transform_pair(rng, transforms) -> tuple[int, int, TransformSpec, TransformSpec]:
    """Two independent uniform draws (repeats allowed); seed-bearing
    transforms get fresh sub-seeds so successive draws differ while the
    whole sequence stays reproducible from the caller's rng."""
    i = int(rng.integers(0, len(transforms)))
    j = int(rng.integers(0, len(transforms)))

    def freshen(t: TransformSpec) -> TransformSpec:
        if t.kind in ("swap_patches", "noise"):
            return dataclasses.replace(t, seed=int(rng.integers(0, 2 ** 31)))
        return t

    return i, j, freshen(transforms[i]), freshen(transforms[j])


def collapse_monitor(features: np.ndarray,
                     threshold: float = COLLAPSE_THRESHOLD) -> tuple[float, bool]:
    """Mean per-element variance across a probe batch; near-zero means the
    stem is ignoring its input."""
    if features.shape[0] < 2:
        raise ShapeError("collapse probe needs a batch of >= 2 volumes")
    var = float(features.var(axis=0).mean())
    return var, var < threshold


@dataclass
class PretextBatchRecord:
    step: int
    i: int
    j: int
    loss: float
    variance: float
    collapsed: bool


@dataclass
class PretrainConfig:
    """The objective has a trivial all-constant minimum, so the defaults stay
    well below the collapse regime and ``variance_floor`` stops optimization
    once the probe variance has eroded to that fraction of its starting
    value. Set the floor to 0 to always run the full step budget."""

    steps: int = 100
    learning_rate: float = 3e-5
    seed: int = 0
    variance_floor: float = 0.8

    def __post_init__(self):
        if self.steps < 1 or self.learning_rate <= 0:
            raise ValueError("steps must be >= 1 and learning_rate > 0")
        if not 0 <= self.variance_floor < 1:
            raise ValueError("variance_floor must be in [0, 1)")


def pretrain(volumes, stem: DilatedStem, config: PretrainConfig):
    """Optimize the stem on random transform pairs; returns the history.

    ``volumes`` may be labeled volumes or raw [C,H,W,D] arrays; labels are
    ignored. The stem is updated in place. Raises on a non-finite loss with
    the offending batch recorded as the last history entry.
    """
    from .training import Adam   # late import: training pulls in no ssl-stage code

    images = [np.asarray(getattr(v, "image", v), dtype=stem.dtype) for v in volumes]
    if not images:
        raise ValueError("need at least one volume")
    channels = images[0].shape[0]
    transforms = default_transforms(channels, images[0].shape[1:], seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = Adam()

    # fixed probe pair for the collapse monitor: two distinct inputs (center
    # crops keep the probe cheap), or two distinct views when only one volume
    # exists
    def center_crop(img):
        e = min(16, min(img.shape[1:]))
        c = [(s - e) // 2 for s in img.shape[1:]]
        return img[:, c[0]:c[0] + e, c[1]:c[1] + e, c[2]:c[2] + e]

    if len(images) >= 2:
        probe = np.stack([center_crop(images[0]), center_crop(images[1])])
    else:
        one = center_crop(images[0])
        probe = np.stack([one, apply_transform(one, transforms[5])])

    start_variance = collapse_monitor(stem.forward(probe))[0]

    history: list[PretextBatchRecord] = []
    for step in range(config.steps):
        vol = images[int(rng.integers(0, len(images)))]
        i, j, ti, tj = sample_transform_pair(rng, transforms)
        pair = np.stack([apply_transform(vol, ti), apply_transform(vol, tj)])
        feats = stem.forward(pair)
        loss = pretext_loss(feats[0], feats[1])
        if np.isfinite(loss):
            g_a, g_b = pretext_loss_backward(feats[0], feats[1])
            stem.zero_grad()
            stem.backward(np.stack([g_a, g_b]))
            opt.step(stem.named_params(), config.learning_rate)

        # the probe forward runs after backward because it reuses the caches
        variance, collapsed = collapse_monitor(stem.forward(probe))
        history.append(PretextBatchRecord(step, i, j, loss, variance, collapsed))
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite pretext loss at step {step} "
                f"(transforms {ti.describe()} / {tj.describe()}); "
                "history preserved up to the offending batch")
        if variance < config.variance_floor * start_variance:
            break
    return history


def write_pretext_log(path: str, history) -> None:
    with open(path, "w") as f:
        f.write("step\ti\tj\tloss\tvariance\tcollapsed\n")
        for r in history:
            f.write(f"{r.step}\t{r.i}\t{r.j}\t{r.loss:.8e}\t"
                    f"{r.variance:.8e}\t{int(r.collapsed)}\n")


def read_pretext_log(path: str) -> list[PretextBatchRecord]:
    out = []
    with open(path) as f:
        header = f.readline()
        if not header.startswith("step\t"):
            raise ValueError(f"{path}: not a pretext log")
        for line in f:
            s, i, j, loss, var, flag = line.rstrip("\n").split("\t")
            out.append(PretextBatchRecord(int(s), int(i), int(j), float(loss),
                                          float(var), bool(int(flag))))
    return out
