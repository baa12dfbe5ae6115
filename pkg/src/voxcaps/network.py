"""Full segmentation network: dilated stem, capsule encoder, conv decoder.

Three stages share one parameter store. The stem lifts the raw volume to a
feature volume with three dilated convolutions; the encoder stacks six
convolutional capsule layers, halving resolution after every second layer;
the decoder upsamples back with skip connections and emits voxel logits. A
small reconstruction branch off the last decoder feature regularizes
training, and the class-capsule lengths at the coarse grid feed the margin
objective.

Several architectural constants here are deliberate choices, not forced by
the math: encoder strides (1,2,1,2,1,2), skips taken from the grid entering
each stride-2 layer, and the reconstruction branch reading the final decoder
feature. They are called out in the README.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import capsules as caps
from .tensor import (
    BN_EPS,
    ConvSpec,
    GradPair,
    RunningStats,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    concat_backward,
    concat_forward,
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
    relu_backward,
    relu_forward,
    same_padding,
)

STEM_KERNEL = 5
STEM_MIN_EXTENT = 13    # receptive span of a 5-tap kernel at dilation 3
CAPS_INIT_TARGET = 1.2  # realized mean norm of first-iteration routed sums at init


@dataclass(frozen=True)
class ArchSpec:
    """Hyperparameters fixing every tensor shape in the network."""

    num_classes: int
    in_channels: int = 1
    stem_channels: tuple[int, int, int] = (16, 32, 64)
    stem_dilations: tuple[int, int, int] = (1, 3, 3)
    caps_types: tuple[int, ...] = ()        # last entry must equal num_classes
    caps_dims: tuple[int, ...] = ()
    caps_strides: tuple[int, ...] = (1, 2, 1, 2, 1, 2)
    routing_iterations: int = 3
    decoder_channels: tuple[int, ...] = (64, 32, 16)
    recon_hidden: int = 16
    use_stem: bool = True

    def __post_init__(self):
        if self.num_classes < 2:
            raise ShapeError("need at least 2 classes")
        if not self.caps_types:
            object.__setattr__(self, "caps_types", (16, 16, 16, 8, 8, self.num_classes))
        if not self.caps_dims:
            object.__setattr__(self, "caps_dims", (16,) * len(self.caps_types))
        if not (len(self.caps_types) == len(self.caps_dims) == len(self.caps_strides)):
            raise ShapeError("caps_types, caps_dims, caps_strides must align")
        if self.caps_types[-1] != self.num_classes:
            raise ShapeError(
                f"last capsule layer has {self.caps_types[-1]} types, "
                f"must equal num_classes={self.num_classes}")
        n_down = sum(1 for s in self.caps_strides if s == 2)
        if n_down != len(self.decoder_channels):
            raise ShapeError(
                f"{n_down} stride-2 encoder layers need {n_down} decoder stages, "
                f"got {len(self.decoder_channels)}")

    @classmethod
    def full(cls, num_classes: int, in_channels: int = 1) -> "ArchSpec":
        return cls(num_classes=num_classes, in_channels=in_channels)

    @classmethod
    def micro(cls, num_classes: int, in_channels: int = 1,
              first_types: int | None = None, use_stem: bool = True) -> "ArchSpec":
        """Full architecture with every width divided by 4; runs in seconds on CPU."""
        types = [4, 4, 4, 2, 2, num_classes]
        if first_types is not None:
            types[0] = first_types
        return cls(num_classes=num_classes, in_channels=in_channels,
                   stem_channels=(4, 8, 16), caps_types=tuple(types),
                   caps_dims=(4,) * 6, decoder_channels=(16, 8, 4),
                   recon_hidden=4, use_stem=use_stem)

    @property
    def entry_dim(self) -> int:
        """Capsule dimension of the single-type entry grid."""
        return self.stem_channels[-1] if self.use_stem else self.in_channels

    @property
    def downsample_factor(self) -> int:
        f = 1
        for s in self.caps_strides:
            f *= s
        return f


@dataclass
class NetOutput:
    """Forward results the objectives consume."""

    logits: np.ndarray    # [N, classes, H, W, D]
    lengths: np.ndarray   # [N, h, w, d, classes] at the coarse grid
    recon: np.ndarray     # [N, in_channels, H, W, D]


def _he_init(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class DilatedStem:
    """Three same-size dilated convolutions with ReLU, shared by both stages.

    Stands alone so the pretext stage can train it without building the rest
    of the network; the trained parameters transplant by name.
    """

    def __init__(self, in_channels: int, channels, dilations, rng,
                 dtype=np.float32, prefix: str = "stem"):
        self.dtype = dtype
        self.specs: list[ConvSpec] = []
        self.params: dict[str, GradPair] = {}
        self._names: list[tuple[str, str]] = []
        prev = in_channels
        for i, (ch, dil) in enumerate(zip(channels, dilations)):
            spec = ConvSpec(prev, ch, kernel=STEM_KERNEL, stride=1, dilation=dil,
                            padding=same_padding(STEM_KERNEL, dil))
            self.specs.append(spec)
            wn, bn = f"{prefix}.{i}.w", f"{prefix}.{i}.b"
            fan_in = prev * STEM_KERNEL ** 3
            self.params[wn] = GradPair.of(_he_init(
                rng, (ch, prev) + spec.kernel, fan_in, dtype))
            self.params[bn] = GradPair.of(np.zeros(ch, dtype=dtype))
            self._names.append((wn, bn))
            prev = ch
        self.out_channels = prev
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 5:
            raise ShapeError("stem input must be [N,C,H,W,D]")
        small = [e for e in x.shape[2:] if e < STEM_MIN_EXTENT]
        if small:
            raise ShapeError(
                f"spatial extents {x.shape[2:]} below the stem minimum of "
                f"{STEM_MIN_EXTENT} voxels per axis")
        steps = []
        h = x
        for spec, (wn, bn) in zip(self.specs, self._names):
            pre = conv3d_forward(h, self.params[wn].value, self.params[bn].value, spec)
            steps.append((h, pre))
            h = relu_forward(pre)
        self._cache = steps
        return h

    def backward(self, g_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before forward")
        g = g_out
        for spec, (wn, bn), (h_in, pre) in zip(
                reversed(self.specs), reversed(self._names), reversed(self._cache)):
            g = relu_backward(g, pre)
            g, gw, gb = conv3d_backward(g, h_in, self.params[wn].value, spec)
            self.params[wn].grad += gw
            self.params[bn].grad += gb
        return g

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def named_params(self):
        return sorted(self.params.items())


class CapsSegNet:
    """The assembled network; owns parameters, caches, and batch-norm state."""

    def __init__(self, arch: ArchSpec, seed: int = 0, dtype=np.float32):
        self.arch = arch
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict[str, GradPair] = {}
        self.bn_stats: dict[str, RunningStats] = {}

        self.stem = None
        if arch.use_stem:
            self.stem = DilatedStem(arch.in_channels, arch.stem_channels,
                                    arch.stem_dilations, rng, dtype)
            self.params.update(self.stem.params)

        # encoder: entry grid is 1 type of dimension entry_dim
        self.caps_specs: list[caps.CapsConvSpec] = []
        prev_t, prev_d = 1, arch.entry_dim
        for i, (t, d, s) in enumerate(zip(arch.caps_types, arch.caps_dims,
                                          arch.caps_strides)):
            spec = caps.CapsConvSpec(prev_t, prev_d, t, d, kernel=3, stride=s,
                                     padding=1,
                                     routing_iterations=arch.routing_iterations)
            self.caps_specs.append(spec)
            ch = prev_t * 27
            sigma = 2.0 * t / np.sqrt(ch * d)
            self.params[f"caps.{i}.w"] = GradPair.of(
                (rng.standard_normal(caps.caps_weight_shape(spec))
                 * sigma).astype(dtype))
            prev_t, prev_d = t, d
        self.skip_layers = [i for i, s in enumerate(arch.caps_strides) if s == 2]

        # decoder: grids entering each stride-2 layer come back as skips,
        # finest last, so stages consume them in reverse
        skip_ch = []
        tdims = [(1, arch.entry_dim)] + list(zip(arch.caps_types, arch.caps_dims))
        for li in self.skip_layers:
            t, d = tdims[li]
            skip_ch.append(t * d)
        self.dec_specs = []
        prev_ch = arch.caps_types[-1] * arch.caps_dims[-1]
        for si, ch in enumerate(arch.decoder_channels):
            up = ConvSpec(prev_ch, ch, kernel=2, stride=2, padding=0)
            sk = skip_ch[len(skip_ch) - 1 - si]
            cv = ConvSpec(ch + sk, ch, kernel=3, stride=1, padding=1)
            self.dec_specs.append((up, cv, sk))
            self.params[f"dec.{si}.up.w"] = GradPair.of(_he_init(
                rng, (prev_ch, ch) + up.kernel, prev_ch, dtype))
            self.params[f"dec.{si}.up.b"] = GradPair.of(np.zeros(ch, dtype=dtype))
            self.params[f"dec.{si}.conv.w"] = GradPair.of(_he_init(
                rng, (ch, ch + sk) + cv.kernel, (ch + sk) * 27, dtype))
            self.params[f"dec.{si}.conv.b"] = GradPair.of(np.zeros(ch, dtype=dtype))
            self.params[f"dec.{si}.bn.gamma"] = GradPair.of(np.ones(ch, dtype=dtype))
            self.params[f"dec.{si}.bn.beta"] = GradPair.of(np.zeros(ch, dtype=dtype))
            self.bn_stats[f"dec.{si}.bn"] = RunningStats.for_channels(ch, dtype)
            prev_ch = ch

        self.head_spec = ConvSpec(prev_ch, arch.num_classes, kernel=1)
        self.params["head.w"] = GradPair.of(_he_init(
            rng, (arch.num_classes, prev_ch, 1, 1, 1), prev_ch, dtype))
        self.params["head.b"] = GradPair.of(np.zeros(arch.num_classes, dtype=dtype))

        self.rec_specs = (ConvSpec(prev_ch, arch.recon_hidden, kernel=1),
                          ConvSpec(arch.recon_hidden, arch.in_channels, kernel=1))
        self.params["recon.0.w"] = GradPair.of(_he_init(
            rng, (arch.recon_hidden, prev_ch, 1, 1, 1), prev_ch, dtype))
        # slightly positive so voxels whose decoder features are all zero do
        # not sit exactly on this layer's relu kink
        self.params["recon.0.b"] = GradPair.of(
            np.full(arch.recon_hidden, 0.01, dtype=dtype))
        self.params["recon.1.w"] = GradPair.of(_he_init(
            rng, (arch.in_channels, arch.recon_hidden, 1, 1, 1),
            arch.recon_hidden, dtype))
        self.params["recon.1.b"] = GradPair.of(np.zeros(arch.in_channels, dtype=dtype))

        self._cache = None
        self._calibrate_caps_scales(rng)

    def _calibrate_caps_scales(self, rng, sample: np.ndarray | None = None):
        """Rescale capsule weights so routed sums start near CAPS_INIT_TARGET.

        The norm cascade through squash is unstable to the init scale: too
        small and norms collapse doubly-exponentially (squash is quadratic near
        zero), too large and they saturate. A probe forward pins the realized
        scale layer by layer; the first routing iteration is linear in the
        weights, so one multiplicative correction is exact. Calibrating
        against a data sample instead of unit noise matches the scale the
        network will actually see.
        """
        if sample is None:
            probe = rng.standard_normal(
                (1, self.arch.in_channels, 16, 16, 16)).astype(self.dtype)
        else:
            probe = np.asarray(sample, dtype=self.dtype)
            if probe.ndim == 4:
                probe = probe[None]
            e = min(16, min(probe.shape[2:]))
            probe = probe[:1, :, :e, :e, :e]
        feat = self.stem.forward(probe) if self.stem is not None else probe
        grid = caps.squash(np.moveaxis(feat, 1, -1)[..., None, :])
        for i, spec in enumerate(self.caps_specs):
            w = self.params[f"caps.{i}.w"]
            _, cache = caps.caps_conv3d_forward(grid, w.value, spec)
            s1 = cache.route_cache[0][1]
            mean_norm = float(np.sqrt((s1 * s1).sum(-1)).mean())
            w.value *= CAPS_INIT_TARGET / max(mean_norm, 1e-12)
            grid, _ = caps.caps_conv3d_forward(grid, w.value, spec)
        if self.stem is not None:
            self.stem._cache = None

    def recalibrate_caps(self, seed: int = 0, sample: np.ndarray | None = None):
        """Re-run the capsule scale calibration against the current stem.

        Needed after transplanting pretrained stem parameters or before
        training on data whose scale differs from the unit-noise probe used
        at construction; the routed-sum scale must stay in the stable band
        either way. ``sample`` is a representative [C,H,W,D] volume.
        """
        self._calibrate_caps_scales(np.random.default_rng(seed), sample)

    # -- forward ------------------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "train") -> NetOutput:
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 5 or x.shape[1] != self.arch.in_channels:
            raise ShapeError(
                f"input must be [N,{self.arch.in_channels},H,W,D], got {x.shape}")
        f = self.arch.downsample_factor
        for ax, e in enumerate(x.shape[2:]):
            if e % f != 0:
                raise ShapeError(
                    f"axis {ax}: extent {e} not divisible by the encoder "
                    f"downsampling factor {f}")

        feat = self.stem.forward(x) if self.stem is not None else x
        entry_raw = np.moveaxis(feat, 1, -1)[..., None, :]   # [N,H,W,D,1,A]
        # squashed so every capsule layer sees inputs of norm < 1, keeping the
        # init scale analysis valid at the entry too
        entry = caps.squash(entry_raw)
        grids = [entry]
        caps_caches = []
        for i, spec in enumerate(self.caps_specs):
            out, cc = caps.caps_conv3d_forward(
                grids[-1], self.params[f"caps.{i}.w"].value, spec)
            caps_caches.append(cc)
            grids.append(out)
        final = grids[-1]

        h = caps._grid_to_channels(final)
        dec_steps = []
        for si, (up, cv, sk_ch) in enumerate(self.dec_specs):
            skip_grid = grids[self.skip_layers[len(self.dec_specs) - 1 - si]]
            h_up = deconv3d_forward(h, self.params[f"dec.{si}.up.w"].value,
                                    self.params[f"dec.{si}.up.b"].value, up)
            sk_t = caps._grid_to_channels(skip_grid)
            if sk_t.shape[2:] != h_up.shape[2:]:
                raise ShapeError(
                    f"decoder stage {si}: skip extents {sk_t.shape[2:]} do not "
                    f"match upsampled extents {h_up.shape[2:]}")
            cat = concat_forward([h_up, sk_t], axis=1)
            conv_out = conv3d_forward(cat, self.params[f"dec.{si}.conv.w"].value,
                                      self.params[f"dec.{si}.conv.b"].value, cv)
            bn_out = batchnorm_forward(conv_out,
                                       self.params[f"dec.{si}.bn.gamma"].value,
                                       self.params[f"dec.{si}.bn.beta"].value,
                                       self.bn_stats[f"dec.{si}.bn"], mode)
            dec_steps.append((h, cat, conv_out, bn_out, h_up.shape[1]))
            h = relu_forward(bn_out)

        logits = conv3d_forward(h, self.params["head.w"].value,
                                self.params["head.b"].value, self.head_spec)
        r_pre = conv3d_forward(h, self.params["recon.0.w"].value,
                               self.params["recon.0.b"].value, self.rec_specs[0])
        r_act = relu_forward(r_pre)
        recon = conv3d_forward(r_act, self.params["recon.1.w"].value,
                               self.params["recon.1.b"].value, self.rec_specs[1])
        lengths = caps.capsule_lengths(final)

        self._cache = dict(mode=mode, grids=grids, caps_caches=caps_caches,
                           dec_steps=dec_steps, feat_final=h, r_pre=r_pre,
                           r_act=r_act, entry_raw=entry_raw)
        return NetOutput(logits, lengths, recon)

    # -- backward -----------------------------------------------------------

    def backward(self, g_logits: np.ndarray, g_lengths: np.ndarray,
                 g_recon: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient."""
        c = self._cache
        if c is None:
            raise RuntimeError("backward before forward")
        if c["mode"] != "train":
            raise RuntimeError("backward requires a train-mode forward pass")
        grids = c["grids"]
        feat = c["feat_final"]

        g_ract, gw, gb = conv3d_backward(g_recon, c["r_act"],
                                         self.params["recon.1.w"].value,
                                         self.rec_specs[1])
        self.params["recon.1.w"].grad += gw
        self.params["recon.1.b"].grad += gb
        g_rpre = relu_backward(g_ract, c["r_pre"])
        g_feat, gw, gb = conv3d_backward(g_rpre, feat,
                                         self.params["recon.0.w"].value,
                                         self.rec_specs[0])
        self.params["recon.0.w"].grad += gw
        self.params["recon.0.b"].grad += gb

        gx, gw, gb = conv3d_backward(g_logits, feat, self.params["head.w"].value,
                                     self.head_spec)
        g_feat = g_feat + gx
        self.params["head.w"].grad += gw
        self.params["head.b"].grad += gb

        g_grids = [None] * len(grids)
        g_h = g_feat
        for si in range(len(self.dec_specs) - 1, -1, -1):
            up, cv, sk_ch = self.dec_specs[si]
            h_in, cat, conv_out, bn_out, up_ch = c["dec_steps"][si]
            g_bn = relu_backward(g_h, bn_out)
            g_conv, g_gamma, g_beta = batchnorm_backward(
                g_bn, conv_out, self.params[f"dec.{si}.bn.gamma"].value)
            self.params[f"dec.{si}.bn.gamma"].grad += g_gamma
            self.params[f"dec.{si}.bn.beta"].grad += g_beta
            g_cat, gw, gb = conv3d_backward(g_conv, cat,
                                            self.params[f"dec.{si}.conv.w"].value, cv)
            self.params[f"dec.{si}.conv.w"].grad += gw
            self.params[f"dec.{si}.conv.b"].grad += gb
            g_up, g_skip = concat_backward(g_cat, [up_ch, sk_ch], axis=1)
            li = self.skip_layers[len(self.dec_specs) - 1 - si]
            t, d = grids[li].shape[4], grids[li].shape[5]
            g_sg = caps._channels_to_grid(np.ascontiguousarray(g_skip), t, d)
            g_grids[li] = g_sg if g_grids[li] is None else g_grids[li] + g_sg
            g_h, gw, gb = deconv3d_backward(g_up, h_in,
                                            self.params[f"dec.{si}.up.w"].value, up)
            self.params[f"dec.{si}.up.w"].grad += gw
            self.params[f"dec.{si}.up.b"].grad += gb

        final = grids[-1]
        g_final = caps._channels_to_grid(g_h, final.shape[4], final.shape[5])
        g_final = g_final + caps.capsule_lengths_backward(g_lengths, final)
        g_grids[-1] = g_final if g_grids[-1] is None else g_grids[-1] + g_final

        for i in range(len(self.caps_specs) - 1, -1, -1):
            g_in, g_w = caps.caps_conv3d_backward(g_grids[i + 1], c["caps_caches"][i])
            self.params[f"caps.{i}.w"].grad += g_w
            g_grids[i] = g_in if g_grids[i] is None else g_grids[i] + g_in

        g_entry_raw = caps.squash_backward(g_grids[0], c["entry_raw"])
        g_feat_in = np.moveaxis(g_entry_raw[..., 0, :], -1, 1)
        if self.stem is not None:
            return self.stem.backward(np.ascontiguousarray(g_feat_in))
        return g_feat_in

    # -- parameter plumbing -------------------------------------------------

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def named_params(self):
        return sorted(self.params.items())

    def param_count(self) -> int:
        return sum(p.value.size for _, p in self.named_params())

    def state_entries(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, by stable name."""
        out = {name: p.value for name, p in self.named_params()}
        for name in sorted(self.bn_stats):
            out[f"{name}.running_mean"] = self.bn_stats[name].mean
            out[f"{name}.running_var"] = self.bn_stats[name].var
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray],
                           strict: bool = True) -> list[str]:
        """Copy matching entries into the network; returns the names loaded."""
        own = self.state_entries()
        loaded = []
        for name, arr in entries.items():
            if name not in own:
                if strict:
                    raise KeyError(f"checkpoint entry {name!r} not in network")
                continue
            if tuple(arr.shape) != tuple(own[name].shape):
                raise ShapeError(
                    f"{name}: checkpoint shape {arr.shape} != {own[name].shape}")
            own[name][...] = arr.astype(self.dtype)
            loaded.append(name)
        if strict:
            missing = set(own) - set(entries)
            if missing:
                raise KeyError(f"checkpoint missing entries: {sorted(missing)}")
        return loaded


# ---------------------------------------------------------------------------
# Checkpoint container: versioned manifest + little-endian float32 payloads.
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"VXCAPS01"


def save_checkpoint(path, entries: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays with a JSON manifest; payloads are float32 LE."""
    names = sorted(entries)
    manifest = {
        "format_version": 1,
        "meta": meta or {},
        "entries": [{"name": n, "shape": list(entries[n].shape)} for n in names],
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        for n in names:
            f.write(np.ascontiguousarray(entries[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back; returns (entries, meta)."""
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (mlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        if manifest.get("format_version") != 1:
            raise ValueError(f"unsupported format version {manifest.get('format_version')}")
        entries = {}
        for rec in manifest["entries"]:
            shape = tuple(rec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(
                    f"payload truncated at entry {rec['name']!r}: "
                    f"expected {count * 4} bytes, got {len(buf)}")
            entries[rec["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
        extra = f.read(1)
        if extra:
            raise ValueError("trailing bytes after final payload")
    return entries, manifest["meta"]


def stem_entries(net_or_stem) -> dict[str, np.ndarray]:
    """The stem's slice of a state dict, for pretext-stage transplants."""
    src = net_or_stem.params if hasattr(net_or_stem, "params") else net_or_stem
    return {n: p.value for n, p in src.items() if n.startswith("stem.")}
