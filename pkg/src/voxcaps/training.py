"""Downstream optimization: Adam, LR plateau scheduling, patch sampling and
stitching, segmentation metrics, the training loop, and the k-fold and
ablation harnesses."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .losses import LossBreakdown, downstream_terms
from .network import ArchSpec, CapsSegNet, DilatedStem, stem_entries


class Adam:
    """Moment-tracked SGD with bias correction. A step whose gradients are
    not all finite is skipped whole and counted, never written into the
    moments."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.skipped = 0

    def step(self, named_params, lr: float) -> bool:
        pairs = list(named_params)
        if not all(np.isfinite(gp.grad).all() for _, gp in pairs):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, gp in pairs:
            if name not in self.moments:
                self.moments[name] = (np.zeros_like(gp.value),
                                      np.zeros_like(gp.value))
            m, v = self.moments[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * gp.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * gp.grad ** 2
            gp.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


class PlateauScheduler:
    """Cut the learning rate by `factor` when the watched score has not
    improved for `patience` iterations, at most once per window: after a
    cut the counter restarts, so two cuts need two full stagnant windows."""

    def __init__(self, lr: float, factor: float, patience: int):
        if lr <= 0 or not 0 < factor < 1 or patience < 1:
            raise ValueError("need lr > 0, 0 < factor < 1, patience >= 1")
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = -np.inf
        self._anchor = 0

    def observe(self, iteration: int, score: float) -> float:
        if score > self.best:
            self.best = score
            self._anchor = iteration
        elif iteration - self._anchor >= self.patience:
            self.lr *= self.factor
            self._anchor = iteration
        return self.lr


# ---------------------------------------------------------------------------
# metrics

def _overlap_counts(pred: np.ndarray, truth: np.ndarray, cls: int):
    p = pred == cls
    t = truth == cls
    tp = int(np.logical_and(p, t).sum())
    return tp, int(p.sum()), int(t.sum())


def dice_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    tp, np_, nt = _overlap_counts(pred, truth, cls)
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    return 2.0 * tp / (np_ + nt)


def precision_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    tp, np_, nt = _overlap_counts(pred, truth, cls)
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    return tp / np_


def recall_score(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    tp, np_, nt = _overlap_counts(pred, truth, cls)
    if np_ == 0 and nt == 0:
        return 1.0
    if np_ == 0 or nt == 0:
        return 0.0
    return tp / nt


@dataclass
class SegMetrics:
    """Per-class arrays indexed by class id; macro averages skip background
    (class 0) since it would otherwise dominate the mean."""

    dice: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def macro_dice(self) -> float:
        return float(self.dice[1:].mean())

    @property
    def macro_precision(self) -> float:
        return float(self.precision[1:].mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall[1:].mean())


def evaluate_segmentation(pred: np.ndarray, truth: np.ndarray,
                          num_classes: int) -> SegMetrics:
    k = num_classes
    return SegMetrics(
        dice=np.array([dice_score(pred, truth, c) for c in range(k)]),
        precision=np.array([precision_score(pred, truth, c) for c in range(k)]),
        recall=np.array([recall_score(pred, truth, c) for c in range(k)]),
    )


def class_frequency_weights(volumes, num_classes: int,
                            power: float = 0.5) -> np.ndarray:
    """Cross-entropy class weights from label frequencies: (1/freq)**power,
    normalized to mean 1. power=1 is full inverse frequency; the 0.5 default
    tempers it so the background class is damped but not abandoned."""
    counts = np.zeros(num_classes, dtype=np.float64)
    for v in volumes:
        counts += np.bincount(v.labels.ravel(), minlength=num_classes)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"classes {missing} absent from the weighting set")
    w = (counts.sum() / counts) ** power
    return (w / w.mean()).astype(np.float32)


# ---------------------------------------------------------------------------
# patches

def sample_patch(image: np.ndarray, labels: np.ndarray, patch: int, rng):
    """Random cubic training crop; returns (image patch, label patch)."""
    _, h, w, d = image.shape
    if min(h, w, d) < patch:
        raise ValueError(f"patch {patch} exceeds volume extents {(h, w, d)}")
    c = [int(rng.integers(0, e - patch + 1)) for e in (h, w, d)]
    sl = (slice(None), slice(c[0], c[0] + patch), slice(c[1], c[1] + patch),
          slice(c[2], c[2] + patch))
    return image[sl], labels[sl[1:]]


def tile_starts(extent: int, patch: int) -> list[int]:
    """Half-overlapping eval tiling: starts every patch//2, with a final
    start clamped so the last tile touches the boundary. Duplicates are
    dropped, so extent == patch yields a single tile."""
    if extent < patch:
        raise ValueError(f"extent {extent} smaller than patch {patch}")
    starts = list(range(0, extent - patch + 1, max(1, patch // 2)))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def predict_logits(net: CapsSegNet, image: np.ndarray, patch: int) -> np.ndarray:
    """Tile a [C,H,W,D] volume, run eval forwards, and average logits where
    tiles overlap. Returns [K,H,W,D]."""
    _, h, w, d = image.shape
    k = net.arch.num_classes
    acc = np.zeros((k, h, w, d), dtype=np.float32)
    cnt = np.zeros((h, w, d), dtype=np.float32)
    for sx in tile_starts(h, patch):
        for sy in tile_starts(w, patch):
            for sz in tile_starts(d, patch):
                sl = (slice(sx, sx + patch), slice(sy, sy + patch),
                      slice(sz, sz + patch))
                out = net.forward(image[(slice(None),) + sl][None], mode="eval")
                acc[(slice(None),) + sl] += out.logits[0]
                cnt[sl] += 1.0
    return acc / cnt[None]


def predict_labels(net: CapsSegNet, image: np.ndarray, patch: int) -> np.ndarray:
    return np.argmax(predict_logits(net, image, patch), axis=0).astype(np.uint8)


# ---------------------------------------------------------------------------
# training loop

class DivergenceError(RuntimeError):
    """Loss blew past the divergence ceiling; carries the history so far."""

    def __init__(self, message: str, history, losses):
        super().__init__(message)
        self.history = history
        self.losses = losses


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay_factor: float = 0.05
    patience: int = 200
    max_iters: int = 600
    patch: int = 16
    eval_every: int = 50
    seed: int = 0
    use_margin: bool = True
    use_ce: bool = True
    use_recon: bool = True
    class_weights: np.ndarray | None = None
    divergence_ceiling: float = 1e6
    stop_at_dice: float | None = None   # stop once validation macro Dice reaches this

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience >= self.max_iters:
            raise ValueError("patience must be below max_iters")
        if not (self.use_margin or self.use_ce or self.use_recon):
            raise ValueError("at least one loss term must stay enabled")


@dataclass
class EvalRecord:
    step: int
    split: str
    lr: float
    metrics: SegMetrics


@dataclass
class LossRecord:
    step: int
    breakdown: LossBreakdown


@dataclass
class TrainResult:
    history: list[EvalRecord]
    losses: list[LossRecord]
    best_state: dict[str, np.ndarray]
    best_dice: float
    best_step: int


def _mean_val_metrics(net, volumes, patch: int) -> SegMetrics:
    k = net.arch.num_classes
    per = [evaluate_segmentation(predict_labels(net, v.image, patch), v.labels, k)
           for v in volumes]
    return SegMetrics(
        dice=np.mean([m.dice for m in per], axis=0),
        precision=np.mean([m.precision for m in per], axis=0),
        recall=np.mean([m.recall for m in per], axis=0),
    )


def train_downstream(net: CapsSegNet, train_volumes, val_volumes,
                     config: TrainConfig) -> TrainResult:
    """Optimize on random patches, evaluating on stitched whole volumes
    every `eval_every` steps. Keeps the state with the best validation
    macro Dice. Fully deterministic for a given config and initial state."""
    if not train_volumes:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    opt = Adam()
    sched = PlateauScheduler(config.learning_rate, config.decay_factor,
                             config.patience)
    k = net.arch.num_classes
    history: list[EvalRecord] = []
    losses: list[LossRecord] = []
    best_state: dict[str, np.ndarray] = {n: a.copy()
                                         for n, a in net.state_entries().items()}
    best_dice = -1.0
    best_step = 0

    for step in range(1, config.max_iters + 1):
        vol = train_volumes[int(rng.integers(0, len(train_volumes)))]
        img, lab = sample_patch(vol.image, vol.labels, config.patch, rng)
        out = net.forward(img[None], mode="train")
        terms = downstream_terms(
            out, img[None], lab[None], k,
            class_weights=config.class_weights,
            use_margin=config.use_margin, use_ce=config.use_ce,
            use_recon=config.use_recon)
        losses.append(LossRecord(step, terms.breakdown))
        total = terms.breakdown.total
        if not np.isfinite(total) or total > config.divergence_ceiling:
            raise DivergenceError(
                f"loss {total:.3e} at step {step} crossed the divergence "
                f"ceiling {config.divergence_ceiling:.0e}", history, losses)
        net.zero_grad()
        net.backward(terms.g_logits, terms.g_lengths, terms.g_recon)
        opt.step(net.named_params(), sched.lr)

        if step % config.eval_every == 0 or step == config.max_iters:
            metrics = _mean_val_metrics(net, val_volumes, config.patch)
            lr_now = sched.observe(step, metrics.macro_dice)
            history.append(EvalRecord(step, "val", lr_now, metrics))
            if metrics.macro_dice > best_dice:
                best_dice = metrics.macro_dice
                best_step = step
                best_state = {n: a.copy()
                              for n, a in net.state_entries().items()}
            if (config.stop_at_dice is not None
                    and metrics.macro_dice >= config.stop_at_dice):
                break

    return TrainResult(history, losses, best_state, best_dice, best_step)


def write_metrics_log(path: str, history, num_classes: int) -> None:
    cols = ["step", "split", "lr"]
    for c in range(num_classes):
        cols += [f"dice_{c}", f"precision_{c}", f"recall_{c}"]
    cols += ["macro_dice"]
    with open(path, "w") as f:
        f.write("\t".join(cols) + "\n")
        for r in history:
            row = [str(r.step), r.split, f"{r.lr:.6e}"]
            for c in range(num_classes):
                row += [f"{r.metrics.dice[c]:.6f}",
                        f"{r.metrics.precision[c]:.6f}",
                        f"{r.metrics.recall[c]:.6f}"]
            row.append(f"{r.metrics.macro_dice:.6f}")
            f.write("\t".join(row) + "\n")


def write_loss_log(path: str, losses) -> None:
    with open(path, "w") as f:
        f.write("step\tmargin\tce\trecon\ttotal\n")
        for r in losses:
            b = r.breakdown
            f.write(f"{r.step}\t{b.margin:.8e}\t{b.ce:.8e}\t"
                    f"{b.recon:.8e}\t{b.total:.8e}\n")


# ---------------------------------------------------------------------------
# cross-validation and experiment harnesses

def kfold_split(ids: list[str], k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Deterministic shuffle then round-robin: fold sizes differ by at most
    one. Returns (train_ids, test_ids) per fold."""
    if k < 2 or k > len(ids):
        raise ValueError(f"need 2 <= k <= {len(ids)}, got {k}")
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    folds = [order[i::k] for i in range(k)]
    out = []
    for i in range(k):
        test = folds[i]
        train = [v for j, f in enumerate(folds) if j != i for v in f]
        out.append((train, test))
    return out


@dataclass
class ComparisonRow:
    seed: int
    fold: int
    pretrained_dice: float
    scratch_dice: float


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]

    @property
    def pretrained_mean(self) -> float:
        return float(np.mean([r.pretrained_dice for r in self.rows]))

    @property
    def scratch_mean(self) -> float:
        return float(np.mean([r.scratch_dice for r in self.rows]))

    @property
    def seed_means(self) -> list[tuple[int, float, float]]:
        seeds = sorted({r.seed for r in self.rows})
        return [(s,
                 float(np.mean([r.pretrained_dice for r in self.rows if r.seed == s])),
                 float(np.mean([r.scratch_dice for r in self.rows if r.seed == s])))
                for s in seeds]


def _test_dice(net: CapsSegNet, state, volumes, patch: int) -> float:
    net.load_state_entries(state)
    return _mean_val_metrics(net, volumes, patch).macro_dice


def run_ssl_comparison(volumes, arch: ArchSpec, config: TrainConfig,
                       pretrain_steps: int = 30, folds: int = 4,
                       seeds=(0, 1, 2), progress=None) -> ComparisonResult:
    """Pretrained-stem vs from-scratch training over a k-fold split, one
    pair of runs per (seed, fold).

    Pretraining happens once per seed on the whole unlabeled image set,
    before any fold is carved out: the pretext stage never sees a label, so
    the standard pretrain-then-finetune ordering applies it ahead of the
    cross-validation split. Within a pair both arms start from one shared
    calibrated state and differ in nothing but the stem weights."""
    from .ssl import PretrainConfig, pretrain

    by_id = {v.volume_id: v for v in volumes}
    plan = kfold_split(sorted(by_id), folds, seed=config.seed)

    stem_states = {}
    for seed in seeds:
        stem = DilatedStem(arch.in_channels, arch.stem_channels,
                           arch.stem_dilations, np.random.default_rng(seed))
        pretrain([v.image for v in volumes], stem,
                 PretrainConfig(steps=pretrain_steps, seed=seed))
        stem_states[seed] = stem_entries(stem)

    rows: list[ComparisonRow] = []
    for seed in seeds:
        for fold, (train_ids, test_ids) in enumerate(plan):
            train_vols = [by_id[i] for i in train_ids]
            test_vols = [by_id[i] for i in test_ids]

            base = CapsSegNet(arch, seed=seed)
            base.recalibrate_caps(seed, sample=train_vols[0].image)
            base_state = base.state_entries()

            results = {}
            for arm in ("pretrained", "scratch"):
                net = CapsSegNet(arch, seed=seed)
                net.load_state_entries(base_state)
                if arm == "pretrained":
                    net.load_state_entries(stem_states[seed], strict=False)
                r = train_downstream(net, train_vols, test_vols,
                                     replace(config, seed=seed))
                results[arm] = _test_dice(net, r.best_state, test_vols,
                                          config.patch)
            rows.append(ComparisonRow(seed, fold, results["pretrained"],
                                      results["scratch"]))
            if progress is not None:
                progress(rows[-1])
    return ComparisonResult(rows)


ABLATION_ROWS = ("caps4", "no_stem", "no_margin", "no_recon", "no_pretext", "full")


@dataclass
class AblationRow:
    variant: str
    dice_by_seed: list[float]

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice_by_seed))


def _ablation_arch(variant: str, base: ArchSpec) -> ArchSpec:
    if variant == "caps4":
        # quarter the first-layer capsule variety, mirroring the full-scale
        # "first layer gets 4 types" knockout at any scale
        first = max(1, base.caps_types[0] // 4)
        return replace(base, caps_types=(first,) + base.caps_types[1:])
    if variant == "no_stem":
        return replace(base, use_stem=False)
    return base


def run_ablation(volumes, arch: ArchSpec, config: TrainConfig,
                 pretrain_steps: int = 200, seeds=(0, 1, 2),
                 holdout: int = 4, progress=None) -> list[AblationRow]:
    """Six-variant component knockout on a single fixed split. Stems are
    pretrained once per seed and shared by every variant that uses them;
    `no_stem` also skips pretraining since there is nothing to pretrain."""
    from .ssl import PretrainConfig, pretrain

    ordered = sorted(volumes, key=lambda v: v.volume_id)
    test_vols = ordered[-holdout:]
    train_vols = ordered[:-holdout]
    if not train_vols:
        raise ValueError("holdout leaves no training volumes")

    stem_states = {}
    for seed in seeds:
        stem = DilatedStem(arch.in_channels, arch.stem_channels,
                           arch.stem_dilations, np.random.default_rng(seed))
        pretrain([v.image for v in train_vols], stem,
                 PretrainConfig(steps=pretrain_steps, seed=seed))
        stem_states[seed] = stem_entries(stem)

    rows: list[AblationRow] = []
    for variant in ABLATION_ROWS:
        v_arch = _ablation_arch(variant, arch)
        v_config = replace(
            config,
            use_margin=variant != "no_margin",
            use_recon=variant != "no_recon")
        dices = []
        for seed in seeds:
            net = CapsSegNet(v_arch, seed=seed)
            if variant not in ("no_stem", "no_pretext"):
                net.load_state_entries(stem_states[seed], strict=False)
            net.recalibrate_caps(seed, sample=train_vols[0].image)
            r = train_downstream(net, train_vols, test_vols,
                                 replace(v_config, seed=seed))
            dices.append(_test_dice(net, r.best_state, test_vols, config.patch))
            if progress is not None:
                progress(variant, seed, dices[-1])
        rows.append(AblationRow(variant, dices))
    return rows


def write_ablation_table(path: str, rows, seeds) -> None:
    with open(path, "w") as f:
        f.write("variant\t" + "\t".join(f"dice_seed{s}" for s in seeds)
                + "\tmean_dice\n")
        for r in rows:
            f.write(r.variant + "\t"
                    + "\t".join(f"{d:.6f}" for d in r.dice_by_seed)
                    + f"\t{r.mean_dice:.6f}\n")


def write_comparison_table(path: str, result: ComparisonResult) -> None:
    with open(path, "w") as f:
        f.write("seed\tfold\tpretrained_dice\tscratch_dice\n")
        for r in result.rows:
            f.write(f"{r.seed}\t{r.fold}\t{r.pretrained_dice:.6f}\t"
                    f"{r.scratch_dice:.6f}\n")
        f.write(f"mean\t-\t{result.pretrained_mean:.6f}\t"
                f"{result.scratch_mean:.6f}\n")
