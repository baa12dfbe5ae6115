"""Operator entry point: dataset generation, stem pretraining, downstream
training, evaluation, gradient checking, and the knockout/comparison
harnesses.

Every subcommand writes into a fresh run directory holding exactly one
``run.json`` manifest with the effective configuration, so a run can be
reproduced from its manifest alone. Option values are layered: built-in
defaults, then an optional JSON config file, then explicit flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np

from . import __version__, report
from .data import (PhantomSpec, generate_phantoms, load_dataset,
                   read_manifest, write_manifest, write_volume)
from .network import (ArchSpec, CapsSegNet, DilatedStem, load_checkpoint,
                      save_checkpoint, stem_entries)
from .ssl import PretrainConfig, pretrain, write_pretext_log
from .training import (TrainConfig, class_frequency_weights,
                       evaluate_segmentation, predict_labels,
                       run_ablation, run_ssl_comparison, train_downstream,
                       write_ablation_table, write_comparison_table,
                       write_loss_log, write_metrics_log, ABLATION_ROWS,
                       DivergenceError)

MANIFEST_FILE = "run.json"
OUT_ROOT_ENV = "VOXCAPS_OUT"


class ConfigError(Exception):
    """Bad option combination; maps to exit status 2 with usage text."""


def _fresh_run_dir(out: str | None, subcommand: str) -> str:
    if out:
        os.makedirs(out, exist_ok=True)
        if os.path.exists(os.path.join(out, MANIFEST_FILE)):
            raise ConfigError(f"{out} already holds a run manifest; "
                              "run directories are never reused")
        return out
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    k = 0
    while True:
        cand = os.path.join(root, f"{subcommand}-{k:03d}")
        try:
            os.makedirs(cand)
            return cand
        except FileExistsError:
            k += 1


def _write_run_manifest(run_dir: str, subcommand: str, config: dict,
                        inputs: dict, outputs: list[str]):
    doc = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": config.get("seed"),
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(run_dir, MANIFEST_FILE), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _effective(args, defaults: dict) -> dict:
    """defaults <- config file <- explicitly passed flags."""
    eff = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as f:
                overrides = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file {path}: {e}")
        for k, v in overrides.items():
            if k not in defaults:
                raise ConfigError(f"unknown config key {k!r} "
                                  f"(valid: {', '.join(sorted(defaults))})")
            eff[k] = v
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            eff[k] = v
    return eff


def _arch_from_meta(meta: dict) -> ArchSpec:
    fields = dict(meta["arch"])
    for k in ("stem_channels", "stem_dilations", "caps_types", "caps_dims",
              "caps_strides", "decoder_channels"):
        fields[k] = tuple(fields[k])
    return ArchSpec(**fields)


def _arch_to_meta(arch: ArchSpec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v
            for k, v in asdict(arch).items()}


def _build_arch(scale: str, num_classes: int, in_channels: int,
                use_stem: bool, caps4: bool) -> ArchSpec:
    if scale == "micro":
        first = 1 if caps4 else None
        return ArchSpec.micro(num_classes, in_channels, first_types=first,
                              use_stem=use_stem)
    if scale == "full":
        arch = ArchSpec.full(num_classes, in_channels)
        if caps4:
            arch = replace(arch, caps_types=(4,) + arch.caps_types[1:])
        if not use_stem:
            arch = replace(arch, use_stem=False)
        return arch
    raise ConfigError(f"unknown scale {scale!r} (micro or full)")


def _train_val_split(data_dir: str):
    splits = read_manifest(data_dir)
    if "train" in splits:
        train = load_dataset(data_dir, "train")
        val = load_dataset(data_dir, "val") if "val" in splits else train
    else:
        train = load_dataset(data_dir, "all")
        val = train
    return train, val


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    eff = _effective(args, dict(seed=0, classes=3, channels=3, tier="hard",
                                count=16, extent=16))
    if eff["tier"] not in ("easy", "hard"):
        raise ConfigError(f"unknown tier {eff['tier']!r} (easy or hard)")
    run_dir = _fresh_run_dir(args.out, "gen-data")
    factory = PhantomSpec.easy if eff["tier"] == "easy" else PhantomSpec.hard
    spec = factory((eff["extent"],) * 3, eff["classes"],
                   channels=eff["channels"], seed=eff["seed"])
    volumes = generate_phantoms(spec, eff["count"])
    outputs = [write_volume(v, run_dir) for v in volumes]
    write_manifest(run_dir, {"all": [v.volume_id for v in volumes]})
    outputs.append(report.dataset_panel(volumes,
                                        os.path.join(run_dir, "sample.png")))
    _write_run_manifest(run_dir, "gen-data", eff, {}, outputs)
    print(f"wrote {len(volumes)} volumes to {run_dir}")
    return 0


def cmd_pretrain(args) -> int:
    eff = _effective(args, dict(seed=0, scale="micro", lr=3e-5,
                                max_iters=100))
    if not args.data:
        raise ConfigError("pretrain requires --data")
    run_dir = _fresh_run_dir(args.out, "pretrain")
    volumes = load_dataset(args.data, "all")
    in_ch = volumes[0].image.shape[0]
    arch = _build_arch(eff["scale"], 2, in_ch, use_stem=True, caps4=False)
    stem = DilatedStem(in_ch, arch.stem_channels, arch.stem_dilations,
                       np.random.default_rng(eff["seed"]))
    history = pretrain([v.image for v in volumes], stem,
                       PretrainConfig(steps=eff["max_iters"],
                                      learning_rate=eff["lr"],
                                      seed=eff["seed"]))
    ckpt = os.path.join(run_dir, "stem.vxc")
    save_checkpoint(ckpt, stem_entries(stem),
                    meta={"kind": "stem", "scale": eff["scale"],
                          "in_channels": in_ch,
                          "channels": list(arch.stem_channels),
                          "dilations": list(arch.stem_dilations)})
    log = os.path.join(run_dir, "pretext.tsv")
    write_pretext_log(log, history)
    fig = report.pretext_curve(history, os.path.join(run_dir, "pretext.png"))
    _write_run_manifest(run_dir, "pretrain", eff, {"data": args.data},
                        [ckpt, log, fig])
    n_collapsed = sum(1 for r in history if r.collapsed)
    print(f"pretrained {eff['max_iters']} steps, final loss "
          f"{history[-1].loss:.4f}, collapse flags {n_collapsed}")
    return 0


def _train_config(eff, class_weights) -> TrainConfig:
    return TrainConfig(
        learning_rate=eff["lr"], decay_factor=eff["decay_factor"],
        patience=eff["patience"], max_iters=eff["max_iters"],
        patch=eff["patch"], eval_every=eff["eval_every"], seed=eff["seed"],
        use_margin=not eff["no_margin"], use_ce=not eff["no_ce"],
        use_recon=not eff["no_recon"], class_weights=class_weights)


_TRAIN_DEFAULTS = dict(seed=0, scale="micro", patch=16, classes=0,
                       lr=1e-4, decay_factor=0.05, patience=200,
                       max_iters=600, eval_every=50, class_weight_power=0.5,
                       no_margin=False, no_ce=False, no_recon=False,
                       no_stem=False, caps4=False)


def cmd_train(args) -> int:
    eff = _effective(args, _TRAIN_DEFAULTS)
    if not args.data:
        raise ConfigError("train requires --data")
    run_dir = _fresh_run_dir(args.out, "train")
    train_vols, val_vols = _train_val_split(args.data)
    classes = eff["classes"] or int(max(v.labels.max() for v in train_vols)) + 1
    in_ch = train_vols[0].image.shape[0]
    arch = _build_arch(eff["scale"], classes, in_ch,
                       use_stem=not eff["no_stem"], caps4=eff["caps4"])

    weights = None
    if eff["class_weight_power"] > 0:
        weights = class_frequency_weights(train_vols, classes,
                                          power=eff["class_weight_power"])
    try:
        config = _train_config(eff, weights)
    except ValueError as e:
        raise ConfigError(str(e))

    net = CapsSegNet(arch, seed=eff["seed"])
    if args.stem:
        entries, meta = load_checkpoint(args.stem)
        if meta.get("kind") != "stem":
            raise ConfigError(f"{args.stem} is not a stem checkpoint")
        if eff["no_stem"]:
            raise ConfigError("--stem cannot be combined with --no-stem")
        net.load_state_entries(entries, strict=False)
    net.recalibrate_caps(eff["seed"], sample=train_vols[0].image)

    try:
        result = train_downstream(net, train_vols, val_vols, config)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    ckpt = os.path.join(run_dir, "model.vxc")
    save_checkpoint(ckpt, result.best_state,
                    meta={"kind": "model", "arch": _arch_to_meta(arch),
                          "best_step": result.best_step,
                          "best_dice": result.best_dice})
    metrics = os.path.join(run_dir, "metrics.tsv")
    write_metrics_log(metrics, result.history, arch.num_classes)
    losses = os.path.join(run_dir, "losses.tsv")
    write_loss_log(losses, result.losses)
    outputs = [ckpt, metrics, losses,
               report.training_curves(result.history,
                                      os.path.join(run_dir, "dice.png")),
               report.loss_curves(result.losses,
                                  os.path.join(run_dir, "losses.png"))]
    net.load_state_entries(result.best_state)
    v0 = val_vols[0]
    pred = predict_labels(net, v0.image, config.patch)
    outputs.append(report.slice_panel(v0.image, v0.labels, pred,
                                      os.path.join(run_dir, "panel.png")))
    _write_run_manifest(run_dir, "train", eff,
                        {"data": args.data, "stem": args.stem}, outputs)
    print(f"best val macro dice {result.best_dice:.4f} at step "
          f"{result.best_step}; outputs in {run_dir}")
    return 0


def cmd_eval(args) -> int:
    eff = _effective(args, dict(seed=0, patch=16))
    if not args.data or not args.checkpoint:
        raise ConfigError("eval requires --data and --checkpoint")
    run_dir = _fresh_run_dir(args.out, "eval")
    entries, meta = load_checkpoint(args.checkpoint)
    if meta.get("kind") != "model":
        raise ConfigError(f"{args.checkpoint} is not a model checkpoint")
    arch = _arch_from_meta(meta)
    net = CapsSegNet(arch, seed=eff["seed"])
    net.load_state_entries(entries)

    volumes = load_dataset(args.data, "all")
    table = os.path.join(run_dir, "metrics.tsv")
    dices = []
    with open(table, "w") as f:
        f.write("volume\tclass\tdice\tprecision\trecall\n")
        for v in volumes:
            pred = predict_labels(net, v.image, eff["patch"])
            m = evaluate_segmentation(pred, v.labels, arch.num_classes)
            assert all(abs(d - (0.0 if p + r == 0 else 2 * p * r / (p + r)))
                       < 1e-6 or (p + r == 0)
                       for d, p, r in zip(m.dice, m.precision, m.recall)), \
                "dice / precision / recall identity violated"
            for c in range(arch.num_classes):
                f.write(f"{v.volume_id}\t{c}\t{m.dice[c]:.6f}"
                        f"\t{m.precision[c]:.6f}\t{m.recall[c]:.6f}\n")
            dices.append(m.macro_dice)
    v0 = volumes[0]
    panel = report.slice_panel(v0.image, v0.labels,
                               predict_labels(net, v0.image, eff["patch"]),
                               os.path.join(run_dir, "panel.png"))
    _write_run_manifest(run_dir, "eval", eff,
                        {"data": args.data, "checkpoint": args.checkpoint},
                        [table, panel])
    print(f"mean macro dice {float(np.mean(dices)):.4f} over "
          f"{len(volumes)} volumes; table in {table}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    eff = _effective(args, dict(seed=0, scope="all", seeds=20))
    run_dir = _fresh_run_dir(args.out, "gradcheck")
    reports = run_suite(scope=eff["scope"], n_seeds=eff["seeds"],
                        base_seed=eff["seed"])
    path = os.path.join(run_dir, "report.txt")
    with open(path, "w") as f:
        for r in reports:
            print(r.line())
            f.write(r.line() + "\n")
    _write_run_manifest(run_dir, "gradcheck", eff, {}, [path])
    return 0 if all(r.passed for r in reports) else 1


def cmd_ablate(args) -> int:
    eff = _effective(args, dict(
        seed=0, scale="micro", patch=16, lr=2e-3, decay_factor=0.05,
        patience=1000, max_iters=1300, eval_every=100,
        class_weight_power=0.5, folds=4, holdout=4, pretrain_steps=30,
        seeds="0,1,2", table="both",
        no_margin=False, no_ce=False, no_recon=False))
    if not args.data:
        raise ConfigError("ablate requires --data")
    if eff["table"] not in ("4", "5", "both"):
        raise ConfigError(f"--table must be 4, 5, or both, got {eff['table']}")
    seeds = tuple(int(s) for s in str(eff["seeds"]).split(",") if s != "")
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    run_dir = _fresh_run_dir(args.out, "ablate")
    volumes = load_dataset(args.data, "all")
    classes = int(max(v.labels.max() for v in volumes)) + 1
    in_ch = volumes[0].image.shape[0]
    arch = _build_arch(eff["scale"], classes, in_ch, use_stem=True,
                       caps4=False)
    weights = None
    if eff["class_weight_power"] > 0:
        weights = class_frequency_weights(volumes, classes,
                                          power=eff["class_weight_power"])
    base = dict(eff)
    base.update(no_margin=False, no_ce=False, no_recon=False)
    config = _train_config(base, weights)
    outputs = []

    if eff["table"] in ("5", "both"):
        comparison = run_ssl_comparison(
            volumes, arch, config, pretrain_steps=eff["pretrain_steps"],
            folds=eff["folds"], seeds=seeds,
            progress=lambda row: print(
                f"seed {row.seed} fold {row.fold}: pretrained "
                f"{row.pretrained_dice:.4f} scratch {row.scratch_dice:.4f}",
                flush=True))
        t5 = os.path.join(run_dir, "table5.tsv")
        write_comparison_table(t5, comparison)
        outputs += [t5, report.comparison_chart(
            comparison, os.path.join(run_dir, "table5.png"))]
        print(f"pretrained mean {comparison.pretrained_mean:.4f} vs "
              f"scratch mean {comparison.scratch_mean:.4f}")

    if eff["table"] in ("4", "both"):
        rows = run_ablation(
            volumes, arch, config, pretrain_steps=eff["pretrain_steps"],
            seeds=seeds, holdout=eff["holdout"],
            progress=lambda variant, seed, dice: print(
                f"{variant} seed {seed}: dice {dice:.4f}", flush=True))
        t4 = os.path.join(run_dir, "table4.tsv")
        write_ablation_table(t4, rows, seeds)
        outputs += [t4, report.ablation_chart(
            rows, os.path.join(run_dir, "table4.png"))]
        for r in rows:
            print(f"{r.variant}: mean dice {r.mean_dice:.4f}")

    _write_run_manifest(run_dir, "ablate", eff, {"data": args.data}, outputs)
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", help="run directory (default: fresh under "
                   f"${OUT_ROOT_ENV} or ./runs)")
    p.add_argument("--config", help="JSON file of option overrides")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="voxcaps",
        description="capsule-routing volumetric segmentation experiments")
    sub = ap.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    _add_common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--tier", choices=("easy", "hard"))
    p.add_argument("--count", type=int)
    p.add_argument("--extent", type=int)
    p.set_defaults(func=cmd_gen_data, parser=p)

    p = sub.add_parser("pretrain", help="self-supervised stem pretraining")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--scale", choices=("micro", "full"))
    p.add_argument("--lr", type=float)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.set_defaults(func=cmd_pretrain, parser=p)

    p = sub.add_parser("train", help="downstream segmentation training")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--stem", help="stem checkpoint from pretrain")
    p.add_argument("--scale", choices=("micro", "full"))
    p.add_argument("--patch", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-factor", type=float, dest="decay_factor")
    p.add_argument("--patience", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    for flag in ("no-margin", "no-ce", "no-recon", "no-stem", "caps4"):
        p.add_argument(f"--{flag}", action="store_true", default=None,
                       dest=flag.replace("-", "_"))
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--patch", type=int)
    p.set_defaults(func=cmd_eval, parser=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p)
    p.add_argument("--scope",
                   choices=("all", "tensor", "capsules", "losses", "network"))
    p.add_argument("--seeds", type=int, help="random seeds per operation")
    p.set_defaults(func=cmd_gradcheck, parser=p)

    p = sub.add_parser("ablate", help="component knockouts and the "
                       "pretrain-vs-scratch comparison")
    _add_common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--scale", choices=("micro", "full"))
    p.add_argument("--patch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--decay-factor", type=float, dest="decay_factor")
    p.add_argument("--patience", type=int)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--folds", type=int)
    p.add_argument("--holdout", type=int)
    p.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    p.add_argument("--seeds", help="comma-separated training seeds")
    p.add_argument("--table", choices=("4", "5", "both"))
    p.set_defaults(func=cmd_ablate, parser=p)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        args.parser.print_usage(sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
