"""Command-line entry point: ``elseg <command> [flags]``.

Settings resolve as built-in defaults, then ``--config FILE.json``, then
explicit flags.  Every configuration object is built (and therefore
validated) before any output is written.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import elnet, synth, trainer
from .dataio import LabelMap, Manifest, MvolError, Subject, preprocess, read_mvol, write_mvol
from .elnet import CheckpointError, NetworkConfig
from .losses import LossConfig
from .optim import NadamConfig

log = logging.getLogger("elseg")

LOSS_NAMES = {
    "exp-log": "exp_log_combined",
    "log-dice": "exp_log_dice",
    "wce": "exp_cross_entropy",
    "linear-dice": "linear_dice",
    "focal": "focal",
}

RUNTIME_ERRORS = (FileNotFoundError, MvolError, CheckpointError, synth.PackingError, FloatingPointError,
                  IndexError, KeyError, json.JSONDecodeError)


class UsageError(ValueError):
    pass


# -- argument types ------------------------------------------------------------


def positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def gamma_list(text: str) -> tuple[float, ...]:
    vals = float_list(text)
    if not vals or any(not g > 0 for g in vals):
        raise argparse.ArgumentTypeError(f"every gamma must be > 0, got {text!r}")
    return vals


def int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def loss_name(text: str) -> str:
    if text not in LOSS_NAMES:
        raise argparse.ArgumentTypeError(f"unknown loss {text!r}; choose from {', '.join(LOSS_NAMES)}")
    return text


def suite_entries(text: str) -> list[tuple[str, float | None]]:
    """``NAME[:GAMMA]`` items, e.g. ``linear-dice,exp-log:0.3,exp-log:2``."""
    out = []
    for item in (t.strip() for t in text.split(",")):
        if not item:
            continue
        name, _, g = item.partition(":")
        loss_name(name)
        out.append((name, positive_float(g) if g else None))
    if not out:
        raise argparse.ArgumentTypeError("no losses given")
    return out


# -- parser ----------------------------------------------------------------------


def _add_network(p):
    g = p.add_argument_group("network")
    g.add_argument("--paper-scale", action="store_true",
                   help="24/48/96/192 channels at 128^3 (memory-hungry on CPU)")
    g.add_argument("--extent", type=positive_int, help="network input extent (default 32)")
    g.add_argument("--levels", type=positive_int)
    g.add_argument("--base-channels", type=positive_int)
    g.add_argument("--convs", type=int_list, help="convolutions per level, e.g. 1,2,3,3")
    g.add_argument("--dropout", type=float)
    g.add_argument("--noise-sigma", type=float)
    g.add_argument("--no-deep-supervision", action="store_true")


def _add_loss(p):
    g = p.add_argument_group("loss")
    g.add_argument("--gamma", type=positive_float,
                   help="exponent for both loss terms (focal: the focusing exponent)")
    g.add_argument("--gamma-dice", type=positive_float)
    g.add_argument("--gamma-cross", type=positive_float)
    g.add_argument("--wdice", type=float, default=0.8)
    g.add_argument("--wcross", type=float, default=0.2)
    g.add_argument("--epsilon", type=float, default=1.0, help="soft Dice smoothing")
    g.add_argument("--dice-foreground-only", action="store_true", help="leave background out of the Dice term")


def _add_training(p):
    g = p.add_argument_group("training")
    g.add_argument("--manifest", required=True, type=Path)
    g.add_argument("--epochs", type=positive_int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--lr", type=positive_float, default=1e-3)
    g.add_argument("--no-augment", action="store_true")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="elseg", description="3D segmentation with exponential logarithmic loss")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--threads", type=positive_int, default=1,
                        help="BLAS threads; 1 (the default) keeps runs bit-reproducible")
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON file of flag defaults (keys are flag names)")
        cmds[name] = p
        return p

    p = add("gen", "generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--subjects", type=positive_int, default=10)
    p.add_argument("--extent", type=positive_int, default=32)
    p.add_argument("--labels", type=int, help="label count including background (default 5)")
    p.add_argument("--fractions", type=float_list, help="foreground voxel fractions, labels 1..L-1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sets", type=positive_int, default=5, help="number of train/validation splits")

    p = add("preprocess", "resample a dataset to isotropic cubes of a given extent")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--extent", type=positive_int, default=32)
    p.add_argument("--out", required=True, type=Path)

    p = add("train", "train one network on one split")
    _add_training(p)
    p.add_argument("--set", type=int, default=0, dest="split_set")
    p.add_argument("--loss", type=loss_name, default="exp-log")
    p.add_argument("--out", required=True, type=Path)
    _add_loss(p)
    _add_network(p)

    p = add("eval", "per-label hard Dice of a prediction against ground truth")
    p.add_argument("--labels", type=Path, help="ground-truth label map")
    p.add_argument("--pred", type=Path, help="predicted label map")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--image", type=Path, help="image to segment with --checkpoint")
    p.add_argument("--manifest", type=Path, help="evaluate the validation subjects of --set")
    p.add_argument("--set", type=int, default=0, dest="split_set")
    p.add_argument("--out", type=Path, help="also write the JSON result here")

    p = add("predict", "segment one image with a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = add("suite", "loss comparison over several split sets")
    _add_training(p)
    p.add_argument("--losses", type=suite_entries, default=suite_entries("linear-dice,exp-log"),
                   help="NAME[:GAMMA] list, e.g. linear-dice,exp-log:0.3,exp-log:2")
    p.add_argument("--sets", type=positive_int, default=5)
    p.add_argument("--jobs", type=positive_int, help="parallel runs (fallback: $ELSEG_THREADS, then 1)")
    p.add_argument("--out", required=True, type=Path)
    _add_loss(p)
    _add_network(p)

    p = add("plot-loss", "plot (-ln x)^gamma against 1 - x")
    p.add_argument("--gammas", type=gamma_list, default=(0.3, 1.0, 2.0))
    p.add_argument("--out", required=True, type=Path)
    return parser, cmds


def parse_args(argv=None) -> argparse.Namespace:
    parser, cmds = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    config = pre.parse_known_args(argv)[0].config
    command = next((a for a in argv if a in cmds), None)
    if config is None or command is None:
        return parser.parse_args(argv)
    sub = cmds[command]
    try:
        raw = json.loads(config.read_text())
    except (OSError, json.JSONDecodeError) as e:
        parser.error(f"cannot read config {config}: {e}")
    if not isinstance(raw, dict):
        parser.error(f"config {config} must hold a JSON object")
    by_dest = {a.dest: a for a in sub._actions}
    by_flag = {s.lstrip("-"): a for a in sub._actions for s in a.option_strings}
    defaults = {}
    for key, value in raw.items():
        action = by_flag.get(key) or by_flag.get(key.replace("_", "-")) or by_dest.get(key)
        if action is None or action.dest in ("help", "config"):
            parser.error(f"config {config}: unknown key {key!r} for '{command}'")
        if action.type is not None and not isinstance(value, bool):
            text = ",".join(str(v) for v in value) if isinstance(value, list) else str(value)
            try:
                value = action.type(text)
            except (argparse.ArgumentTypeError, ValueError) as e:
                parser.error(f"config {config}: {key}: {e}")
        defaults[action.dest] = value
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- configuration builders ------------------------------------------------------


def network_config(args, num_labels: int) -> NetworkConfig:
    base = elnet.paper_config(num_labels=num_labels) if args.paper_scale else NetworkConfig(num_labels=num_labels)
    kw = base.to_dict()
    overrides = {
        "extent": args.extent, "levels": args.levels, "base_channels": args.base_channels,
        "convs": args.convs, "dropout_rate": args.dropout, "noise_sigma": args.noise_sigma,
    }
    kw.update({k: v for k, v in overrides.items() if v is not None})
    if args.levels is not None and args.convs is None:
        kw["convs"] = tuple(min(i + 1, 3) for i in range(args.levels))
    if args.base_channels is not None or args.levels is not None:
        kw["max_channels"] = None
    if args.no_deep_supervision:
        kw["deep_supervision"] = False
    return NetworkConfig.from_dict(kw)


def loss_config(args, name: str, gamma: float | None = None) -> LossConfig:
    kind = LOSS_NAMES[name]
    g = gamma if gamma is not None else args.gamma
    kw = dict(kind=kind, w_dice=args.wdice, w_cross=args.wcross, epsilon=args.epsilon,
              dice_include_background=not args.dice_foreground_only)
    if kind == "focal":
        if g is not None:
            kw["focal_gamma"] = g
    else:
        if g is not None:
            kw["gamma_dice"] = kw["gamma_cross"] = g
        if args.gamma_dice is not None:
            kw["gamma_dice"] = args.gamma_dice
        if args.gamma_cross is not None:
            kw["gamma_cross"] = args.gamma_cross
    return LossConfig(**kw)


def _suite_row_name(name: str, gamma: float | None) -> str:
    return name if gamma is None else f"{name}-g{gamma:g}"


# -- commands --------------------------------------------------------------------


def cmd_gen(args) -> int:
    L = args.labels if args.labels is not None else (len(args.fractions) + 1 if args.fractions else 5)
    spec = synth.PhantomSpec(extent=args.extent, num_labels=L, fractions=args.fractions)
    m = synth.generate_dataset(spec, args.subjects, args.out, seed=args.seed, n_sets=args.sets)
    print(f"wrote {len(m.subjects)} subjects ({args.extent}^3, {L} labels) to {args.out}")
    print(f"splits: {len(m.splits)}")
    print("label  target    measured")
    print(f"{0:>5}  {spec.background_fraction:.5f}  {m.labels[0]['frequency']:.5f}")
    for i, f in enumerate(spec.fractions, start=1):
        print(f"{i:>5}  {f:.5f}  {m.labels[i]['frequency']:.5f}")
    return 0


def cmd_preprocess(args) -> int:
    src = Manifest.load_file(args.manifest)
    out = args.out
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    counts = np.zeros(src.num_labels, np.int64)
    subjects = []
    for s in src.subjects:
        img, lab = preprocess(*src.load(s.id), args.extent)
        counts += np.bincount(lab.data.ravel(), minlength=src.num_labels)[: src.num_labels]
        write_mvol(out / "images" / f"{s.id}.mvol", img)
        write_mvol(out / "labels" / f"{s.id}.mvol", lab)
        subjects.append(Subject(s.id, f"images/{s.id}.mvol", f"labels/{s.id}.mvol"))
    freqs = counts / counts.sum()
    labels = [{**lab, "frequency": float(freqs[i])} for i, lab in enumerate(src.labels)]
    Manifest(subjects, labels, src.splits, src.seed, root=out).save(out / "manifest.json")
    print(f"wrote {len(subjects)} subjects at {args.extent}^3 to {out}")
    return 0


def cmd_train(args) -> int:
    manifest = Manifest.load_file(args.manifest)
    run = trainer.TrainRun(
        network=network_config(args, manifest.num_labels),
        loss=loss_config(args, args.loss),
        optimizer=NadamConfig(lr=args.lr),
        epochs=args.epochs,
        split_set=args.split_set,
        seed=args.seed,
        out_dir=args.out,
        augment=not args.no_augment,
    )
    manifest.split(run.split_set)
    res = trainer.train(run, manifest)
    last = res.log[-1]
    dice = " ".join("-" if d is None else f"{d:.3f}" for d in last.val_dice)
    print(f"epoch {last.epoch}: train loss {last.train_loss:.5f}; validation Dice [{dice}]")
    print(f"checkpoint: {res.checkpoint}")
    return 0


def _dice_json(per_subject: dict, num_labels: int) -> dict:
    return {"subjects": per_subject, "label_mean": trainer.aggregate_subjects(per_subject, num_labels)}


def cmd_eval(args) -> int:
    if args.manifest is not None:
        if args.checkpoint is None:
            raise UsageError("--manifest needs --checkpoint")
        net, _ = elnet.load_checkpoint(args.checkpoint)
        m = Manifest.load_file(args.manifest)
        _, val_ids = m.split(args.split_set)
        subjects = trainer._load_subjects(m, val_ids, net.config.extent)
        result = _dice_json(trainer.evaluate(net, subjects), net.config.num_labels)
    else:
        if args.labels is None:
            raise UsageError("give --labels with --pred or --checkpoint/--image, or --manifest")
        gt = read_mvol(args.labels)
        if not isinstance(gt, LabelMap):
            raise UsageError(f"{args.labels} is not a label map")
        if args.pred is not None:
            pred = read_mvol(args.pred)
            if not isinstance(pred, LabelMap):
                raise UsageError(f"{args.pred} is not a label map")
        elif args.checkpoint is not None and args.image is not None:
            pred, _ = trainer.predict(args.checkpoint, read_mvol(args.image))
        else:
            raise UsageError("give --pred, or --checkpoint with --image")
        L = max(gt.num_labels, pred.num_labels)
        result = {"dice": trainer.hard_dice(pred, gt, L)}
    text = json.dumps(result, indent=1, sort_keys=True)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")
    print(text)
    return 0


def cmd_predict(args) -> int:
    labels, seconds = trainer.predict(args.checkpoint, read_mvol(args.image))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_mvol(args.out, labels)
    print(f"wrote {args.out} ({seconds:.2f} s inference)")
    return 0


def cmd_suite(args) -> int:
    manifest = Manifest.load_file(args.manifest)
    network = network_config(args, manifest.num_labels)
    configs = {_suite_row_name(n, g): loss_config(args, n, g) for n, g in args.losses}
    if len(configs) != len(args.losses):
        raise UsageError("duplicate entries in --losses")
    jobs = args.jobs
    if jobs is None:
        env = os.environ.get("ELSEG_THREADS")
        try:
            jobs = positive_int(env) if env else 1
        except (argparse.ArgumentTypeError, ValueError):
            raise UsageError(f"ELSEG_THREADS must be a positive integer, got {env!r}") from None
    reports = trainer.run_experiment_suite(
        configs, args.manifest, n_sets=args.sets, seed=args.seed, network=network,
        optimizer=NadamConfig(lr=args.lr), epochs=args.epochs, out_dir=args.out, jobs=jobs,
    )
    print(trainer.comparison_table(reports, [lab["name"] for lab in manifest.labels]), end="")
    print(f"report: {args.out / 'report.json'}")
    return 0


def cmd_plot_loss(args) -> int:
    from .plotting import plot_loss_curves

    print(f"wrote {plot_loss_curves(args.gammas, args.out)}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "suite": cmd_suite,
    "plot-loss": cmd_plot_loss,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"elseg {args.command}: error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        # configuration invariants (LossConfig, NetworkConfig, PhantomSpec, ...)
        if isinstance(e, (MvolError, CheckpointError, json.JSONDecodeError)):
            print(f"elseg {args.command}: error: {e}", file=sys.stderr)
            return 1
        print(f"elseg {args.command}: invalid configuration: {e}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as e:
        print(f"elseg {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
