"""Training, validation and multi-split experiment orchestration."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import volgrad as vg
from .augment import apply_transform, sample_transform
from .dataio import LabelMap, Manifest, Volume, label_frequencies, preprocess
from .elnet import ELNet, NetworkConfig, load_checkpoint, save_checkpoint
from .losses import LossConfig, compute_loss_logits, label_weights
from .optim import Nadam, NadamConfig
from .plotting import write_suite_curves

log = logging.getLogger(__name__)


@dataclass
class TrainRun:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: NadamConfig = field(default_factory=NadamConfig)
    epochs: int = 30
    split_set: int = 0
    seed: int = 0
    out_dir: Path | None = None
    augment: bool = True
    validate: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: list[float | None]
    val_dice_mean: float | None
    seconds: float


@dataclass
class TrainResult:
    net: ELNet
    optimizer: Nadam
    log: list[EpochRecord]
    val_subject_dice: dict[str, list[float | None]]
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


# -- metrics -------------------------------------------------------------------


def hard_dice(pred, gt, num_labels: int) -> list[float | None]:
    """Dice ``2|P & G| / (|P| + |G|)`` of every label on hard label maps.

    ``None`` marks a label absent from both maps.
    """
    pred = np.asarray(getattr(pred, "data", pred)).ravel()
    gt = np.asarray(getattr(gt, "data", gt)).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth grids differ")
    p_count = np.bincount(pred, minlength=num_labels)[:num_labels]
    g_count = np.bincount(gt, minlength=num_labels)[:num_labels]
    inter = np.bincount(gt[pred == gt], minlength=num_labels)[:num_labels]
    out = []
    for i in range(num_labels):
        denom = int(p_count[i] + g_count[i])
        out.append(None if denom == 0 else 2.0 * int(inter[i]) / denom)
    return out


def mean_present(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-voxel argmax; ties resolve to the lowest label index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def predict(model, volume) -> tuple[LabelMap, float]:
    """Inference-mode segmentation.  ``model`` is an ELNet or a checkpoint path."""
    net = model if isinstance(model, ELNet) else load_checkpoint(model)[0]
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    if data.shape != (net.config.extent,) * 3:
        raise ValueError(f"volume extent {data.shape} does not match the network's {(net.config.extent,) * 3}")
    t0 = time.perf_counter()
    probs = net.predict_probs(data[None])
    labels = argmax_labels(probs)
    return LabelMap(labels, net.config.num_labels), time.perf_counter() - t0


def evaluate(net: ELNet, subjects: Mapping[str, tuple[Volume, LabelMap]]) -> dict[str, list[float | None]]:
    L = net.config.num_labels
    return {sid: hard_dice(predict(net, img)[0], lab, L) for sid, (img, lab) in subjects.items()}


def aggregate_subjects(per_subject: Mapping[str, list[float | None]], num_labels: int) -> list[float | None]:
    return [mean_present([d[i] for d in per_subject.values()]) for i in range(num_labels)]


# -- training ------------------------------------------------------------------


def _load_subjects(manifest: Manifest, ids, extent: int) -> dict[str, tuple[Volume, LabelMap]]:
    out = {}
    for sid in ids:
        img, lab = manifest.load(sid)
        if img.extents != (extent,) * 3:
            img, lab = preprocess(img, lab, extent)
        out[sid] = (img, lab)
    return out


def resolve_loss(loss: LossConfig, manifest: Manifest, train_ids) -> LossConfig:
    """Fill in label weights from training-split frequencies if unset."""
    if loss.label_weights is not None:
        return loss
    freqs = label_frequencies(manifest, train_ids)
    return loss.with_weights(label_weights(freqs))


def _write_csv(path: Path, records: list[EpochRecord], num_labels: int) -> None:
    header = ["epoch", "train_loss", "val_dice_mean"] + [f"val_dice_label_{i}" for i in range(num_labels)] + ["seconds"]

    def fmt(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in records:
            dice = r.val_dice if r.val_dice else [None] * num_labels
            w.writerow([r.epoch, fmt(r.train_loss), fmt(r.val_dice_mean)] + [fmt(d) for d in dice] + [f"{r.seconds:.3f}"])


def read_csv_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def train(run: TrainRun, manifest: Manifest) -> TrainResult:
    """Augment -> forward -> loss -> backward -> Nadam step, one subject at a time.

    Validation (hard Dice on the split's validation subjects) runs after each
    epoch and never feeds back into the updates.  With ``run.out_dir`` set,
    writes ``log.csv``, ``final.ckpt`` and ``best.ckpt`` there.
    """
    manifest.validate()
    train_ids, val_ids = manifest.split(run.split_set)
    cfg = run.network
    if manifest.num_labels != cfg.num_labels:
        raise ValueError(f"manifest has {manifest.num_labels} labels, network expects {cfg.num_labels}")
    loss_cfg = resolve_loss(run.loss, manifest, train_ids)
    loss_cfg.check_labels(cfg.num_labels)

    train_data = _load_subjects(manifest, train_ids, cfg.extent)
    val_data = _load_subjects(manifest, val_ids, cfg.extent) if run.validate else {}

    net = ELNet(cfg, seed=run.seed)
    opt = Nadam(run.optimizer)
    out = Path(run.out_dir) if run.out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    records: list[EpochRecord] = []
    best_score, best_path = -math.inf, None
    val_subject_dice: dict[str, list[float | None]] = {}
    for epoch in range(1, run.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([run.seed, epoch])
        losses = []
        for sid in (train_ids[i] for i in rng.permutation(len(train_ids))):
            img, lab = train_data[sid]
            if run.augment:
                img, lab = apply_transform(img, lab, sample_transform(rng))
            logits = net.logits(img.data[None], training=True, rng=rng)
            target = lab.data
            loss = vg.scalar_loss(logits, lambda z: compute_loss_logits(z, target, loss_cfg))
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at epoch {epoch}, subject {sid}")
            grads = vg.backward(loss, net.params)
            opt.step(net.params, grads)
            losses.append(value)

        if val_data:
            val_subject_dice = evaluate(net, val_data)
            per_label = aggregate_subjects(val_subject_dice, cfg.num_labels)
            score = mean_present(per_label)
        else:
            per_label, score = [], None
        rec = EpochRecord(epoch, float(np.mean(losses)), per_label, score, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d loss %.5f val dice %s", epoch, rec.train_loss, score)
        if out is not None:
            _write_csv(out / "log.csv", records, cfg.num_labels)
            if score is not None and score > best_score:
                best_score = score
                best_path = save_checkpoint(out / "best.ckpt", net)

    final = save_checkpoint(out / "final.ckpt", net, opt.state_arrays()) if out is not None else None
    return TrainResult(net, opt, records, val_subject_dice, final, best_path)


# -- experiment suite ------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-label validation Dice aggregated over experiment sets.

    ``label_mean``/``label_std`` are across sets of the per-set mean over
    validation subjects.  ``average`` is over foreground labels (1..L-1).
    """

    loss_name: str
    num_labels: int
    sets: list[dict]
    label_mean: list[float | None]
    label_std: list[float | None]
    average_mean: float | None
    average_std: float | None

    def to_json(self) -> dict:
        return asdict(self)


def _set_summary(k: int, seed: int, result_dice: dict, logs: list[EpochRecord], L: int) -> dict:
    per_label = aggregate_subjects(result_dice, L)
    return {
        "set": k,
        "seed": seed,
        "subjects": result_dice,
        "label_mean": per_label,
        "average": mean_present(per_label[1:]),
        "log": [asdict(r) for r in logs],
    }


def build_report(name: str, sets: list[dict], num_labels: int) -> EvalReport:
    means, stds = [], []
    for i in range(num_labels):
        vals = [s["label_mean"][i] for s in sets if s["label_mean"][i] is not None]
        means.append(float(np.mean(vals)) if vals else None)
        stds.append(float(np.std(vals)) if vals else None)
    avgs = [s["average"] for s in sets if s["average"] is not None]
    return EvalReport(
        name, num_labels, sets, means, stds,
        float(np.mean(avgs)) if avgs else None,
        float(np.std(avgs)) if avgs else None,
    )


def _run_cell(args) -> dict:
    name, k, seed, run_kwargs, manifest_path, cell_dir = args
    manifest = Manifest.load_file(manifest_path)
    run = TrainRun(split_set=k, seed=seed, out_dir=cell_dir, **run_kwargs)
    res = train(run, manifest)
    summary = _set_summary(k, seed, res.val_subject_dice, res.log, run.network.num_labels)
    if cell_dir is not None:
        (Path(cell_dir) / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def run_experiment_suite(
    loss_configs: Mapping[str, LossConfig],
    manifest: Manifest | str | Path,
    n_sets: int = 5,
    seed: int = 0,
    network: NetworkConfig | None = None,
    optimizer: NadamConfig | None = None,
    epochs: int = 30,
    out_dir=None,
    jobs: int = 1,
    set_seeds: Sequence[int] | None = None,
) -> dict[str, EvalReport]:
    """Train and evaluate every (loss, split set) cell and aggregate per loss.

    Every loss sees the same split and the same initialisation seed within a
    set (``seed + k`` unless ``set_seeds`` is given), so differences between
    rows come from the loss alone.  Completed cells are persisted under
    ``out_dir/<loss>/set<k>/`` together with ``report.json``, ``table.md`` and
    SVG curves.
    """
    if isinstance(manifest, (str, Path)):
        manifest_path = Path(manifest)
    else:
        manifest_path = manifest.root / "manifest.json"
    m = Manifest.load_file(manifest_path)
    if n_sets > len(m.splits):
        raise ValueError(f"requested {n_sets} sets but the manifest defines {len(m.splits)} splits")
    network = network or NetworkConfig(num_labels=m.num_labels)
    seeds = list(set_seeds) if set_seeds is not None else [seed + k for k in range(n_sets)]
    if len(seeds) != n_sets:
        raise ValueError("set_seeds must have one entry per set")
    out = Path(out_dir) if out_dir is not None else None

    cells = []
    for name, lc in loss_configs.items():
        run_kwargs = dict(network=network, loss=lc, optimizer=optimizer or NadamConfig(), epochs=epochs)
        for k in range(n_sets):
            cell_dir = out / name / f"set{k}" if out is not None else None
            cells.append((name, k, seeds[k], run_kwargs, manifest_path, cell_dir))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    reports = {}
    for name in loss_configs:
        sets = sorted((r for c, r in zip(cells, results) if c[0] == name), key=lambda s: s["set"])
        reports[name] = build_report(name, sets, network.num_labels)

    if out is not None:
        (out / "report.json").write_text(
            json.dumps({k: r.to_json() for k, r in reports.items()}, indent=1, sort_keys=True)
        )
        (out / "table.md").write_text(comparison_table(reports, [lab["name"] for lab in m.labels]))
        write_suite_curves(reports, out)
    return reports


def comparison_table(reports: Mapping[str, EvalReport], label_names: Sequence[str] | None = None) -> str:
    """Rows = losses, columns = labels, cells = mean+-std in percent."""
    any_report = next(iter(reports.values()))
    L = any_report.num_labels
    names = list(label_names) if label_names else [str(i) for i in range(L)]

    def cell(m, s):
        return "-" if m is None else f"{100 * m:.0f}±{100 * s:.0f}"

    lines = ["| loss | " + " | ".join(f"{i}. {names[i]}" for i in range(L)) + " | average |",
             "|---" * (L + 2) + "|"]
    for name, r in reports.items():
        cells = [cell(m, s) for m, s in zip(r.label_mean, r.label_std)]
        lines.append(f"| {name} | " + " | ".join(cells) + f" | {cell(r.average_mean, r.average_std)} |")
    return "\n".join(lines) + "\n"
