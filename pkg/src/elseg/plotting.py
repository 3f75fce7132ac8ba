"""Deterministic SVG line plots (no timestamps, fixed element ids)."""
from __future__ import annotations

import functools

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import nonlinearity, slope_stationary_point  # noqa: E402


# fixed ids, text kept as text, every sample kept (simplification is decided when a line is built)
_RC = {"svg.hashsalt": "elseg", "svg.fonttype": "none", "path.simplify": False}


def _reproducible(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with plt.rc_context(_RC):
            return fn(*args, **kwargs)

    return wrapper


def _save_svg(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


@_reproducible
def plot_loss_curves(gammas: Sequence[float], path, n_points: int = 400) -> Path:
    """``(-ln x)^gamma`` for each gamma plus the linear ``1 - x`` on (0.01, 1).

    Each curve is a ``<g id="curve-...">`` element.  For ``0 < gamma < 1`` the
    point of smallest slope magnitude is marked (``id="marker-..."``).
    """
    if any(g <= 0 for g in gammas):
        raise ValueError("gamma values must be > 0")
    x = np.linspace(0.01, 1.0, n_points)
    fig, ax = plt.subplots(figsize=(5, 4))
    for g in gammas:
        (line,) = ax.plot(x, nonlinearity(x, g), label=f"(-ln x)^{g:g}")
        line.set_gid(f"curve-gamma-{g:g}")
        if 0 < g < 1:
            xs = slope_stationary_point(g)
            (mk,) = ax.plot([xs], [nonlinearity(xs, g)], "o", color=line.get_color())
            mk.set_gid(f"marker-gamma-{g:g}")
    (lin,) = ax.plot(x, 1 - x, "k--", label="1 - x")
    lin.set_gid("curve-linear")
    ax.set_xlabel("x (Dice or probability)")
    ax.set_ylabel("loss")
    ax.set_ylim(0, 3)
    ax.legend()
    return _save_svg(fig, path)


@_reproducible
def plot_series(series: Mapping[str, Sequence[float | None]], path, ylabel: str, xlabel: str = "epoch") -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in series.items():
        y = np.array([np.nan if v is None else v for v in ys], dtype=float)
        (line,) = ax.plot(np.arange(1, len(y) + 1), y, label=name)
        line.set_gid(f"curve-{name}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    return _save_svg(fig, path)


def write_suite_curves(reports, out_dir) -> list[Path]:
    """Validation Dice and training loss vs epoch, averaged over sets."""
    dice, loss = {}, {}
    for name, r in reports.items():
        logs = [s["log"] for s in r.sets]
        n = min(len(lg) for lg in logs)

        def avg(key):
            out = []
            for e in range(n):
                vals = [lg[e][key] for lg in logs if lg[e][key] is not None]
                out.append(float(np.mean(vals)) if vals else None)
            return out

        dice[name] = avg("val_dice_mean")
        loss[name] = avg("train_loss")
    out = Path(out_dir)
    return [
        plot_series(dice, out / "dice_vs_epoch.svg", "validation Dice"),
        plot_series(loss, out / "loss_vs_epoch.svg", "training loss"),
    ]
