"""Labelled ellipsoid phantoms with extreme label-size imbalance."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .dataio import LabelMap, Manifest, Subject, Volume, make_splits, write_mvol

log = logging.getLogger(__name__)

# label 1 holds the others; fractions are of the whole volume
DESK_FRACTIONS = (0.30, 0.05, 0.01, 0.0008)
DESK_MEANS = (0.0, 1.0, 2.0, 0.3, 2.6)
DESK_STDS = (0.05, 0.15, 0.15, 0.15, 0.15)


class PackingError(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    """What to generate.

    ``fractions[i]`` is the target voxel fraction of label ``i + 1``; the
    background takes the remainder.  ``means``/``stds`` give the intensity
    distribution of every label including background (index 0).
    """

    extent: int = 32
    num_labels: int = 5
    fractions: Sequence[float] | None = None
    means: Sequence[float] | None = None
    stds: Sequence[float] | None = None
    noise_sigma: float = 0.1
    seed: int = 0
    tolerance: float = 0.3
    max_retries: int = 20

    def __post_init__(self):
        L = self.num_labels
        if L < 2:
            raise ValueError("num_labels must be >= 2")
        if self.fractions is None:
            self.fractions = default_fractions(L)
        self.fractions = tuple(float(f) for f in self.fractions)
        if any(f <= 0 for f in self.fractions):
            raise ValueError("label fractions must be positive")
        if sum(self.fractions) > 1:
            raise ValueError(f"label fractions sum to {sum(self.fractions):.4f} > 1")
        if len(self.fractions) != L - 1:
            raise ValueError(f"{L} labels need {L - 1} foreground fractions, got {len(self.fractions)}")
        if self.extent < 4:
            raise ValueError("extent must be >= 4")
        if self.means is None:
            self.means = _default_levels(DESK_MEANS, L, 0.0, 3.0)
        if self.stds is None:
            self.stds = _default_levels(DESK_STDS, L, 0.15, 0.15)
        self.means = tuple(float(m) for m in self.means)
        self.stds = tuple(float(s) for s in self.stds)
        if len(self.means) != L or len(self.stds) != L:
            raise ValueError(f"means and stds need {L} entries (background first)")

    @property
    def background_fraction(self) -> float:
        return 1.0 - sum(self.fractions)


def default_fractions(num_labels: int) -> tuple[float, ...]:
    """Foreground fractions for ``num_labels`` labels.

    Up to five labels this is a prefix of the desk set; beyond that the
    fractions are log-spaced between its largest and smallest entries.
    """
    n = num_labels - 1
    if n <= len(DESK_FRACTIONS):
        return DESK_FRACTIONS[:n]
    return tuple(float(f) for f in np.geomspace(DESK_FRACTIONS[0], DESK_FRACTIONS[-1], n))


def _default_levels(desk, L, lo, hi):
    if L == len(desk):
        return desk
    return (0.0,) + tuple(np.linspace(1.0, hi, L - 1)) if L > 1 else (lo,)


def _ellipsoid(grid, center, radii):
    d = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return d <= 1.0


def _fit_scale(grid, center, shape_radii, target, limit=None):
    """Scale ``shape_radii`` so the voxel count is as close to ``target`` as possible."""
    lo, hi = 0.0, 1.0
    while _ellipsoid(grid, center, np.multiply(shape_radii, hi)).sum() < target:
        hi *= 2
        if hi > 1e3:
            break
    best, best_err = hi, np.inf
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        n = int(_ellipsoid(grid, center, np.multiply(shape_radii, mid)).sum())
        err = abs(n - target)
        if err < best_err:
            best, best_err = mid, err
        if n < target:
            lo = mid
        elif n > target:
            hi = mid
        else:
            break
    return np.multiply(shape_radii, best)


def _try_phantom(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    E = spec.extent
    N = E ** 3
    grid = np.meshgrid(*(np.arange(E, dtype=np.float64),) * 3, indexing="ij", sparse=True)
    labels = np.zeros((E, E, E), np.uint8)
    targets = np.array(spec.fractions) * N
    order = np.argsort(-targets, kind="stable")

    # largest label is the host: its ellipsoid must also hold every nested label
    host = int(order[0]) + 1
    c = (E - 1) / 2 + rng.uniform(-0.04, 0.04, 3) * E
    radii = _fit_scale(grid, c, rng.uniform(0.85, 1.15, 3), targets.sum())
    labels[_ellipsoid(grid, c, radii)] = host

    for idx in order[1:]:
        lab = int(idx) + 1
        shape_r = rng.uniform(0.8, 1.2, 3)
        # size against a free-space centre so the count is not clipped
        r = _fit_scale(grid, np.full(3, (E - 1) / 2), shape_r, targets[idx])
        allowed = ndimage.binary_erosion(labels == host, iterations=1)
        occupied = ndimage.binary_dilation((labels != host) & (labels != 0), iterations=1)
        allowed &= ~occupied
        cand = np.argwhere(allowed)
        if cand.size == 0:
            raise PackingError(f"no room left for label {lab}")
        for _ in range(200):
            centre = cand[rng.integers(len(cand))] + rng.uniform(-0.5, 0.5, 3)
            mask = _ellipsoid(grid, centre, r)
            n = int(mask.sum())
            if abs(n - targets[idx]) > spec.tolerance * targets[idx] or n == 0:
                continue
            if np.all(allowed[mask]):
                labels[mask] = lab
                break
        else:
            raise PackingError(f"could not place label {lab} inside label {host}")
    return labels


def measured_fractions(labels: np.ndarray, num_labels: int) -> np.ndarray:
    return np.bincount(labels.ravel(), minlength=num_labels)[:num_labels] / labels.size


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Nested ellipsoids whose voxel fractions match ``spec.fractions``.

    Each foreground label ends within ``spec.tolerance`` (relative) of its
    target.  The image is a per-label Gaussian intensity plus white noise.
    Deterministic in ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    targets = np.array(spec.fractions)
    for attempt in range(spec.max_retries):
        try:
            labels = _try_phantom(spec, rng)
        except PackingError as e:
            log.debug("phantom attempt %d failed: %s", attempt, e)
            continue
        got = measured_fractions(labels, spec.num_labels)[1:]
        if np.all(np.abs(got - targets) <= spec.tolerance * targets):
            break
    else:
        raise PackingError(
            f"could not pack labels with fractions {spec.fractions} into a {spec.extent}^3 grid "
            f"after {spec.max_retries} attempts; try a larger extent"
        )
    means = np.asarray(spec.means, np.float32)[labels]
    stds = np.asarray(spec.stds, np.float32)[labels]
    image = means + stds * rng.standard_normal(labels.shape).astype(np.float32)
    if spec.noise_sigma > 0:
        image += np.float32(spec.noise_sigma) * rng.standard_normal(labels.shape).astype(np.float32)
    return Volume(image.astype(np.float32)), LabelMap(labels, spec.num_labels)


def subject_seed(seed: int, index: int) -> int:
    """Per-subject seed derived from the global seed and the subject index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def generate_dataset(spec: PhantomSpec, n_subjects: int, out_dir, seed: int = 0, n_sets: int = 5,
                     train_frac: float = 0.7, label_names: Sequence[str] | None = None) -> Manifest:
    """Write ``n_subjects`` phantoms as MVOL pairs plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    counts = np.zeros(spec.num_labels, np.int64)
    subjects = []
    for i in range(n_subjects):
        sid = f"s{i:03d}"
        s = PhantomSpec(**{**spec.__dict__, "seed": subject_seed(seed, i)})
        image, labels = generate_phantom(s)
        counts += np.bincount(labels.data.ravel(), minlength=spec.num_labels)[: spec.num_labels]
        write_mvol(out / "images" / f"{sid}.mvol", image)
        write_mvol(out / "labels" / f"{sid}.mvol", labels)
        subjects.append(Subject(sid, f"images/{sid}.mvol", f"labels/{sid}.mvol"))
    freqs = counts / counts.sum()
    names = list(label_names) if label_names else ["background"] + [f"label{i}" for i in range(1, spec.num_labels)]
    manifest = Manifest(
        subjects=subjects,
        labels=[{"id": i, "name": names[i], "frequency": float(freqs[i])} for i in range(spec.num_labels)],
        splits=make_splits([s.id for s in subjects], n_sets=n_sets, train_frac=train_frac, seed=seed)
        if n_subjects >= 4 else [],
        seed=seed,
        root=out,
    )
    manifest.save(out / "manifest.json")
    return manifest
