"""Volume persistence, preprocessing, manifests and experiment splits.

MVOL layout::

    8 bytes  magic  b"MVOL\\x00001"
    4 bytes  little-endian uint32 header length
    n bytes  UTF-8 JSON {dtype, extents, spacing, kind, num_labels?}
    payload  little-endian voxels, row-major (D, H, W)
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MVOL_MAGIC = b"MVOL\x00001"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"a Volume is 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape


@dataclass
class LabelMap:
    data: np.ndarray
    num_labels: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"a LabelMap is 3D, got shape {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_labels):
            raise ValueError(f"label values must lie in [0, {self.num_labels}), found max {arr.max()}")
        if self.num_labels > 256:
            raise ValueError("labels are stored as u8; at most 256 labels")
        self.data = arr.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def extents(self):
        return self.data.shape


class MvolError(ValueError):
    """Malformed MVOL file.  ``code`` is one of the class constants."""

    BAD_MAGIC = "bad_magic"
    TRUNCATED_HEADER = "truncated_header"
    BAD_HEADER = "bad_header"
    PAYLOAD_SIZE_MISMATCH = "payload_size_mismatch"
    LABEL_OUT_OF_RANGE = "label_out_of_range"

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def mvol_bytes(obj: Volume | LabelMap) -> bytes:
    if isinstance(obj, LabelMap):
        header = {"dtype": "u8", "extents": list(obj.extents), "spacing": list(obj.spacing),
                  "kind": "labels", "num_labels": obj.num_labels}
    else:
        header = {"dtype": "f32", "extents": list(obj.extents), "spacing": list(obj.spacing), "kind": "image"}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(obj.data, dtype=_DTYPES[header["dtype"]]).tobytes()
    return MVOL_MAGIC + struct.pack("<I", len(raw)) + raw + payload


def write_mvol(path, obj: Volume | LabelMap) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(mvol_bytes(obj))
    return path


def parse_mvol(blob: bytes, source: str = "<bytes>") -> Volume | LabelMap:
    if blob[:8] != MVOL_MAGIC:
        raise MvolError(MvolError.BAD_MAGIC, f"{source}: bad magic, not an MVOL file")
    if len(blob) < 12:
        raise MvolError(MvolError.TRUNCATED_HEADER, f"{source}: truncated header")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise MvolError(MvolError.TRUNCATED_HEADER, f"{source}: truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        extents = tuple(int(n) for n in header["extents"])
        spacing = tuple(float(s) for s in header["spacing"])
        kind = header["kind"]
    except (ValueError, KeyError, TypeError) as e:
        raise MvolError(MvolError.BAD_HEADER, f"{source}: invalid header ({e})") from e
    if len(extents) != 3 or kind not in ("image", "labels"):
        raise MvolError(MvolError.BAD_HEADER, f"{source}: invalid header {header}")
    payload = blob[12 + hlen:]
    expected = int(np.prod(extents)) * dtype.itemsize
    if len(payload) != expected:
        raise MvolError(
            MvolError.PAYLOAD_SIZE_MISMATCH,
            f"{source}: payload size mismatch, header implies {expected} bytes but found {len(payload)}",
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(extents)
    if kind == "labels":
        num_labels = int(header.get("num_labels", 0))
        if data.size and int(data.max()) >= num_labels:
            raise MvolError(
                MvolError.LABEL_OUT_OF_RANGE,
                f"{source}: voxel label {int(data.max())} is not below num_labels={num_labels}",
            )
        return LabelMap(data.copy(), num_labels, spacing)
    return Volume(data.astype(np.float32), spacing)


def read_mvol(path) -> Volume | LabelMap:
    path = Path(path)
    return parse_mvol(path.read_bytes(), str(path))


# -- preprocessing ---------------------------------------------------------------


def _resample(data: np.ndarray, out_shape, order: int) -> np.ndarray:
    """Sample ``data`` on a grid of ``out_shape`` covering the same extent.

    Voxel centres are aligned (``(j + 0.5) * n_in / n_out - 0.5``); values
    outside are clamped to the edge.
    """
    if tuple(out_shape) == data.shape:
        return data.copy()
    coords = [(np.arange(m) + 0.5) * (n / m) - 0.5 for n, m in zip(data.shape, out_shape)]
    grid = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(data, grid, order=order, mode="nearest")


def resample_isotropic(image: Volume, labels: LabelMap) -> tuple[Volume, LabelMap]:
    target = min(image.spacing)
    shape = tuple(max(1, int(math.floor(n * s / target + 0.5))) for n, s in zip(image.extents, image.spacing))
    img = _resample(image.data, shape, order=1).astype(np.float32)
    lab = _resample(labels.data, shape, order=0)
    iso = (target,) * 3
    return Volume(img, iso), LabelMap(lab, labels.num_labels, iso)


def pad_to_cube(image: Volume, labels: LabelMap) -> tuple[Volume, LabelMap]:
    """Zero-pad the shorter axes (split evenly, extra voxel after)."""
    n = max(image.extents)
    pads = [((n - e) // 2, n - e - (n - e) // 2) for e in image.extents]
    return (
        Volume(np.pad(image.data, pads), image.spacing),
        LabelMap(np.pad(labels.data, pads), labels.num_labels, labels.spacing),
    )


def preprocess(image: Volume, labels: LabelMap, target_extent: int = 32) -> tuple[Volume, LabelMap]:
    """Isotropic resampling at the minimum spacing, cube padding, resize to ``target_extent``^3.

    Images are interpolated trilinearly, labels by nearest neighbour.
    """
    if image.extents != labels.extents:
        raise ValueError(f"image grid {image.extents} and label grid {labels.extents} differ")
    image, labels = resample_isotropic(image, labels)
    image, labels = pad_to_cube(image, labels)
    n = image.extents[0]
    shape = (target_extent,) * 3
    spacing = (image.spacing[0] * n / target_extent,) * 3
    img = _resample(image.data, shape, order=1).astype(np.float32)
    lab = _resample(labels.data, shape, order=0)
    return Volume(img, spacing), LabelMap(lab, labels.num_labels, spacing)


# -- manifests -------------------------------------------------------------------


@dataclass
class Subject:
    id: str
    image: str
    labels: str


@dataclass
class Manifest:
    """Dataset index.  Paths are relative to ``root``.

    ``splits[k] = (train_ids, val_ids)`` for experiment set ``k``.
    """

    subjects: list[Subject]
    labels: list[dict]
    splits: list[tuple[list[str], list[str]]] = field(default_factory=list)
    seed: int | None = None
    root: Path = Path(".")

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def subject(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(f"unknown subject {sid!r}")

    def image_path(self, sid: str) -> Path:
        return self.root / self.subject(sid).image

    def label_path(self, sid: str) -> Path:
        return self.root / self.subject(sid).labels

    def load(self, sid: str) -> tuple[Volume, LabelMap]:
        return read_mvol(self.image_path(sid)), read_mvol(self.label_path(sid))

    def frequencies(self) -> np.ndarray:
        return np.array([lab["frequency"] for lab in self.labels], dtype=np.float64)

    def split(self, k: int) -> tuple[list[str], list[str]]:
        if not 0 <= k < len(self.splits):
            raise IndexError(f"split set {k} does not exist; manifest has {len(self.splits)}")
        train, val = self.splits[k]
        return list(train), list(val)

    def to_json(self) -> dict:
        return {
            "subjects": [{"id": s.id, "image": s.image, "labels": s.labels} for s in self.subjects],
            "labels": self.labels,
            "splits": [[list(t), list(v)] for t, v in self.splits],
            "seed": self.seed,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_file(cls, path, validate: bool = True) -> "Manifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(
            subjects=[Subject(**s) for s in d["subjects"]],
            labels=d["labels"],
            splits=[(list(t), list(v)) for t, v in d.get("splits", [])],
            seed=d.get("seed"),
            root=path.parent,
        )
        if validate:
            m.validate()
        return m

    def validate(self, deep: bool = False) -> None:
        """Check file presence, frequency normalisation and split consistency.

        ``deep=True`` also parses every file (round-trip check).
        """
        for s in self.subjects:
            for p in (self.root / s.image, self.root / s.labels):
                if not p.is_file():
                    raise FileNotFoundError(f"manifest references a missing file: {p}")
                if deep:
                    read_mvol(p)
        f = self.frequencies()
        if self.labels and abs(f.sum() - 1.0) > 1e-6:
            raise ValueError(f"label frequencies sum to {f.sum()}, expected 1")
        ids = {s.id for s in self.subjects}
        for k, (train, val) in enumerate(self.splits):
            if set(train) & set(val):
                raise ValueError(f"split {k}: train and validation overlap")
            if set(train) | set(val) != ids:
                raise ValueError(f"split {k}: does not cover every subject exactly once")


def label_frequencies(manifest: Manifest, subject_ids: Sequence[str] | None = None) -> np.ndarray:
    """Voxel fraction of each label pooled over ``subject_ids`` (default: all)."""
    ids = [s.id for s in manifest.subjects] if subject_ids is None else list(subject_ids)
    counts = np.zeros(manifest.num_labels, dtype=np.int64)
    for sid in ids:
        lab = read_mvol(manifest.label_path(sid))
        counts += np.bincount(lab.data.ravel(), minlength=manifest.num_labels)[: manifest.num_labels]
    total = counts.sum()
    if total == 0:
        raise ValueError("no voxels in the requested subjects")
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        log.warning("labels %s never occur in the selected subjects; frequency reported as 0", missing.tolist())
    return counts / total


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_splits(subject_ids: Sequence[str] | int, n_sets: int = 5, train_frac: float = 0.7,
                seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Independent shuffles; the first ``round(train_frac * n)`` of each are training."""
    ids = [f"{i:03d}" for i in range(subject_ids)] if isinstance(subject_ids, int) else list(subject_ids)
    n = len(ids)
    if n < 4:
        raise ValueError(f"need at least 4 subjects to split, got {n}")
    n_train = round_half_up(train_frac * n)
    rng = np.random.default_rng(seed)
    splits = []
    for _ in range(n_sets):
        order = rng.permutation(n)
        splits.append(([ids[i] for i in order[:n_train]], [ids[i] for i in order[n_train:]]))
    return splits
