"""Rigid training augmentation applied jointly to image and labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataio import LabelMap, Volume

MAX_ROTATION_DEG = 30.0
MAX_SHIFT_FRAC = 0.2
SCALE_RANGE = (0.8, 1.2)
APPLY_PROBABILITY = 0.8


@dataclass(frozen=True)
class RigidTransform:
    """Rotation in the axial (H, W) plane, per-axis shift, isotropic scale."""

    rotation_deg: float = 0.0
    shift_frac: tuple[float, float, float] = (0.0, 0.0, 0.0)
    scale: float = 1.0
    apply: bool = True

    def __post_init__(self):
        if abs(self.rotation_deg) > MAX_ROTATION_DEG:
            raise ValueError(f"rotation {self.rotation_deg} deg outside +-{MAX_ROTATION_DEG}")
        if len(self.shift_frac) != 3 or any(abs(s) > MAX_SHIFT_FRAC for s in self.shift_frac):
            raise ValueError(f"shift fractions {self.shift_frac} outside +-{MAX_SHIFT_FRAC}")
        if not SCALE_RANGE[0] <= self.scale <= SCALE_RANGE[1]:
            raise ValueError(f"scale {self.scale} outside {SCALE_RANGE}")

    @property
    def is_identity(self) -> bool:
        return not self.apply or (self.rotation_deg == 0 and self.scale == 1 and not any(self.shift_frac))


IDENTITY = RigidTransform(apply=False)


def sample_transform(rng: np.random.Generator, p_apply: float = APPLY_PROBABILITY,
                     shared_shift: bool = False) -> RigidTransform:
    """Draw a transform; with probability ``1 - p_apply`` it is the identity.

    Parameters are uniform over their ranges.  ``shared_shift`` draws one
    shift fraction for all three axes instead of three independent ones.
    """
    # always consume the same number of draws so the stream stays aligned
    u = rng.random()
    rot = rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG)
    shift = rng.uniform(-MAX_SHIFT_FRAC, MAX_SHIFT_FRAC, 3)
    if shared_shift:
        shift[:] = shift[0]
    scale = rng.uniform(*SCALE_RANGE)
    if u >= p_apply:
        return IDENTITY
    return RigidTransform(float(rot), tuple(float(s) for s in shift), float(scale), True)


def _inverse_map(t: RigidTransform, shape):
    """Matrix/offset taking output voxel coordinates to input coordinates.

    Forward model about the centre ``c``: ``y = c + s R (x - c) + shift``.
    """
    theta = np.deg2rad(t.rotation_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    rot = np.array([[1.0, 0.0, 0.0], [0.0, cos, -sin], [0.0, sin, cos]])
    center = (np.asarray(shape, dtype=np.float64) - 1) / 2
    shift = np.asarray(t.shift_frac) * np.asarray(shape)
    inv = rot.T / t.scale
    offset = center - inv @ (center + shift)
    return inv, offset


def apply_transform(image: Volume, labels: LabelMap, t: RigidTransform) -> tuple[Volume, LabelMap]:
    """Resample both volumes through ``t`` (trilinear image, nearest labels, zero fill)."""
    if image.extents != labels.extents:
        raise ValueError(f"image grid {image.extents} and label grid {labels.extents} differ")
    if t.is_identity:
        return image, labels
    matrix, offset = _inverse_map(t, image.extents)
    img = ndimage.affine_transform(image.data, matrix, offset, order=1, mode="constant", cval=0.0)
    lab = ndimage.affine_transform(labels.data, matrix, offset, order=0, mode="constant", cval=0)
    return Volume(img.astype(np.float32), image.spacing), LabelMap(lab, labels.num_labels, labels.spacing)
