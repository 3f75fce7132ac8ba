"""Segmentation losses for highly unbalanced label sizes.

Every loss takes softmax probabilities ``probs`` (``L x D x H x W``) and an
integer label volume ``labels`` (``D x H x W``) and returns ``(value, grad)``
where ``grad`` is the analytic derivative with respect to ``probs``.  All
arithmetic is float64 regardless of the input dtype.

The exponential logarithmic family is::

    L_exp   = w_dice * L_dice + w_cross * L_cross
    L_dice  = mean_i (-ln Dice_i) ** gamma_dice
    L_cross = mean_x w_l(x) * (-ln p_l(x)) ** gamma_cross

with the soft Dice ``Dice_i = (2 sum_x d_i p_i + eps) / (sum_x (d_i + p_i) + eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

PROB_FLOOR = 1e-7
LOG_FLOOR = 1e-7

KINDS = ("exp_log_combined", "exp_log_dice", "exp_cross_entropy", "linear_dice", "focal")


@dataclass
class LossConfig:
    """Which loss to use and its hyperparameters.

    ``label_weights`` may be left as None and filled in later from the
    training-set label frequencies (see :func:`label_weights`).
    """

    kind: str = "exp_log_combined"
    gamma_dice: float = 0.3
    gamma_cross: float = 0.3
    epsilon: float = 1.0
    w_dice: float = 0.8
    w_cross: float = 0.2
    label_weights: Sequence[float] | None = None
    dice_include_background: bool = True
    focal_gamma: float = 2.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.gamma_dice <= 0 or self.gamma_cross <= 0:
            raise ValueError("gamma_dice and gamma_cross must be > 0")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.w_dice < 0 or self.w_cross < 0:
            raise ValueError("w_dice and w_cross must be >= 0")
        if self.kind == "exp_log_combined" and self.w_dice + self.w_cross <= 0:
            raise ValueError("w_dice + w_cross must be > 0 for the combined loss")
        if self.label_weights is not None:
            w = np.asarray(self.label_weights, dtype=np.float64)
            if w.ndim != 1 or np.any(w < 0):
                raise ValueError("label_weights must be a vector of non-negative floats")
            self.label_weights = tuple(float(v) for v in w)

    @property
    def gamma(self) -> float:
        if self.gamma_dice != self.gamma_cross:
            raise AttributeError("gamma_dice and gamma_cross differ; read them individually")
        return self.gamma_dice

    @gamma.setter
    def gamma(self, value: float) -> None:
        if value <= 0:
            raise ValueError("gamma must be > 0")
        self.gamma_dice = self.gamma_cross = float(value)

    def with_weights(self, weights) -> "LossConfig":
        return replace(self, label_weights=tuple(float(w) for w in weights))

    def check_labels(self, num_labels: int) -> None:
        if self.label_weights is not None and len(self.label_weights) != num_labels:
            raise ValueError(f"label_weights has {len(self.label_weights)} entries but there are {num_labels} labels")


def label_weights(frequencies) -> np.ndarray:
    """``w_l = (sum_k f_k / f_l) ** 0.5``."""
    f = np.asarray(frequencies, dtype=np.float64)
    if np.any(f <= 0):
        empty = [int(i) for i in np.flatnonzero(f <= 0)]
        raise ValueError(
            f"label(s) {empty} have zero frequency in the training data; merge or drop the empty label(s) "
            "before computing label weights"
        )
    return np.sqrt(f.sum() / f)


def one_hot(labels: np.ndarray, num_labels: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_labels):
        raise ValueError(f"label values must lie in [0, {num_labels}), found range [{labels.min()}, {labels.max()}]")
    return (np.arange(num_labels).reshape((num_labels,) + (1,) * labels.ndim) == labels[None]).astype(np.float64)


def _check(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[1:] != labels.shape:
        raise ValueError(f"probs grid {probs.shape[1:]} does not match labels grid {labels.shape}")
    return probs, labels


def _soft_dice_parts(probs, labels, epsilon):
    L = probs.shape[0]
    delta = one_hot(labels, L).reshape(L, -1)
    p = probs.reshape(L, -1)
    num = 2.0 * (delta * p).sum(axis=1) + epsilon
    den = delta.sum(axis=1) + p.sum(axis=1) + epsilon
    return delta, num, den


def soft_dice_per_label(probs, labels, epsilon: float = 1.0) -> np.ndarray:
    """Soft Dice of every label, including labels missing from ``labels``."""
    probs, labels = _check(probs, labels)
    _, num, den = _soft_dice_parts(probs, labels, epsilon)
    return num / den


def _soft_dice_with_grad(probs, labels, epsilon):
    # d Dice_i / d p_i(x) = (2 d_i(x) den_i - num_i) / den_i^2; zero for other labels
    delta, num, den = _soft_dice_parts(probs, labels, epsilon)
    dice = num / den
    jac = (2.0 * delta * den[:, None] - num[:, None]) / (den[:, None] ** 2)
    return dice, jac.reshape(probs.shape)


def _check_dice(dice):
    dice = np.asarray(dice, dtype=np.float64)
    if np.any(dice <= 0) or np.any(dice > 1 + 1e-9):
        raise ValueError(f"Dice values must lie in (0, 1], got {dice}")
    return np.minimum(dice, 1.0)


def exp_log_dice_value(dice, gamma_dice: float) -> float:
    """``mean_i (-ln Dice_i) ** gamma`` for a vector of Dice scores."""
    dice = _check_dice(dice)
    return float(np.mean(np.power(-np.log(dice), gamma_dice)))


def exp_log_dice_grad(dice, gamma_dice: float) -> np.ndarray:
    """Derivative of :func:`exp_log_dice_value` w.r.t. each Dice score.

    ``-ln Dice`` is floored at 1e-7 so the derivative stays finite at
    ``Dice = 1`` when ``gamma < 1``.
    """
    dice = _check_dice(dice)
    t = np.maximum(-np.log(dice), LOG_FLOOR)
    return -gamma_dice * np.power(t, gamma_dice - 1.0) / dice / dice.size


def _select_mask(L, include_background):
    mask = np.ones(L, dtype=bool)
    if not include_background:
        mask[0] = False
    return mask


def exp_log_dice_loss(probs, labels, gamma_dice: float = 0.3, epsilon: float = 1.0, include_background: bool = True):
    """Exponential logarithmic Dice loss and its gradient w.r.t. ``probs``."""
    probs, labels = _check(probs, labels)
    dice, jac = _soft_dice_with_grad(probs, labels, epsilon)
    mask = _select_mask(probs.shape[0], include_background)
    value = exp_log_dice_value(dice[mask], gamma_dice)
    dL = np.zeros_like(dice)
    dL[mask] = exp_log_dice_grad(dice[mask], gamma_dice)
    grad = jac * dL.reshape((-1,) + (1,) * labels.ndim)
    return value, grad


def linear_dice_value(dice) -> float:
    return float(np.mean(1.0 - _check_dice(dice)))


def linear_dice_loss(probs, labels, epsilon: float = 1.0, include_background: bool = True):
    """``mean_i (1 - Dice_i)``, the linear Dice baseline."""
    probs, labels = _check(probs, labels)
    dice, jac = _soft_dice_with_grad(probs, labels, epsilon)
    mask = _select_mask(probs.shape[0], include_background)
    value = float(np.mean(1.0 - dice[mask]))
    dL = np.where(mask, -1.0 / mask.sum(), 0.0)
    return value, jac * dL.reshape((-1,) + (1,) * labels.ndim)


def _true_label_probs(probs, labels):
    return np.take_along_axis(probs, labels[None].astype(np.intp), axis=0)[0]


def _scatter_true(grad_true, labels, shape):
    grad = np.zeros(shape, dtype=np.float64)
    np.put_along_axis(grad, labels[None].astype(np.intp), grad_true[None], axis=0)
    return grad


def _voxel_weights(weights, labels, L):
    if weights is None:
        return np.ones(labels.shape)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (L,):
        raise ValueError(f"expected {L} label weights, got {w.shape}")
    return w[labels]


def weighted_exp_cross_entropy(probs, labels, weights=None, gamma_cross: float = 0.3):
    """``mean_x w_l(x) (-ln p_l(x)) ** gamma`` and its gradient.

    Probabilities are clamped to [1e-7, 1] before the log; clamped entries
    (including ``p == 1``) get zero gradient.
    """
    probs, labels = _check(probs, labels)
    one_hot(labels, probs.shape[0])
    w = _voxel_weights(weights, labels, probs.shape[0])
    p = _true_label_probs(probs, labels)
    pc = np.clip(p, PROB_FLOOR, 1.0)
    t = -np.log(pc)
    n = labels.size
    value = float(np.sum(w * np.power(t, gamma_cross)) / n)
    # exact derivative wherever -ln p > 0; p == 1 exactly is treated as clamped
    safe = np.where(t > 0, t, 1.0)
    g = np.where(t > 0, -w * gamma_cross * np.power(safe, gamma_cross - 1.0) / pc / n, 0.0)
    g = np.where((p >= PROB_FLOOR) & (p <= 1.0), g, 0.0)
    return value, _scatter_true(g, labels, probs.shape)


def focal_loss(probs, labels, weights=None, gamma: float = 2.0):
    """``mean_x w_l (1 - p_l) ** gamma (-ln p_l)`` and its gradient."""
    probs, labels = _check(probs, labels)
    one_hot(labels, probs.shape[0])
    w = _voxel_weights(weights, labels, probs.shape[0])
    p = _true_label_probs(probs, labels)
    pc = np.clip(p, PROB_FLOOR, 1.0)
    q = 1.0 - pc
    t = -np.log(pc)
    n = labels.size
    value = float(np.sum(w * np.power(q, gamma) * t) / n)
    if gamma == 0:
        dmod = np.zeros_like(q)
    else:
        dmod = np.where(q > 0, -gamma * np.power(np.where(q > 0, q, 1.0), gamma - 1.0), 0.0)
    g = w * (dmod * t - np.power(q, gamma) / pc) / n
    g = np.where((p >= PROB_FLOOR) & (p <= 1.0), g, 0.0)
    return value, _scatter_true(g, labels, probs.shape)


def combined_loss(probs, labels, config: LossConfig):
    """``w_dice * L_dice + w_cross * L_cross``."""
    if config.kind != "exp_log_combined":
        raise ValueError(f"combined_loss needs kind='exp_log_combined', got {config.kind!r}")
    vd, gd = exp_log_dice_loss(probs, labels, config.gamma_dice, config.epsilon, config.dice_include_background)
    vc, gc = weighted_exp_cross_entropy(probs, labels, config.label_weights, config.gamma_cross)
    return config.w_dice * vd + config.w_cross * vc, config.w_dice * gd + config.w_cross * gc


def compute_loss(probs, labels, config: LossConfig):
    """Dispatch on ``config.kind``; returns ``(value, grad)``."""
    config.check_labels(np.asarray(probs).shape[0])
    if config.kind == "exp_log_combined":
        return combined_loss(probs, labels, config)
    if config.kind == "exp_log_dice":
        return exp_log_dice_loss(probs, labels, config.gamma_dice, config.epsilon, config.dice_include_background)
    if config.kind == "exp_cross_entropy":
        return weighted_exp_cross_entropy(probs, labels, config.label_weights, config.gamma_cross)
    if config.kind == "linear_dice":
        return linear_dice_loss(probs, labels, config.epsilon, config.dice_include_background)
    return focal_loss(probs, labels, config.label_weights, config.focal_gamma)


# -- logit-space evaluation ----------------------------------------------------
#
# Training evaluates the losses on logits.  Log-probabilities come from a
# log-softmax, so -ln p_l stays exact when p_l underflows and the
# cross-entropy terms need no probability clamp.  With the clamp, a label whose
# probability has collapsed below 1e-7 gets no gradient at all and never
# recovers; in logit space its gradient stays finite.


def _softmax_pullback(probs, grad_p):
    """Chain ``d loss / d probs`` through the channel softmax."""
    return probs * (grad_p - (grad_p * probs).sum(axis=0, keepdims=True))


def _cross_terms(logp, labels, weights, dvalue_dt):
    """Value and logit gradient of ``mean_x f(t(x))`` with ``t = -log p_l``.

    ``dvalue_dt(t) -> (f(t), f'(t))`` per voxel (weights not applied).
    """
    L = logp.shape[0]
    w = _voxel_weights(weights, labels, L)
    t = np.maximum(-_true_label_probs(logp, labels), 0.0)
    f, df = dvalue_dt(t)
    n = labels.size
    value = float(np.sum(w * f) / n)
    coef = w * df / n
    # dt/dz_j = p_j - [j == l]
    grad = np.exp(logp) * coef[None]
    grad -= _scatter_true(coef, labels, logp.shape)
    return value, grad


def _exp_cross_dt(gamma):
    def fn(t):
        safe = np.where(t > 0, t, 1.0)
        return np.power(t, gamma), np.where(t > 0, gamma * np.power(safe, gamma - 1.0), 0.0)

    return fn


def _focal_dt(gamma):
    def fn(t):
        q = -np.expm1(-t)  # 1 - p_l, accurate for p_l close to 1
        safe = np.where(q > 0, q, 1.0)
        qg = np.power(q, gamma)
        dq = np.where(q > 0, gamma * np.power(safe, gamma - 1.0), 0.0) * np.exp(-t)
        return qg * t, dq * t + qg

    return fn


def compute_loss_logits(logits, labels, config: LossConfig):
    """Loss and gradient with respect to ``logits`` (``L x D x H x W``).

    Agrees with ``compute_loss(softmax(logits), ...)`` wherever every true-label
    probability is above the 1e-7 clamp.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    config.check_labels(logits.shape[0])
    _check(logits, labels)
    one_hot(labels, logits.shape[0])
    logp = log_softmax(logits, axis=0)
    probs = np.exp(logp)
    kind = config.kind

    def dice_part(fn):
        v, g = fn(probs, labels)
        return v, _softmax_pullback(probs, g)

    if kind == "linear_dice":
        return dice_part(lambda p, y: linear_dice_loss(p, y, config.epsilon, config.dice_include_background))
    if kind == "focal":
        return _cross_terms(logp, labels, config.label_weights, _focal_dt(config.focal_gamma))
    cross = lambda: _cross_terms(logp, labels, config.label_weights, _exp_cross_dt(config.gamma_cross))  # noqa: E731
    if kind == "exp_cross_entropy":
        return cross()
    vd, gd = dice_part(
        lambda p, y: exp_log_dice_loss(p, y, config.gamma_dice, config.epsilon, config.dice_include_background)
    )
    if kind == "exp_log_dice":
        return vd, gd
    vc, gc = cross()
    return config.w_dice * vd + config.w_cross * vc, config.w_dice * gd + config.w_cross * gc


def nonlinearity(x, gamma: float):
    """``(-ln x) ** gamma`` on (0, 1)."""
    return np.power(-np.log(np.asarray(x, dtype=np.float64)), gamma)


def nonlinearity_slope(x, gamma: float):
    """Derivative of :func:`nonlinearity`, ``-gamma (-ln x) ** (gamma - 1) / x``."""
    x = np.asarray(x, dtype=np.float64)
    return -gamma * np.power(-np.log(x), gamma - 1.0) / x


def slope_stationary_point(gamma: float) -> float:
    """Where ``|d/dx (-ln x) ** gamma|`` is smallest on (0, 1) for ``0 < gamma < 1``.

    Setting the derivative of ``gamma t**(gamma-1) e**t`` (with ``t = -ln x``)
    to zero gives ``t = 1 - gamma``, i.e. ``x = exp(gamma - 1)``.
    """
    if not 0 < gamma < 1:
        raise ValueError("the slope magnitude has an interior minimum only for 0 < gamma < 1")
    return float(np.exp(gamma - 1.0))
