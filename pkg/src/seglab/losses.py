"""Training losses (soft dice, cross-entropy, focal, uncertainty-weighted
combination) and evaluation metrics (hard-mask DSC, one-hot MSE).

Losses consume a probability Tensor shaped (classes, H, W) or
(batch, classes, H, W) plus an integer label mask, pool over whatever batch
axis is present, and return a scalar graph Tensor.  Metrics are plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

DICE_SMOOTH = 1e-6
LOG_FLOOR = 1e-12  # losses evaluate log(max(p, floor)); the raw log op does not clamp

COMPONENT_NAMES = ("dice", "ce", "focal")


@dataclass
class LossConfig:
    """Which component losses to train on and how."""

    components: tuple[str, ...] = COMPONENT_NAMES
    gamma: float = 2.0
    dice_per_class: bool = True

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.components:
            raise ValueError("component list must be non-empty")
        for name in self.components:
            if name not in COMPONENT_NAMES:
                raise ValueError(f"unknown loss component {name!r}")


@dataclass
class UncertaintyWeights:
    """M learnable log-variances u_m with sigma_m^2 = exp(u_m) (always > 0)."""

    log_var: Tensor

    @property
    def m(self) -> int:
        return self.log_var.shape[0]

    def sigma_sq(self) -> np.ndarray:
        return np.exp(self.log_var.data)


def _check_pair(p: Tensor, g: np.ndarray):
    g = np.asarray(g)
    if p.ndim == 3:
        if g.shape != p.shape[1:]:
            raise ShapeError(f"probs {p.shape} vs labels {g.shape}")
    elif p.ndim == 4:
        if g.shape != (p.shape[0],) + p.shape[2:]:
            raise ShapeError(f"probs {p.shape} vs labels {g.shape}")
    else:
        raise ShapeError(f"probs must be (C,H,W) or (B,C,H,W), got {p.shape}")
    classes = p.shape[-3]
    if g.min() < 0 or g.max() >= classes:
        raise ValueError(f"labels must be in [0, {classes}), got max {g.max()}")
    return g


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """(..., H, W) int labels -> (..., classes, H, W) float64 indicator."""
    labels = np.asarray(labels)
    eye = np.eye(classes, dtype=np.float64)
    return np.moveaxis(eye[labels], -1, -3)


def _batched(p: Tensor, g: np.ndarray):
    if p.ndim == 3:
        p = ad.reshape(p, (1,) + p.shape)
        g = g[None]
    return p, g


def dice_loss(p: Tensor, g: np.ndarray, config: LossConfig | None = None) -> Tensor:
    """1 - soft DSC over foreground classes, smoothed so empty/empty scores 1.

    Per-class mode averages the per-foreground-class DSC; pooled mode computes
    one DSC over all foreground classes jointly.
    """
    g = _check_pair(p, g)
    p, g = _batched(p, g)
    classes = p.shape[1]
    hot = p.graph.constant(one_hot(g, classes))
    prod = ad.multiply(p, hot)
    inter = ad.tsum(prod, axis=(0, 2, 3))  # (classes,)
    psum = ad.tsum(p, axis=(0, 2, 3))
    gsum = p.graph.constant(one_hot(g, classes).sum(axis=(0, 2, 3)))
    per_class = config is None or config.dice_per_class
    if per_class:
        fg = ((1, classes),)
        num = ad.add_const(ad.scale(ad.slice_axes(inter, fg), 2.0), DICE_SMOOTH)
        den = ad.add_const(ad.add(ad.slice_axes(psum, fg), ad.slice_axes(gsum, fg)), DICE_SMOOTH)
        dsc = ad.tmean(ad.divide(num, den))
    else:
        fg = ((1, classes),)
        num = ad.add_const(ad.scale(ad.tsum(ad.slice_axes(inter, fg)), 2.0), DICE_SMOOTH)
        den = ad.add_const(
            ad.add(ad.tsum(ad.slice_axes(psum, fg)), ad.tsum(ad.slice_axes(gsum, fg))),
            DICE_SMOOTH,
        )
        dsc = ad.divide(num, den)
    return ad.add_const(ad.scale(dsc, -1.0), 1.0)


def cross_entropy_loss(p: Tensor, g: np.ndarray) -> Tensor:
    """-sum_i g_i log p_i averaged over pixels, with p clamped at 1e-12."""
    g = _check_pair(p, g)
    p, g = _batched(p, g)
    classes = p.shape[1]
    hot = p.graph.constant(one_hot(g, classes))
    logp = ad.log(ad.clamp_min(p, LOG_FLOOR))
    picked = ad.multiply(hot, logp)
    n_pixels = p.shape[0] * p.shape[2] * p.shape[3]
    return ad.scale(ad.tsum(picked), -1.0 / n_pixels)


def focal_loss(p: Tensor, g: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Cross-entropy modulated by (1-p)^gamma; gamma=0 reproduces CE exactly."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    g = _check_pair(p, g)
    p, g = _batched(p, g)
    classes = p.shape[1]
    hot = p.graph.constant(one_hot(g, classes))
    logp = ad.log(ad.clamp_min(p, LOG_FLOOR))
    mod = ad.power(ad.add_const(ad.scale(p, -1.0), 1.0), gamma)
    picked = ad.multiply(ad.multiply(mod, hot), logp)
    n_pixels = p.shape[0] * p.shape[2] * p.shape[3]
    return ad.scale(ad.tsum(picked), -1.0 / n_pixels)


def uncertainty_aware_loss(components: list[Tensor], weights: UncertaintyWeights) -> Tensor:
    """sum_m [ L_m / (2 sigma_m^2) + log(1 + sigma_m^2) ] with sigma_m^2 = exp(u_m)."""
    if len(components) != weights.m:
        raise ShapeError(
            f"{len(components)} component losses but {weights.m} uncertainty weights"
        )
    stacked = ad.concat([ad.reshape(c, (1,)) for c in components], axis=0)
    sigma_sq = ad.exp(weights.log_var)
    weighted = ad.divide(stacked, ad.scale(sigma_sq, 2.0))
    regular = ad.log(ad.add_const(sigma_sq, 1.0))
    return ad.tsum(ad.add(weighted, regular))


def component_loss(name: str, p: Tensor, g: np.ndarray, config: LossConfig) -> Tensor:
    if name == "dice":
        return dice_loss(p, g, config)
    if name == "ce":
        return cross_entropy_loss(p, g)
    if name == "focal":
        return focal_loss(p, g, config.gamma)
    raise ValueError(f"unknown loss component {name!r}")


# -- numpy twins used for per-epoch diagnostics (not the trained objective) --


def dice_value(p: np.ndarray, g: np.ndarray, per_class: bool = True) -> float:
    if p.ndim == 3:
        p, g = p[None], np.asarray(g)[None]
    hot = one_hot(g, p.shape[1])
    inter = (p * hot).sum(axis=(0, 2, 3))[1:]
    sums = p.sum(axis=(0, 2, 3))[1:] + hot.sum(axis=(0, 2, 3))[1:]
    dsc = (2.0 * inter + DICE_SMOOTH) / (sums + DICE_SMOOTH)
    return float(1.0 - (dsc.mean() if per_class else (2.0 * inter.sum() + DICE_SMOOTH) / (sums.sum() + DICE_SMOOTH)))


def ce_value(p: np.ndarray, g: np.ndarray) -> float:
    if p.ndim == 3:
        p, g = p[None], np.asarray(g)[None]
    hot = one_hot(g, p.shape[1])
    logp = np.log(np.maximum(p, LOG_FLOOR))
    n = p.shape[0] * p.shape[2] * p.shape[3]
    return float(-(hot * logp).sum() / n)


def focal_value(p: np.ndarray, g: np.ndarray, gamma: float = 2.0) -> float:
    if p.ndim == 3:
        p, g = p[None], np.asarray(g)[None]
    hot = one_hot(g, p.shape[1])
    logp = np.log(np.maximum(p, LOG_FLOOR))
    n = p.shape[0] * p.shape[2] * p.shape[3]
    return float(-(((1.0 - p) ** gamma) * hot * logp).sum() / n)


# -- evaluation metrics ------------------------------------------------------


def dsc_metric(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Hard-mask overlap 2|P & G| / (|P| + |G|); two empty masks score 1."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    pm = pred == class_id
    gm = truth == class_id
    denom = int(pm.sum()) + int(gm.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((pm & gm).sum()) / denom


def mse_metric(preds, truths) -> float:
    """Mean over images of the squared difference between predicted
    probabilities and one-hot labels, averaged over pixels and classes."""
    if len(preds) == 0:
        raise ValueError("mse_metric needs at least one prediction")
    if len(preds) != len(truths):
        raise ShapeError(f"{len(preds)} predictions vs {len(truths)} truths")
    total = 0.0
    for p, g in zip(preds, truths):
        p = np.asarray(p, dtype=np.float64)
        hot = one_hot(np.asarray(g), p.shape[0])
        if p.shape != hot.shape:
            raise ShapeError(f"prediction {p.shape} vs labels {np.asarray(g).shape}")
        total += float(((p - hot) ** 2).mean())
    return total / len(preds)
