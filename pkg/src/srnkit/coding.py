"""Box delta coding and the two-step training objective.

Deltas use the usual centre/log-size parameterization::

    dx = (gcx - acx) / aw        dw = ln(gw / aw)
    dy = (gcy - acy) / ah        dh = ln(gh / ah)

Functions accept a single box/delta of shape (4,) or arrays of shape (N, 4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .geometry import as_boxes

DELTA_CLAMP = math.log(1000.0 / 16.0)
PROB_EPS = 1e-7


class BoxDelta(NamedTuple):
    dx: float
    dy: float
    dw: float
    dh: float


def _centers(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def _shaped_like(result: np.ndarray, template) -> np.ndarray:
    return result[0] if np.ndim(template) == 1 else result


def encode(gt, anchor) -> np.ndarray:
    """Regression target that moves ``anchor`` onto ``gt``."""
    g = as_boxes(gt)
    a = as_boxes(anchor)
    gcx, gcy, gw, gh = _centers(g)
    acx, acy, aw, ah = _centers(a)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("cannot encode against a degenerate anchor")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("cannot encode a degenerate ground-truth box")
    out = np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)
    return _shaped_like(out, gt if np.ndim(gt) >= np.ndim(anchor) else anchor)


def decode(anchor, deltas, clamp: float | None = DELTA_CLAMP) -> np.ndarray:
    """Apply ``deltas`` to ``anchor``; inverse of :func:`encode`.

    ``dw``/``dh`` are clamped to ``[-clamp, clamp]`` before exponentiation so
    that any finite delta gives a finite box. Pass ``clamp=None`` to disable.
    """
    a = as_boxes(anchor)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _centers(a)
    dw, dh = d[:, 2], d[:, 3]
    if clamp is not None:
        dw = np.clip(dw, -clamp, clamp)
        dh = np.clip(dh, -clamp, clamp)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return _shaped_like(out, anchor if np.ndim(anchor) >= np.ndim(deltas) else deltas)


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.focal_alpha <= 1.0:
            raise ValueError("focal_alpha must lie in (0, 1]")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.smooth_l1_beta < 0:
            raise ValueError("smooth_l1_beta must be >= 0")


def _check_prob(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("focal loss needs probabilities strictly inside (0, 1); clamp with clamp_prob()")
    return p


def clamp_prob(p, eps: float = PROB_EPS) -> np.ndarray:
    return np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)


def focal_loss(p, positive, cfg: LossConfig = LossConfig()):
    """Binary focal loss, elementwise.

    positive: ``-alpha (1-p)^gamma ln p``;
    negative: ``-(1-alpha) p^gamma ln(1-p)``.
    """
    p = _check_prob(p)
    positive = np.asarray(positive, dtype=bool)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    pos = -a * (1.0 - p) ** g * np.log(p)
    neg = -(1.0 - a) * p**g * np.log1p(-p)
    out = np.where(positive, pos, neg)
    return float(out) if out.ndim == 0 else out


def focal_loss_grad(p, positive, cfg: LossConfig = LossConfig()):
    """Closed-form derivative of :func:`focal_loss` with respect to ``p``."""
    p = _check_prob(p)
    positive = np.asarray(positive, dtype=bool)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    q = 1.0 - p
    pos = a * (g * q ** (g - 1.0) * np.log(p) - q**g / p) if g else -a / p
    neg = -(1.0 - a) * (g * p ** (g - 1.0) * np.log(q) - p**g / q) if g else (1.0 - a) / q
    out = np.where(positive, pos, neg)
    return float(out) if out.ndim == 0 else out


def smooth_l1(x, beta: float = 1.0) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    if beta == 0:
        return x
    return np.where(x < beta, 0.5 * x * x / beta, x - 0.5 * beta)


@dataclass
class StepTerms:
    """Per-anchor predictions and targets for one step.

    ``labels`` holds 1 (positive), 0 (negative) or -1 (ignored).
    """

    scores: np.ndarray
    labels: np.ndarray
    deltas: np.ndarray
    targets: np.ndarray


class LossBreakdown(NamedTuple):
    step1_cls: float
    step1_reg: float
    step2_cls: float
    step2_reg: float

    @property
    def total(self) -> float:
        return self.step1_cls + self.step1_reg + self.step2_cls + self.step2_reg


def _cls_term(t: StepTerms, mask: np.ndarray, cfg: LossConfig) -> float:
    labels = np.asarray(t.labels)
    use = mask & (labels >= 0)
    if not use.any():
        return 0.0
    pos = labels[use] == 1
    loss = focal_loss(clamp_prob(t.scores[use]), pos, cfg)
    return float(np.sum(loss)) / max(int(pos.sum()), 1)


def _reg_term(t: StepTerms, mask: np.ndarray, cfg: LossConfig) -> float:
    labels = np.asarray(t.labels)
    use = mask & (labels == 1)
    n = int(use.sum())
    if n == 0:
        return 0.0
    diff = np.asarray(t.deltas)[use] - np.asarray(t.targets)[use]
    return float(np.sum(smooth_l1(diff, cfg.smooth_l1_beta))) / n


def loss_breakdown(step1: StepTerms, step2: StepTerms, low_mask: np.ndarray,
                   cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """The four loss terms of the two-step objective.

    First-step classification runs on the low pyramid levels only and
    first-step regression on the high levels only; the second step covers
    every anchor. Each term is normalized by its own positive count
    (floored at 1); ignored anchors contribute nothing.
    """
    low_mask = np.asarray(low_mask, dtype=bool)
    everything = np.ones_like(low_mask)
    return LossBreakdown(
        _cls_term(step1, low_mask, cfg),
        _reg_term(step1, ~low_mask, cfg),
        _cls_term(step2, everything, cfg),
        _reg_term(step2, everything, cfg),
    )


def total_loss(step1: StepTerms, step2: StepTerms, low_mask: np.ndarray,
               cfg: LossConfig = LossConfig()) -> float:
    """Plain sum of the first-step and second-step losses."""
    return loss_breakdown(step1, step2, low_mask, cfg).total
