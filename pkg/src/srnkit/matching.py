"""Two-threshold anchor assignment.

An anchor whose best IoU with any ground truth is strictly above ``pos_iou``
is positive (assigned to that ground truth, lowest index on ties), below
``neg_iou`` is negative, anything in ``[neg_iou, pos_iou]`` is ignored.
There is no forced best-anchor-per-face assignment, so a face can end up
with no positive anchor; :func:`class_balance_stats` counts those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .anchors import AnchorSet
from .geometry import as_boxes, box_areas, iou_matrix

NEGATIVE = -1
IGNORED = -2

STEP1_THRESHOLDS = (0.7, 0.3)
STEP2_THRESHOLDS = (0.5, 0.4)

_CHUNK = 1 << 11


@dataclass(frozen=True)
class MatchResult:
    """``labels[i]`` is the matched ground-truth index (>= 0), NEGATIVE or
    IGNORED; ``max_iou[i]`` the best IoU of anchor i over all ground truths."""

    labels: np.ndarray
    max_iou: np.ndarray
    pos_iou: float
    neg_iou: float
    num_gts: int

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORED


def check_thresholds(pos_iou: float, neg_iou: float) -> None:
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got neg={neg_iou} pos={pos_iou}")


def match_anchors(anchors, gts, pos_iou: float, neg_iou: float) -> MatchResult:
    """Label every anchor against ``gts`` under the threshold pair.

    Args:
        anchors: an :class:`AnchorSet` or an (A, 4) box array.
        gts: (G, 4) ground-truth boxes, all with positive area.
        pos_iou: strict lower bound for positives.
        neg_iou: exclusive upper bound for negatives.
    """
    check_thresholds(pos_iou, neg_iou)
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else as_boxes(anchors)
    gts = as_boxes(gts)
    if len(gts) and np.any(box_areas(gts) <= 0):
        raise ValueError("ground-truth boxes must have positive area")

    n = len(boxes)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    max_iou = np.zeros(n, dtype=np.float64)
    if len(gts) == 0:
        return MatchResult(labels, max_iou, pos_iou, neg_iou, 0)

    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        ious = iou_matrix(boxes[start:stop], gts)
        best = ious.argmax(axis=1)  # first maximum -> lowest gt index
        best_iou = ious[np.arange(stop - start), best]
        chunk = np.where(best_iou > pos_iou, best, np.where(best_iou < neg_iou, NEGATIVE, IGNORED))
        labels[start:stop] = chunk
        max_iou[start:stop] = best_iou
    return MatchResult(labels, max_iou, pos_iou, neg_iou, len(gts))


class ClassBalance(NamedTuple):
    num_positive: int
    num_negative: int
    num_ignored: int
    pos_to_neg_ratio: float
    unmatched_gts: int

    def ratio_text(self) -> str:
        """Ratio as ``1:k``, the way class imbalance is usually quoted."""
        if self.num_positive == 0:
            return "0:" + str(self.num_negative)
        if math.isinf(self.pos_to_neg_ratio):
            return "inf"
        return f"1:{self.num_negative / self.num_positive:.0f}"


def class_balance_stats(m: MatchResult) -> ClassBalance:
    """Label counts plus positives/negatives (``math.inf`` with no negatives)."""
    pos = int(np.count_nonzero(m.labels >= 0))
    neg = int(np.count_nonzero(m.labels == NEGATIVE))
    ign = int(np.count_nonzero(m.labels == IGNORED))
    ratio = pos / neg if neg else math.inf
    matched = np.unique(m.labels[m.labels >= 0])
    return ClassBalance(pos, neg, ign, ratio, m.num_gts - len(matched))
