"""Selective two-step inference.

The chain per image::

    first-step filter on the low levels  (drop score < theta)
    first-step regression on the high levels  (refined anchors)
    rank survivors by second-step score, keep top_k
    decode second-step deltas against the refined anchors, clip to the image
    greedy NMS, keep at most ``cap`` detections

First- and second-step scores are never fused.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .anchors import AnchorSet
from .coding import decode
from .geometry import BoxXYXY, as_boxes, box_areas, clip_boxes

STC_THRESHOLD = 0.01
TOP_K = 2000
NMS_IOU = 0.4
DETECTIONS_PER_IMAGE = 750
DEFAULT_TEST_SCALES = (0.5, 1.0, 1.5, 2.0)


class AlignmentError(ValueError):
    """Score arrays do not line up with the anchor set."""


@dataclass(frozen=True)
class StepScores:
    first_scores: np.ndarray
    first_deltas: np.ndarray
    second_scores: np.ndarray
    second_deltas: np.ndarray

    def __post_init__(self):
        n = len(self.first_scores)
        for name in ("first_scores", "second_scores"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise AlignmentError(f"{name} has shape {arr.shape}, expected ({n},)")
            if n and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, arr)
        for name in ("first_deltas", "second_deltas"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 4) if n else np.zeros((0, 4))
            if arr.shape != (n, 4):
                raise AlignmentError(f"{name} has shape {arr.shape}, expected ({n}, 4)")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.first_scores)

    @classmethod
    def zeros(cls, n: int) -> "StepScores":
        return cls(np.zeros(n), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 4)))


class Detection(NamedTuple):
    box: BoxXYXY
    score: float


@dataclass(frozen=True)
class Detections:
    """Detections of one image as parallel ``boxes`` (K, 4) / ``scores`` (K,)."""

    boxes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        boxes = as_boxes(self.boxes)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(boxes) != len(scores):
            raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def empty(cls) -> "Detections":
        return cls(np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_list(cls, dets: Sequence[Detection]) -> "Detections":
        if not dets:
            return cls.empty()
        return cls(np.array([tuple(d.box) for d in dets]), np.array([d.score for d in dets]))

    @classmethod
    def concat(cls, parts: Sequence["Detections"]) -> "Detections":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.boxes for p in parts]), np.concatenate([p.scores for p in parts]))

    def __len__(self) -> int:
        return len(self.scores)

    def __iter__(self) -> Iterator[Detection]:
        for box, score in zip(self.boxes, self.scores):
            yield Detection(BoxXYXY(*map(float, box)), float(score))

    def take(self, index) -> "Detections":
        return Detections(self.boxes[index], self.scores[index])


def _check_aligned(anchors: AnchorSet, scores: StepScores) -> None:
    if len(anchors) != len(scores):
        raise AlignmentError(f"{len(scores)} score rows for {len(anchors)} anchors")


def stc_filter(anchors: AnchorSet, scores: StepScores, theta: float = STC_THRESHOLD) -> np.ndarray:
    """Indices of anchors that survive the first-step classification filter.

    Low-level anchors need a first-step score of at least ``theta``;
    high-level anchors always pass.
    """
    _check_aligned(anchors, scores)
    keep = anchors.high_mask | (scores.first_scores >= theta)
    return np.flatnonzero(keep)


def str_refine(anchors: AnchorSet, scores: StepScores) -> np.ndarray:
    """Anchors after first-step regression, which touches the high levels only."""
    _check_aligned(anchors, scores)
    refined = np.array(anchors.boxes, dtype=np.float64, copy=True)
    high = anchors.high_mask
    if high.any():
        refined[high] = decode(anchors.boxes[high], scores.first_deltas[high])
    return refined


def nms_indices(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    A candidate is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``. Equal scores keep input order.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = box_areas(boxes)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ovr = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
        order = rest[ovr <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Detections, iou_threshold: float = NMS_IOU) -> Detections:
    return dets.take(nms_indices(dets.boxes, dets.scores, iou_threshold))


def run_inference(
    anchors: AnchorSet,
    scores: StepScores,
    image_w: float | None = None,
    image_h: float | None = None,
    theta: float = STC_THRESHOLD,
    top_k: int = TOP_K,
    nms_iou: float = NMS_IOU,
    cap: int | None = DETECTIONS_PER_IMAGE,
) -> Detections:
    """Full post-processing chain for one image.

    The image frame defaults to the pyramid's input size. Boxes that clip to
    zero area are dropped before NMS.
    """
    _check_aligned(anchors, scores)
    if image_w is None:
        image_w = anchors.config.input_width
    if image_h is None:
        image_h = anchors.config.input_height

    kept = stc_filter(anchors, scores, theta)
    if kept.size == 0:
        return Detections.empty()
    refined = str_refine(anchors, scores)

    ranked = kept[np.argsort(-scores.second_scores[kept], kind="stable")][:top_k]
    boxes = decode(refined[ranked], scores.second_deltas[ranked])
    boxes = clip_boxes(boxes, image_w, image_h)
    live = box_areas(boxes) > 0
    dets = Detections(boxes[live], scores.second_scores[ranked][live])

    out = nms(dets, nms_iou)
    if cap is not None:
        out = out.take(slice(0, cap))
    return out


def merge_multiscale(
    det_sets: Sequence[tuple[float, Detections]],
    nms_iou: float = NMS_IOU,
    cap: int | None = DETECTIONS_PER_IMAGE,
) -> Detections:
    """Bring per-scale detections back to original coordinates and re-run NMS."""
    parts = []
    for factor, dets in det_sets:
        if factor <= 0:
            raise ValueError(f"scale factor must be positive, got {factor}")
        parts.append(Detections(dets.boxes / factor, dets.scores))
    out = nms(Detections.concat(parts), nms_iou)
    if cap is not None:
        out = out.take(slice(0, cap))
    return out
