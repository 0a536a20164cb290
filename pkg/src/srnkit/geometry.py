"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates: a box spanning
pixels 0..9 inclusive is ``(0, 0, 10, 10)`` and has area 100. No ``+1`` width
convention anywhere, which keeps IoU invariant under scaling.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np


class UndefinedIoUError(ValueError):
    """Raised when both boxes of an IoU query have zero area."""


class BoxXYXY(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoxXYXY":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)


def as_box(b: Sequence[float]) -> BoxXYXY:
    """Coerce a 4-sequence into a validated :class:`BoxXYXY`."""
    if len(b) != 4:
        raise ValueError(f"box needs 4 coordinates, got {len(b)}")
    box = BoxXYXY(*(float(v) for v in b))
    if not (box.x1 <= box.x2 and box.y1 <= box.y2):
        raise ValueError(f"invalid box {tuple(box)}: need x1 <= x2 and y1 <= y2")
    return box


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two boxes.

    Raises:
        UndefinedIoUError: both boxes are degenerate, so the union is empty.
    """
    a = as_box(a)
    b = as_box(b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        raise UndefinedIoUError(f"IoU undefined for degenerate boxes {tuple(a)} and {tuple(b)}")
    return inter / union


def clip_box(b: Sequence[float], width: float, height: float) -> BoxXYXY:
    if width <= 0 or height <= 0:
        raise ValueError("clip frame must have positive width and height")
    x1, y1, x2, y2 = as_box(b)
    return BoxXYXY(
        min(max(x1, 0.0), width),
        min(max(y1, 0.0), height),
        min(max(x2, 0.0), width),
        min(max(y2, 0.0), height),
    )


# ---------------------------------------------------------------------------
# Vectorized variants over (N, 4) arrays.


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected an (N, 4) box array, got shape {arr.shape}")
    return arr


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (N, 4) and ``b`` (M, 4).

    Pairs whose union is empty get IoU 0 here; callers that must reject
    such pairs validate their inputs beforehand.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    area_a = box_areas(a)
    area_b = box_areas(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2])
    iw -= np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3])
    ih -= np.maximum(a[:, None, 1], b[None, :, 1])
    np.maximum(iw, 0.0, out=iw)
    np.maximum(ih, 0.0, out=ih)
    inter = iw
    inter *= ih
    union = ih
    np.add(area_a[:, None], area_b[None, :], out=union)
    union -= inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    np.clip(boxes[:, 0::2], 0.0, width, out=boxes[:, 0::2])
    np.clip(boxes[:, 1::2], 0.0, height, out=boxes[:, 1::2])
    return boxes


def xywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, 2] += boxes[:, 0]
    boxes[:, 3] += boxes[:, 1]
    return boxes


def xyxy_to_xywh(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, 2] -= boxes[:, 0]
    boxes[:, 3] -= boxes[:, 1]
    return boxes
