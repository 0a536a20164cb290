"""WIDER-protocol evaluation: greedy matching, PR sweep, Easy/Medium/Hard AP.

A face outside the active subset (or flagged invalid) is an *ignore* face:
it is not a target, and a detection whose best match is such a face is
neither a true nor a false positive. Zero-size faces take no part at all.

Subset membership comes either from face-height bands (the default desk
stand-in for the official lists) or from explicit per-face subset lists.
Subset list files hold, per image: the image key, a count line, then that
many 1-based face indices into the image's ground-truth list.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_io import FormatError, GroundTruthFace
from .geometry import as_boxes, iou_matrix
from .refine import Detections

TP, FP, IGNORED = 1, 0, -1
SUBSET_NAMES = ("easy", "medium", "hard")
HEIGHT_BANDS = {"easy": 50.0, "medium": 30.0, "hard": 0.0}
NUM_THRESHOLDS = 1000


class UnknownImageError(KeyError):
    def __init__(self, keys):
        self.keys = sorted(keys)
        super().__init__(f"detections for images absent from ground truth: {', '.join(self.keys)}")


@dataclass(frozen=True)
class SubsetSpec:
    """``flags[image][j]`` says whether face j of that image is a target."""

    name: str
    flags: Mapping[str, np.ndarray]

    def for_image(self, key: str, n: int) -> np.ndarray:
        f = self.flags.get(key)
        if f is None:
            return np.zeros(n, dtype=bool)
        return np.asarray(f, dtype=bool)


def height_band_subsets(gt: Mapping[str, Sequence[GroundTruthFace]],
                        bands: Mapping[str, float] = HEIGHT_BANDS) -> dict[str, SubsetSpec]:
    """Easy/medium/hard by minimum face height (pixels)."""
    out = {}
    for name in SUBSET_NAMES:
        min_h = bands[name]
        flags = {k: np.array([f.height >= min_h for f in faces], dtype=bool) for k, faces in gt.items()}
        out[name] = SubsetSpec(name, flags)
    return out


def parse_subset_list(path, gt: Mapping[str, Sequence[GroundTruthFace]], name: str) -> SubsetSpec:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    flags = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    i = 0
    while i < len(lines):
        key = lines[i].strip()
        if not key:
            i += 1
            continue
        if key not in gt:
            raise FormatError(f"unknown image {key!r}", path, i + 1)
        if i + 1 >= len(lines) or not lines[i + 1].strip().isdigit():
            raise FormatError("missing index count", path, i + 2)
        count = int(lines[i + 1])
        for j in range(count):
            lineno = i + 3 + j
            tok = lines[lineno - 1].strip() if lineno - 1 < len(lines) else ""
            if not tok.isdigit() or not 1 <= int(tok) <= len(gt[key]):
                raise FormatError(f"bad face index {tok!r}", path, lineno)
            flags[key][int(tok) - 1] = True
        i += 2 + count
    return SubsetSpec(name, flags)


def load_subset_lists(root, gt) -> dict[str, SubsetSpec]:
    """Read ``easy.txt``, ``medium.txt`` and ``hard.txt`` from ``root``."""
    subsets = {name: parse_subset_list(Path(root) / f"{name}.txt", gt, name) for name in SUBSET_NAMES}
    for key in gt:
        e, m, h = (subsets[n].for_image(key, len(gt[key])) for n in SUBSET_NAMES)
        if np.any(e & ~m) or np.any(m & ~h):
            raise FormatError(f"{key}: subsets must nest as easy <= medium <= hard", root)
    return subsets


def match_detections(dets: Detections, faces: Sequence[GroundTruthFace], in_subset: np.ndarray,
                     iou_threshold: float = 0.5) -> np.ndarray:
    """TP / FP / IGNORED outcome of each detection, in the input order.

    Detections are visited by descending score (input order on ties). Each
    takes its best-IoU face among the usable faces, excluding in-subset
    faces already claimed; at IoU >= ``iou_threshold`` that is a TP (and
    the face is claimed) for a target face or IGNORED for an ignore face.
    Anything else is a FP.
    """
    n = len(dets)
    outcome = np.full(n, FP, dtype=np.int64)
    usable = np.array([f.usable for f in faces], dtype=bool)
    if n == 0 or not usable.any():
        return outcome
    target = np.asarray(in_subset, dtype=bool) & usable
    target &= np.array([not f.invalid for f in faces], dtype=bool)
    boxes = as_boxes([tuple(f.box) for f in faces])
    ious = iou_matrix(dets.boxes, boxes)
    ious[:, ~usable] = -1.0
    claimed = np.zeros(len(faces), dtype=bool)
    for d in np.argsort(-dets.scores, kind="stable"):
        row = np.where(claimed, -1.0, ious[d])
        j = int(row.argmax())
        if row[j] < iou_threshold:
            continue
        if target[j]:
            outcome[d] = TP
            claimed[j] = True
        else:
            outcome[d] = IGNORED
    return outcome


@dataclass(frozen=True)
class EvalCurve:
    thresholds: np.ndarray = field(repr=False)
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    ap: float
    num_targets: int


def thresholds(n: int = NUM_THRESHOLDS) -> np.ndarray:
    """``n`` evenly spaced score cut-points from 1 down to 0."""
    return np.linspace(1.0, 0.0, n)


def pr_curve(scores: np.ndarray, outcomes: np.ndarray, num_targets: int,
             n_thresholds: int = NUM_THRESHOLDS) -> EvalCurve:
    """Precision/recall at each cut-point and the area under the
    monotone-envelope precision curve.

    A cut-point keeps detections with score >= threshold. Precision with no
    kept TP or FP is reported as 1.
    """
    if num_targets <= 0:
        raise ValueError("no target faces in this subset; AP is undefined")
    scores = np.asarray(scores, dtype=np.float64)
    outcomes = np.asarray(outcomes)
    ts = thresholds(n_thresholds)
    tp_scores = np.sort(scores[outcomes == TP])
    fp_scores = np.sort(scores[outcomes == FP])
    tp = len(tp_scores) - np.searchsorted(tp_scores, ts, side="left")
    fp = len(fp_scores) - np.searchsorted(fp_scores, ts, side="left")
    kept = tp + fp
    precision = np.divide(tp, kept, out=np.ones(len(ts)), where=kept > 0)
    recall = tp / num_targets
    return EvalCurve(ts, precision, recall, average_precision(recall, precision), num_targets)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the PR curve after replacing precision by its running
    maximum from the high-recall end; ``recall`` must be non-decreasing."""
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    envelope = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * envelope[1:]))


def evaluate(
    dets: Mapping[str, Detections],
    gt: Mapping[str, Sequence[GroundTruthFace]],
    subsets: Mapping[str, SubsetSpec] | None = None,
    iou_threshold: float = 0.5,
) -> dict[str, EvalCurve]:
    """Per-subset PR curves over every image in ``gt``.

    Images without detections count as misses; detections for images not
    in ``gt`` are an error.
    """
    unknown = set(dets) - set(gt)
    if unknown:
        raise UnknownImageError(unknown)
    if subsets is None:
        subsets = height_band_subsets(gt)
    curves = {}
    for name, subset in subsets.items():
        all_scores, all_outcomes, targets = [], [], 0
        for key, faces in gt.items():
            flags = subset.for_image(key, len(faces))
            targets += sum(
                1 for f, inside in zip(faces, flags) if inside and f.usable and not f.invalid
            )
            d = dets.get(key)
            if d is None or len(d) == 0:
                continue
            all_scores.append(d.scores)
            all_outcomes.append(match_detections(d, faces, flags, iou_threshold))
        scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
        outcomes = np.concatenate(all_outcomes) if all_outcomes else np.zeros(0, dtype=np.int64)
        curves[name] = pr_curve(scores, outcomes, targets)
    return curves


def format_ap_line(curves: Mapping[str, EvalCurve]) -> str:
    return "AP " + " ".join(f"{name}={curves[name].ap:.4f}" for name in curves)
