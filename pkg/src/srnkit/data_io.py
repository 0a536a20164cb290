"""WIDER-style annotation and submission files, score files, PPM images and
synthetic scenes.

Files store boxes as ``x y w h``; everything in memory is ``x1 y1 x2 y2``.
The conversion happens here and nowhere else.
"""

from __future__ import annotations

import math
import os
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .anchors import AnchorSet
from .coding import encode
from .geometry import BoxXYXY, as_boxes, box_areas, iou_matrix
from .refine import DETECTIONS_PER_IMAGE, Detections, StepScores, str_refine


class FormatError(ValueError):
    """Malformed input file; the message carries the file and line number."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.line = line


def format_number(v: float) -> str:
    """Shortest fixed-point text with at most 6 decimals, '.' separator."""
    if float(v).is_integer():
        return str(int(v))
    text = f"{v:.6f}".rstrip("0").rstrip(".")
    return "0" if text == "-0" else text


# ---------------------------------------------------------------------------
# Ground truth


ATTRIBUTE_NAMES = ("blur", "expression", "illumination", "invalid", "occlusion", "pose")
_ATTRIBUTE_RANGES = {"blur": 2, "expression": 1, "illumination": 1, "invalid": 1, "occlusion": 2, "pose": 1}


@dataclass(frozen=True)
class GroundTruthFace:
    box: BoxXYXY
    blur: int = 0
    expression: int = 0
    illumination: int = 0
    invalid: int = 0
    occlusion: int = 0
    pose: int = 0

    def __post_init__(self):
        object.__setattr__(self, "box", BoxXYXY(*map(float, self.box)))
        if self.box.x2 < self.box.x1 or self.box.y2 < self.box.y1:
            raise ValueError(f"negative face size in {tuple(self.box)}")
        for name, hi in _ATTRIBUTE_RANGES.items():
            v = getattr(self, name)
            if not 0 <= v <= hi:
                raise ValueError(f"{name}={v} outside [0, {hi}]")

    @property
    def width(self) -> float:
        return self.box.width

    @property
    def height(self) -> float:
        return self.box.height

    @property
    def usable(self) -> bool:
        """Zero-size entries are kept for round-trips but never matched."""
        return self.box.width > 0 and self.box.height > 0

    def to_line(self) -> str:
        x, y, w, h = self.box.to_xywh()
        fields = [format_number(x), format_number(y), format_number(w), format_number(h)]
        fields += [str(getattr(self, n)) for n in ATTRIBUTE_NAMES]
        return " ".join(fields)


GroundTruth = dict  # image key -> list[GroundTruthFace], insertion ordered

_PLACEHOLDER = "0 0 0 0 0 0 0 0 0 0"


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def _parse_face(line: str, path, lineno: int) -> GroundTruthFace:
    toks = line.split()
    if len(toks) != 10:
        raise FormatError(f"expected 10 fields, got {len(toks)}", path, lineno)
    try:
        x, y, w, h = (float(t) for t in toks[:4])
        attrs = [int(t) for t in toks[4:]]
    except ValueError as exc:
        raise FormatError(f"bad face line {line!r}", path, lineno) from exc
    if not all(math.isfinite(v) for v in (x, y, w, h)):
        raise FormatError("non-finite coordinate", path, lineno)
    if w < 0 or h < 0:
        raise FormatError(f"negative width/height in {line!r}", path, lineno)
    try:
        return GroundTruthFace(BoxXYXY.from_xywh(x, y, w, h), *attrs)
    except ValueError as exc:
        raise FormatError(str(exc), path, lineno) from exc


def parse_gt_text(text: str, path=None) -> dict[str, list[GroundTruthFace]]:
    lines = text.splitlines()
    out: dict[str, list[GroundTruthFace]] = {}
    i = 0
    n = len(lines)
    while i < n:
        key = lines[i].strip()
        if not key:
            i += 1
            continue
        if key in out:
            raise FormatError(f"duplicate image key {key!r}", path, i + 1)
        if i + 1 >= n:
            raise FormatError(f"missing face count after {key!r}", path, i + 1)
        count_text = lines[i + 1].strip()
        if not count_text.isdigit():
            raise FormatError(f"bad face count {count_text!r}", path, i + 2)
        count = int(count_text)
        i += 2
        faces = []
        if count == 0:
            # some releases follow a zero count with one all-zero line
            if i < n and len(lines[i].split()) == 10 and all(_is_number(t) for t in lines[i].split()):
                i += 1
        for _ in range(count):
            if i >= n or not lines[i].strip():
                raise FormatError(f"{key!r} declares {count} faces, found {len(faces)}", path, i + 1)
            faces.append(_parse_face(lines[i], path, i + 1))
            i += 1
        out[key] = faces
    return out


def parse_gt(path) -> dict[str, list[GroundTruthFace]]:
    path = Path(path)
    return parse_gt_text(path.read_text(encoding="utf-8"), path)


def format_gt(gt: Mapping[str, Iterable[GroundTruthFace]]) -> str:
    lines = []
    for key, faces in gt.items():
        faces = list(faces)
        lines.append(key)
        lines.append(str(len(faces)))
        if not faces:
            lines.append(_PLACEHOLDER)
        lines.extend(f.to_line() for f in faces)
    return "".join(line + "\n" for line in lines)


def write_gt(gt: Mapping[str, Iterable[GroundTruthFace]], path) -> None:
    Path(path).write_text(format_gt(gt), encoding="utf-8", newline="\n")


def gt_boxes(faces: Iterable[GroundTruthFace], usable_only: bool = True) -> np.ndarray:
    boxes = [tuple(f.box) for f in faces if f.usable or not usable_only]
    return as_boxes(boxes)


# ---------------------------------------------------------------------------
# Detection submissions: one text file per image


class CapExceededError(ValueError):
    pass


def detection_file(root, key: str) -> Path:
    stem = os.path.splitext(key)[0]
    return Path(root) / f"{stem}.txt"


def format_detections(key: str, dets: Detections) -> str:
    # round the corners first so x2 = x + w survives the text round-trip
    corners = np.round(dets.boxes, 6)
    lines = [key, str(len(dets))]
    for (x1, y1, x2, y2), s in zip(corners, dets.scores):
        lines.append(f"{x1:.6f} {y1:.6f} {x2 - x1:.6f} {y2 - y1:.6f} {s:.6f}")
    return "".join(line + "\n" for line in lines)


def write_detections(dets_per_image: Mapping[str, Detections], root, allow_over_cap: bool = False) -> list[Path]:
    """Write one submission file per image under ``root``.

    Refuses more than 750 detections for an image unless ``allow_over_cap``.
    """
    written = []
    for key, dets in dets_per_image.items():
        if len(dets) > DETECTIONS_PER_IMAGE and not allow_over_cap:
            raise CapExceededError(
                f"{key}: {len(dets)} detections exceed the {DETECTIONS_PER_IMAGE} per-image cap"
            )
        target = detection_file(root, key)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(format_detections(key, dets), encoding="utf-8", newline="\n")
        written.append(target)
    return written


def parse_detection_text(text: str, path=None) -> tuple[str, Detections]:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FormatError("need an image line and a count line", path, len(lines) + 1)
    key = lines[0].strip()
    if not key:
        raise FormatError("empty image name", path, 1)
    if not lines[1].strip().isdigit():
        raise FormatError(f"bad detection count {lines[1]!r}", path, 2)
    count = int(lines[1])
    body = lines[2:]
    if len(body) < count:
        raise FormatError(f"declares {count} detections, found {len(body)}", path, len(lines) + 1)
    for extra, line in enumerate(body[count:], start=count + 3):
        if line.strip():
            raise FormatError("trailing content after the declared detections", path, extra)
    rows = np.zeros((count, 5))
    for j, line in enumerate(body[:count]):
        toks = line.split()
        if len(toks) != 5:
            raise FormatError(f"expected 5 fields, got {len(toks)}", path, j + 3)
        try:
            rows[j] = [float(t) for t in toks]
        except ValueError as exc:
            raise FormatError(f"bad detection line {line!r}", path, j + 3) from exc
        if not np.all(np.isfinite(rows[j])) or rows[j, 2] < 0 or rows[j, 3] < 0:
            raise FormatError(f"invalid detection line {line!r}", path, j + 3)
    boxes = rows[:, :4].copy()
    boxes[:, 2] += boxes[:, 0]
    boxes[:, 3] += boxes[:, 1]
    return key, Detections(boxes, rows[:, 4])


def parse_detections(root) -> dict[str, Detections]:
    """Read every ``*.txt`` below ``root``; keys come from the first line."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError("detection directory not found", root)
    out = {}
    for f in sorted(root.rglob("*.txt")):
        key, dets = parse_detection_text(f.read_text(encoding="utf-8"), f)
        if key in out:
            raise FormatError(f"image {key!r} appears in more than one file", f, 1)
        out[key] = dets
    return out


# ---------------------------------------------------------------------------
# Score files
#
# Binary layout, little-endian: 8-byte magic b"SRNSCORE", uint64 anchor count
# N, then float32 planes in this order: first_scores[N], first_deltas[N,4],
# second_scores[N], second_deltas[N,4].
#
# Text layout: a header line "srnscores N", then N lines of 10 numbers
# "s1 dx1 dy1 dw1 dh1 s2 dx2 dy2 dw2 dh2".

SCORE_MAGIC = b"SRNSCORE"
_HEADER = struct.Struct("<8sQ")


def write_scores(scores: StepScores, path) -> None:
    path = Path(path)
    if path.suffix == ".txt":
        rows = np.concatenate(
            [scores.first_scores[:, None], scores.first_deltas, scores.second_scores[:, None], scores.second_deltas],
            axis=1,
        )
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"srnscores {len(scores)}\n")
            for row in rows:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SCORE_MAGIC, len(scores)))
        for arr in (scores.first_scores, scores.first_deltas, scores.second_scores, scores.second_deltas):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_scores(path) -> StepScores:
    path = Path(path)
    if path.suffix == ".txt":
        return _read_text_scores(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("score file shorter than its header", path)
    magic, n = _HEADER.unpack_from(data)
    if magic != SCORE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", path)
    expected = _HEADER.size + 4 * 10 * n
    if len(data) != expected:
        raise FormatError(f"expected {expected} bytes for {n} anchors, got {len(data)}", path)
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    s1 = flat[:n]
    d1 = flat[n : 5 * n].reshape(n, 4)
    s2 = flat[5 * n : 6 * n]
    d2 = flat[6 * n :].reshape(n, 4)
    try:
        return StepScores(s1, d1, s2, d2)
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


def _read_text_scores(path: Path) -> StepScores:
    lines = path.read_text(encoding="utf-8").splitlines()
    m = re.fullmatch(r"srnscores (\d+)", lines[0].strip()) if lines else None
    if not m:
        raise FormatError("missing 'srnscores N' header", path, 1)
    n = int(m.group(1))
    body = lines[1:]
    if len(body) < n or any(line.strip() for line in body[n:]):
        raise FormatError(f"expected exactly {n} score rows", path, len(lines))
    rows = np.zeros((n, 10))
    for j, line in enumerate(body[:n]):
        toks = line.split()
        if len(toks) != 10:
            raise FormatError(f"expected 10 fields, got {len(toks)}", path, j + 2)
        try:
            rows[j] = [float(t) for t in toks]
        except ValueError as exc:
            raise FormatError(f"bad score row {line!r}", path, j + 2) from exc
    try:
        return StepScores(rows[:, 0], rows[:, 1:5], rows[:, 5], rows[:, 6:10])
    except ValueError as exc:
        raise FormatError(str(exc), path) from exc


# ---------------------------------------------------------------------------
# Binary PPM (P6, maxval 255)


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        toks.append(data[start:pos])
    return toks, pos + 1  # exactly one whitespace byte before the raster


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"bad PPM header: {exc}", path) from exc
    if magic != b"P6":
        raise FormatError(f"only binary P6 is supported, got {magic!r}", path)
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError("need maxval 255 and positive size", path)
    raster = data[pos:]
    if len(raster) != w * h * 3:
        raise FormatError(f"expected {w * h * 3} raster bytes, got {len(raster)}", path)
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM writer needs an (H, W, 3) uint8 image")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    """Desk-scale stand-in for a trained network.

    ``score_model`` is ``"beta"`` (positives ~ Beta(8, 2), negatives ~
    Beta(2, 8)) or ``"oracle"`` (positives 1, negatives 0).
    """

    image_width: int = 1024
    image_height: int = 1024
    num_faces: int = 10
    min_scale: float = 8.0
    max_scale: float = 362.0
    face_aspect: float = 1.25
    score_model: str = "beta"
    delta_sigma: float = 0.0
    match_iou: float = 0.5
    max_overlap: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_faces < 0:
            raise ValueError("num_faces must be >= 0")
        if self.delta_sigma < 0:
            raise ValueError("delta_sigma must be >= 0")
        if self.score_model not in ("beta", "oracle"):
            raise ValueError(f"unknown score model {self.score_model!r}")
        if not 0 < self.min_scale <= self.max_scale:
            raise ValueError("need 0 < min_scale <= max_scale")


class SceneError(RuntimeError):
    pass


def place_faces(spec: SceneSpec, anchors: AnchorSet | None, rng: np.random.Generator,
                max_attempts: int = 1000) -> np.ndarray:
    """Sample in-frame face boxes with pairwise IoU below ``max_overlap``.

    With ``anchors`` given, a face is only accepted when at least one anchor
    overlaps it by more than ``match_iou``, so every face is detectable.
    """
    faces = np.zeros((0, 4))
    attempts = 0
    lo, hi = math.log(spec.min_scale), math.log(spec.max_scale)
    root = math.sqrt(spec.face_aspect)
    while len(faces) < spec.num_faces:
        attempts += 1
        if attempts > max_attempts:
            raise SceneError(f"placed {len(faces)} of {spec.num_faces} faces in {max_attempts} attempts")
        scale = math.exp(rng.uniform(lo, hi))
        w, h = scale / root, scale * root
        if w > spec.image_width or h > spec.image_height:
            continue
        x = rng.uniform(0, spec.image_width - w)
        y = rng.uniform(0, spec.image_height - h)
        cand = np.array([[x, y, x + w, y + h]])
        if len(faces) and iou_matrix(cand, faces).max() >= spec.max_overlap:
            continue
        if anchors is not None and _best_anchor_iou(anchors, cand[0]) <= spec.match_iou:
            continue
        faces = np.concatenate([faces, cand])
    return faces


def _best_anchor_iou(anchors: AnchorSet, face: np.ndarray) -> float:
    b = anchors.boxes
    near = (b[:, 0] < face[2]) & (b[:, 2] > face[0]) & (b[:, 1] < face[3]) & (b[:, 3] > face[1])
    if not near.any():
        return 0.0
    return float(iou_matrix(b[near], face).max())


def synth_scores(anchors: AnchorSet, faces: np.ndarray, spec: SceneSpec, rng: np.random.Generator) -> StepScores:
    """Scores and deltas an ideal-ish network would emit for ``faces``.

    Anchors overlapping a face by more than ``match_iou`` draw from the
    positive score distribution, everything else from the negative one.
    First-step deltas target the face from the anchor; second-step deltas
    target it from the refined anchor, so with zero noise the chain lands
    exactly on the face.
    """
    n = len(anchors)
    faces = as_boxes(faces)
    positive = np.zeros(n, dtype=bool)
    owner = np.zeros(n, dtype=np.int64)
    if len(faces):
        for start in range(0, n, 1 << 15):
            ious = iou_matrix(anchors.boxes[start : start + (1 << 15)], faces)
            owner[start : start + len(ious)] = ious.argmax(axis=1)
            positive[start : start + len(ious)] = ious.max(axis=1) > spec.match_iou

    def draw_scores() -> np.ndarray:
        if spec.score_model == "oracle":
            return positive.astype(np.float64)
        s = rng.beta(2.0, 8.0, size=n)
        s[positive] = rng.beta(8.0, 2.0, size=int(positive.sum()))
        return s

    def noise() -> np.ndarray:
        if spec.delta_sigma == 0:
            return np.zeros((n, 4))
        return rng.normal(0.0, spec.delta_sigma, size=(n, 4))

    s1 = draw_scores()
    d1 = noise()
    if positive.any():
        d1[positive] += encode(faces[owner[positive]], anchors.boxes[positive])
    scores = StepScores(s1, d1, np.zeros(n), np.zeros((n, 4)))
    refined = str_refine(anchors, scores)

    s2 = draw_scores()
    d2 = noise()
    if positive.any():
        d2[positive] += encode(faces[owner[positive]], refined[positive])
    return StepScores(s1, d1, s2, d2)


def synth_scene(spec: SceneSpec, anchors: AnchorSet) -> tuple[list[GroundTruthFace], StepScores]:
    """Faces plus aligned step scores for one synthetic image."""
    rng = np.random.default_rng(spec.seed)
    faces = place_faces(spec, anchors, rng)
    scores = synth_scores(anchors, faces, spec, rng)
    return [GroundTruthFace(BoxXYXY(*map(float, f))) for f in faces], scores
