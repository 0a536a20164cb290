"""Training-time augmentation on (H, W, 3) uint8 images with xyxy boxes.

Per call: photometric jitter, then either data-anchor-sampling (with
probability ``das_probability``) or expand -> random crop -> resize. The
output is always ``output_size`` x ``output_size``; boxes are clipped to the
frame and degenerate ones dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import cv2
import numpy as np

from .geometry import as_boxes, box_areas, clip_boxes


@dataclass(frozen=True)
class AugmentConfig:
    output_size: int = 1024
    das_probability: float = 0.5
    anchor_scale_set: tuple[float, ...] = (16.0, 32.0, 64.0, 128.0, 256.0, 512.0)
    das_jitter: tuple[float, float] = (0.75, 1.25)
    expand_max_ratio: float = 4.0
    crop_min_fraction: float = 0.3
    crop_attempts: int = 50
    # photometric ranges, pixel units (0..255) and degrees
    brightness_delta: float = 32.0
    contrast_range: tuple[float, float] = (0.5, 1.5)
    saturation_range: tuple[float, float] = (0.5, 1.5)
    hue_delta: float = 18.0

    def __post_init__(self):
        if self.output_size < 1:
            raise ValueError("output_size must be >= 1")
        if not 0.0 <= self.das_probability <= 1.0:
            raise ValueError("das_probability must lie in [0, 1]")
        if self.expand_max_ratio < 1.0:
            raise ValueError("expand_max_ratio must be >= 1")
        if not self.anchor_scale_set or any(s <= 0 for s in self.anchor_scale_set):
            raise ValueError("anchor_scale_set must hold positive scales")
        if not 0 < self.crop_min_fraction <= 1.0:
            raise ValueError("crop_min_fraction must lie in (0, 1]")

    @classmethod
    def identity_photometric(cls, **kw) -> "AugmentConfig":
        return cls(brightness_delta=0.0, contrast_range=(1.0, 1.0), saturation_range=(1.0, 1.0),
                   hue_delta=0.0, **kw)


def rng_for(seed: int, image_id: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for one image of a seeded run."""
    return np.random.default_rng([int(seed), int(image_id)])


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3 or min(img.shape[:2]) < 1:
        raise ValueError(f"expected a non-empty (H, W, 3) uint8 image, got {img.dtype} {img.shape}")
    return img


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Photometric


def adjust_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    return _to_uint8(img.astype(np.float32) + delta)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    return _to_uint8(img.astype(np.float32) * factor)


def _adjust_hsv(img: np.ndarray, saturation: float = 1.0, hue_shift: float = 0.0) -> np.ndarray:
    hsv = cv2.cvtColor(img.astype(np.float32) / 255.0, cv2.COLOR_RGB2HSV)
    hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue_shift, 360.0)
    return _to_uint8(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB) * 255.0)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    return _adjust_hsv(img, saturation=factor)


def adjust_hue(img: np.ndarray, degrees: float) -> np.ndarray:
    return _adjust_hsv(img, hue_shift=degrees)


def photometric_distort(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter, each with probability 1/2.

    Contrast goes before or after the colour-space steps with equal odds.
    Draws that amount to the identity are skipped.
    """
    img = _check_image(img)
    out = img
    contrast_first = rng.random() < 0.5

    def maybe_contrast(x):
        if rng.random() < 0.5:
            f = rng.uniform(*cfg.contrast_range)
            if f != 1.0:
                x = adjust_contrast(x, f)
        return x

    if rng.random() < 0.5:
        d = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
        if d != 0.0:
            out = adjust_brightness(out, d)
    if contrast_first:
        out = maybe_contrast(out)
    if rng.random() < 0.5:
        f = rng.uniform(*cfg.saturation_range)
        if f != 1.0:
            out = adjust_saturation(out, f)
    if rng.random() < 0.5:
        h = rng.uniform(-cfg.hue_delta, cfg.hue_delta)
        if h != 0.0:
            out = adjust_hue(out, h)
    if not contrast_first:
        out = maybe_contrast(out)
    return out if out is not img else img.copy()


# ---------------------------------------------------------------------------
# Geometry helpers


def _keep_valid(boxes: np.ndarray, width: float, height: float) -> tuple[np.ndarray, np.ndarray]:
    boxes = clip_boxes(boxes, width, height)
    live = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return boxes[live], live


def resize_image(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    return cv2.resize(img, (out_w, out_h), interpolation=cv2.INTER_LINEAR)


def _warp(img: np.ndarray, scale: float, x0: float, y0: float, size: int) -> np.ndarray:
    """Window of ``img`` scaled by ``scale`` starting at scaled coords (x0, y0)."""
    m = np.array([[scale, 0.0, -x0], [0.0, scale, -y0]], dtype=np.float64)
    # cv2 samples pixel centres; keep continuous coordinates aligned with the boxes
    m[:, 2] += 0.5 * scale - 0.5
    return cv2.warpAffine(img, m, (size, size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=(0, 0, 0))


# ---------------------------------------------------------------------------
# Geometric steps


def expand(img: np.ndarray, boxes, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
           ratio: float | None = None, offset: tuple[int, int] | None = None):
    """Zero-pad onto a canvas ``ratio`` times larger at a random offset."""
    img = _check_image(img)
    boxes = as_boxes(boxes)
    if ratio is None:
        ratio = rng.uniform(1.0, cfg.expand_max_ratio)
    h, w = img.shape[:2]
    new_w, new_h = int(w * ratio), int(h * ratio)
    if offset is None:
        offset = (int(rng.integers(0, new_w - w + 1)), int(rng.integers(0, new_h - h + 1)))
    ox, oy = offset
    canvas = np.zeros((new_h, new_w, 3), dtype=np.uint8)
    canvas[oy : oy + h, ox : ox + w] = img
    return canvas, boxes + np.array([ox, oy, ox, oy], dtype=np.float64)


class CropWindow(NamedTuple):
    x0: int
    y0: int
    side: int


def centers_inside(boxes: np.ndarray, window: CropWindow) -> np.ndarray:
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    return (
        (cx > window.x0) & (cx < window.x0 + window.side)
        & (cy > window.y0) & (cy < window.y0 + window.side)
    )


def crop_to_window(img: np.ndarray, boxes: np.ndarray, window: CropWindow):
    """Cut ``window`` out; keep boxes whose centre lies inside, shifted and clipped."""
    x0, y0, side = window
    patch = img[y0 : y0 + side, x0 : x0 + side].copy()
    keep = centers_inside(boxes, window)
    moved = boxes[keep] - np.array([x0, y0, x0, y0], dtype=np.float64)
    moved, _ = _keep_valid(moved, side, side)
    return patch, moved


def random_crop(img: np.ndarray, boxes, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig(),
                allow_empty: bool = False):
    """Square crop with side in [0.3, 1] of the short image side.

    Redraws up to ``crop_attempts`` times until at least one box centre
    falls inside the patch; falls back to the central square.
    """
    img = _check_image(img)
    boxes = as_boxes(boxes)
    h, w = img.shape[:2]
    short = min(h, w)
    lo = max(1, int(math.ceil(cfg.crop_min_fraction * short)))
    for _ in range(cfg.crop_attempts):
        side = int(rng.integers(lo, short + 1))
        window = CropWindow(int(rng.integers(0, w - side + 1)), int(rng.integers(0, h - side + 1)), side)
        if (allow_empty and len(boxes) == 0) or centers_inside(boxes, window).any():
            return crop_to_window(img, boxes, window)
    window = CropWindow((w - short) // 2, (h - short) // 2, short)
    return crop_to_window(img, boxes, window)


class DasInfo(NamedTuple):
    face_index: int  # chosen face in the input box list
    output_index: int  # the same face in the returned box list
    target_scale: float
    factor: float


def nearest_scale_index(face_scale: float, scales) -> int:
    return int(np.argmin(np.abs(np.asarray(scales, dtype=np.float64) - face_scale)))


def _window_start(lo: float, hi: float, extent: float, size: int, rng: np.random.Generator) -> float:
    """Start of a ``size`` window over [0, extent] that covers [lo, hi].

    Windows stay inside the image when it is large enough; otherwise the
    whole image lands at a random place inside a zero-padded window.
    """
    if extent >= size:
        a, b = max(0.0, hi - size), min(lo, extent - size)
    else:
        a, b = extent - size, 0.0
    return float(rng.uniform(a, b)) if b > a else float(a)


def data_anchor_sample(img: np.ndarray, boxes, rng: np.random.Generator,
                       cfg: AugmentConfig = AugmentConfig(), jitter: float | None = None,
                       target_index: int | None = None):
    """Rescale so a random face lands near a random anchor scale, then cut an
    ``output_size`` square around it.

    Returns ``(patch, boxes, DasInfo)``.
    """
    img = _check_image(img)
    boxes = as_boxes(boxes)
    h, w = img.shape[:2]
    boxes, _ = _keep_valid(boxes, w, h)
    if len(boxes) == 0:
        raise ValueError("data-anchor-sampling needs at least one face")
    scales = cfg.anchor_scale_set
    size = cfg.output_size

    k = int(rng.integers(len(boxes)))
    face = boxes[k]
    face_scale = math.sqrt((face[2] - face[0]) * (face[3] - face[1]))
    i = nearest_scale_index(face_scale, scales)
    if target_index is None:
        target_index = int(rng.integers(0, min(i + 1, len(scales) - 1) + 1))
    if jitter is None:
        jitter = rng.uniform(*cfg.das_jitter)
    target = scales[target_index]
    # a face larger than the window after scaling cannot be kept whole
    f = min(target * jitter / face_scale, size / max(face[2] - face[0], face[3] - face[1]))

    sw, sh = w * f, h * f
    sf = face * f
    x0 = _window_start(sf[0], sf[2], sw, size, rng)
    y0 = _window_start(sf[1], sf[3], sh, size, rng)

    patch = _warp(img, f, x0, y0, size)
    moved = boxes * f - np.array([x0, y0, x0, y0], dtype=np.float64)
    window = CropWindow(0, 0, size)
    keep = centers_inside(moved, window)
    keep[k] = True
    idx = np.flatnonzero(keep)
    moved, live = _keep_valid(moved[keep], size, size)
    idx = idx[live]
    out_k = int(np.flatnonzero(idx == k)[0])
    return patch, moved, DasInfo(k, out_k, float(target), float(f))


@dataclass
class AugmentResult:
    image: np.ndarray
    boxes: np.ndarray
    das: DasInfo | None = None


def augment_pipeline(img: np.ndarray, boxes, rng: np.random.Generator,
                     cfg: AugmentConfig = AugmentConfig()) -> AugmentResult:
    img = _check_image(img)
    boxes = as_boxes(boxes)
    img = photometric_distort(img, rng, cfg)
    h, w = img.shape[:2]
    valid, _ = _keep_valid(boxes, w, h)
    size = cfg.output_size

    if len(valid) and rng.random() < cfg.das_probability:
        patch, out_boxes, info = data_anchor_sample(img, valid, rng, cfg)
        return AugmentResult(patch, out_boxes, info)

    img, moved = expand(img, valid, rng, cfg)
    patch, moved = random_crop(img, moved, rng, cfg, allow_empty=True)
    side = patch.shape[0]
    out = resize_image(patch, size, size)
    moved, _ = _keep_valid(moved * (size / side), size, size)
    return AugmentResult(out, moved)
