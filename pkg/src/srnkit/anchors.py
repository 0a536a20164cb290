"""Anchor tiling over the six-level feature pyramid.

Each level with total stride ``S`` carries anchors of scale ``2*S`` and
``2*sqrt(2)*S`` (scale = square root of the area). The product reading of
the second scale is the one that spans 8 px (stride 4) to about 362 px
(stride 128). Anchors have height/width = ``aspect_ratio`` at constant area
and are centred on ``(S*(i + 0.5), S*(j + 0.5))``. They are never clipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class PyramidConfig:
    input_width: int = 1024
    input_height: int = 1024
    strides: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    scale_multipliers: tuple[float, ...] = (2.0, 2.0 * math.sqrt(2.0))
    aspect_ratio: float = 1.25
    low_level_count: int = 3

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "scale_multipliers", tuple(float(m) for m in self.scale_multipliers))
        if self.input_width < 1 or self.input_height < 1:
            raise ValueError("input size must be positive")
        if not self.strides or any(s < 1 for s in self.strides):
            raise ValueError("strides must be positive integers")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if not self.scale_multipliers or any(m <= 0 for m in self.scale_multipliers):
            raise ValueError("scale multipliers must be positive")
        if self.aspect_ratio <= 0:
            raise ValueError("aspect ratio must be positive")
        if not 1 <= self.low_level_count < len(self.strides):
            raise ValueError(
                f"low_level_count must be in [1, {len(self.strides) - 1}], got {self.low_level_count}"
            )

    @property
    def num_levels(self) -> int:
        return len(self.strides)

    def grid_size(self, level: int) -> tuple[int, int]:
        """(columns, rows) of the anchor grid at ``level``."""
        s = self.strides[level]
        return -(-self.input_width // s), -(-self.input_height // s)

    def level_scales(self, level: int) -> list[float]:
        return [m * self.strides[level] for m in self.scale_multipliers]

    def level_count(self, level: int) -> int:
        cols, rows = self.grid_size(level)
        return cols * rows * len(self.scale_multipliers)


@dataclass(frozen=True)
class AnchorSet:
    """All anchors of a pyramid, concatenated level by level.

    ``boxes`` is (N, 4) xyxy, ``levels`` the 0-based pyramid level of each
    anchor, ``level_offsets[k]:level_offsets[k+1]`` the slice of level k.
    """

    boxes: np.ndarray
    levels: np.ndarray
    config: PyramidConfig
    level_offsets: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.boxes)

    def level_slice(self, level: int) -> slice:
        return slice(self.level_offsets[level], self.level_offsets[level + 1])

    def level_boxes(self, level: int) -> np.ndarray:
        return self.boxes[self.level_slice(level)]

    @property
    def low_mask(self) -> np.ndarray:
        """True for anchors on the first ``low_level_count`` levels."""
        return self.levels < self.config.low_level_count

    @property
    def high_mask(self) -> np.ndarray:
        return ~self.low_mask


def _tile_level(config: PyramidConfig, level: int) -> np.ndarray:
    stride = config.strides[level]
    cols, rows = config.grid_size(level)
    cx = (np.arange(cols, dtype=np.float64) + 0.5) * stride
    cy = (np.arange(rows, dtype=np.float64) + 0.5) * stride
    root = math.sqrt(config.aspect_ratio)
    half = np.array(
        [[scale / root / 2.0, scale * root / 2.0] for scale in config.level_scales(level)]
    )
    # order: row-major over the grid, multipliers innermost
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
    c = centers[:, None, :]
    h = half[None, :, :]
    boxes = np.concatenate([c - h, c + h], axis=2)
    return boxes.reshape(-1, 4)


def generate_pyramid_anchors(config: PyramidConfig | None = None) -> AnchorSet:
    config = config or PyramidConfig()
    per_level = [_tile_level(config, k) for k in range(config.num_levels)]
    offsets = np.concatenate([[0], np.cumsum([len(b) for b in per_level])]).astype(int)
    boxes = np.concatenate(per_level, axis=0)
    boxes.setflags(write=False)
    levels = np.repeat(np.arange(config.num_levels), [len(b) for b in per_level])
    levels.setflags(write=False)
    return AnchorSet(boxes=boxes, levels=levels, config=config, level_offsets=tuple(int(o) for o in offsets))


class AnchorStats(NamedTuple):
    per_level: tuple[int, ...]
    total: int
    low_level_fraction: float


def anchor_count_stats(config: PyramidConfig | None = None) -> AnchorStats:
    """Exact anchor counts per level, without materializing any boxes."""
    config = config or PyramidConfig()
    counts = tuple(config.level_count(k) for k in range(config.num_levels))
    total = sum(counts)
    low = sum(counts[: config.low_level_count])
    return AnchorStats(per_level=counts, total=total, low_level_fraction=low / total)
