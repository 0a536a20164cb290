"""Resolved run configuration: built-in defaults < config file < flags.

Config files are ``key = value`` lines with ``#`` comments; list values are
comma separated. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .anchors import PyramidConfig
from .augment import AugmentConfig
from .coding import LossConfig
from .data_io import FormatError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # pyramid
    input_width: int = 1024
    input_height: int = 1024
    strides: tuple[int, ...] = (4, 8, 16, 32, 64, 128)
    scale_multipliers: tuple[float, ...] = (2.0, 2.0 * math.sqrt(2.0))
    aspect_ratio: float = 1.25
    low_level_count: int = 3
    # losses
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    # augmentation
    output_size: int = 1024
    das_probability: float = 0.5
    anchor_scale_set: tuple[float, ...] = (16.0, 32.0, 64.0, 128.0, 256.0, 512.0)
    expand_max_ratio: float = 4.0
    brightness_delta: float = 32.0
    contrast_lower: float = 0.5
    contrast_upper: float = 1.5
    saturation_lower: float = 0.5
    saturation_upper: float = 1.5
    hue_delta: float = 18.0
    # matching and inference
    step1_pos_iou: float = 0.7
    step1_neg_iou: float = 0.3
    step2_pos_iou: float = 0.5
    step2_neg_iou: float = 0.4
    stc_threshold: float = 0.01
    top_k: int = 2000
    nms_iou: float = 0.4
    cap: int = 750
    test_scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    seed: int = 0

    def __post_init__(self):
        try:
            self.pyramid()
            self.loss()
            self.augment()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for pos, neg in ((self.step1_pos_iou, self.step1_neg_iou), (self.step2_pos_iou, self.step2_neg_iou)):
            if not 0.0 <= neg <= pos <= 1.0:
                raise ConfigError(f"matching thresholds need 0 <= neg <= pos <= 1, got {neg}, {pos}")
        if self.top_k < 1 or self.cap < 1:
            raise ConfigError("top_k and cap must be >= 1")
        if any(s <= 0 for s in self.test_scales):
            raise ConfigError("test scales must be positive")

    def pyramid(self, scale: float = 1.0) -> PyramidConfig:
        return PyramidConfig(
            input_width=max(1, round(self.input_width * scale)),
            input_height=max(1, round(self.input_height * scale)),
            strides=self.strides,
            scale_multipliers=self.scale_multipliers,
            aspect_ratio=self.aspect_ratio,
            low_level_count=self.low_level_count,
        )

    def loss(self) -> LossConfig:
        return LossConfig(self.focal_alpha, self.focal_gamma, self.smooth_l1_beta)

    def augment(self) -> AugmentConfig:
        return AugmentConfig(
            output_size=self.output_size,
            das_probability=self.das_probability,
            anchor_scale_set=self.anchor_scale_set,
            expand_max_ratio=self.expand_max_ratio,
            brightness_delta=self.brightness_delta,
            contrast_range=(self.contrast_lower, self.contrast_upper),
            saturation_range=(self.saturation_lower, self.saturation_upper),
            hue_delta=self.hue_delta,
        )

    def override(self, values: Mapping[str, Any]) -> "RunConfig":
        _check_keys(values)
        return dataclasses.replace(self, **{k: _coerce(k, v) for k, v in values.items()})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        return "".join(line + "\n" for line in lines)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _check_keys(values: Mapping[str, Any]) -> None:
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def _coerce(key: str, value: Any):
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return tuple(value) if kind.startswith("tuple") else value
    text = value.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple[int, ...]":
            return tuple(int(t) for t in text.split(",") if t.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {value!r}") from exc
    raise ConfigError(f"{key}: unsupported type {kind}")


def parse_config_text(text: str, path=None) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected 'key = value', got {raw!r}", path, lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise FormatError(f"unknown config key {key!r}", path, lineno)
        values[key] = value
    return values


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = cfg.override(parse_config_text(Path(path).read_text(encoding="utf-8"), path))
    if overrides:
        cfg = cfg.override({k: v for k, v in overrides.items() if v is not None})
    return cfg
