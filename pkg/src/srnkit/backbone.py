"""Symbolic shape, stride and weight-count tracing for ResNet stem variants.

Three stems are modelled:

``resnet_original``
    7x7/2 conv to 64 channels followed by a 3x3/2 max-pool.
``root_resnet``
    The 7x7 conv replaced by three stacked 3x3 convs, the first one at
    stride 1, max-pool kept.
``new_resnet``
    7x7 conv at stride 1 with 16 channels, then one residual basic block at
    16 channels (stride 1) and one at 32 channels (stride 2). No max-pool.

Nothing is executed; layers only carry enough structure to propagate
shapes with "same" padding (``out = ceil(in / stride)``) and to count conv
weights (``k*k*in*out``, no bias or normalization parameters).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

CONV = "conv"
MAXPOOL = "maxpool"
RESIDUAL = "residual_basic_block"
_KINDS = (CONV, MAXPOOL, RESIDUAL)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.kernel < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("kernel and channel counts must be >= 1")
        if self.kind == MAXPOOL and self.in_channels != self.out_channels:
            raise ValueError("max-pool cannot change channel count")

    def expand(self) -> list["LayerSpec"]:
        """Constituent convolutions; a residual basic block becomes two 3x3
        convs plus a 1x1 projection when its shape changes."""
        if self.kind != RESIDUAL:
            return [self]
        convs = [
            LayerSpec(CONV, 3, self.stride, self.in_channels, self.out_channels, f"{self.name}.conv1"),
            LayerSpec(CONV, 3, 1, self.out_channels, self.out_channels, f"{self.name}.conv2"),
        ]
        if self.stride != 1 or self.in_channels != self.out_channels:
            convs.append(
                LayerSpec(CONV, 1, self.stride, self.in_channels, self.out_channels, f"{self.name}.proj")
            )
        return convs


@dataclass(frozen=True)
class StemVariant:
    name: str
    layers: tuple[LayerSpec, ...]


def _stem_layers(name: str) -> list[LayerSpec]:
    if name == "resnet_original":
        return [
            LayerSpec(CONV, 7, 2, 3, 64, "conv1"),
            LayerSpec(MAXPOOL, 3, 2, 64, 64, "pool1"),
        ]
    if name == "root_resnet":
        return [
            LayerSpec(CONV, 3, 1, 3, 64, "conv1_1"),
            LayerSpec(CONV, 3, 1, 64, 64, "conv1_2"),
            LayerSpec(CONV, 3, 1, 64, 64, "conv1_3"),
            LayerSpec(MAXPOOL, 3, 2, 64, 64, "pool1"),
        ]
    if name == "new_resnet":
        return [
            LayerSpec(CONV, 7, 1, 3, 16, "conv1"),
            LayerSpec(RESIDUAL, 3, 1, 16, 16, "res1"),
            LayerSpec(RESIDUAL, 3, 2, 16, 32, "res2"),
        ]
    raise ValueError(f"unknown stem variant {name!r}; choose from {', '.join(STEM_NAMES)}")


STEM_NAMES = ("resnet_original", "root_resnet", "new_resnet")


def build_stem(variant_name: str) -> StemVariant:
    return StemVariant(variant_name, tuple(_stem_layers(variant_name)))


class ShapeRow(NamedTuple):
    name: str
    kind: str
    height: int
    width: int
    channels: int
    cumulative_stride: int


def trace_shapes(stem: StemVariant, input_h: int, input_w: int, in_channels: int = 3) -> list[ShapeRow]:
    """Output shape after every layer of ``stem``."""
    if input_h < 1 or input_w < 1:
        raise ValueError("input dimensions must be positive")
    h, w, c, cum = input_h, input_w, in_channels, 1
    rows = []
    for layer in stem.layers:
        if layer.in_channels != c:
            raise ValueError(f"{layer.name}: expects {layer.in_channels} channels, got {c}")
        h = -(-h // layer.stride)
        w = -(-w // layer.stride)
        c = layer.out_channels
        cum *= layer.stride
        rows.append(ShapeRow(layer.name, layer.kind, h, w, c, cum))
    return rows


def layer_params(layer: LayerSpec) -> int:
    if layer.kind == MAXPOOL:
        return 0
    return sum(c.kernel * c.kernel * c.in_channels * c.out_channels for c in layer.expand())


def param_count(stem: StemVariant | LayerSpec) -> int:
    """Conv weight count of a stem (or a single layer)."""
    if isinstance(stem, LayerSpec):
        return layer_params(stem)
    return sum(layer_params(layer) for layer in stem.layers)


# Body stages after the stem, as (name, stride) pairs, down to the coarsest
# pyramid level. Channel widths are irrelevant for the stride report.
_BODY_STRIDES = {
    "resnet_original": [("C2", 1), ("C3", 2), ("C4", 2), ("C5", 2), ("P6", 2), ("P7", 2)],
    "root_resnet": [("C2", 2), ("C3", 2), ("C4", 2), ("C5", 2), ("P6", 2), ("P7", 2)],
    "new_resnet": [("C2", 2), ("C3", 2), ("C4", 2), ("C5", 2), ("P6", 2), ("P7", 2)],
}


def pyramid_strides(variant_name: str) -> list[tuple[str, int]]:
    """Cumulative stride of each detection level when ``variant_name`` feeds
    a ResNet body whose first stage brings the map to stride 4."""
    stem = build_stem(variant_name)
    cum = trace_shapes(stem, 1, 1)[-1].cumulative_stride
    out = []
    for name, stride in _BODY_STRIDES[variant_name]:
        cum *= stride
        out.append((name, cum))
    return out
