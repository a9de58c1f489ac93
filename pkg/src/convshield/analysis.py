"""Static architecture analysis: receptive field, cost model, stride rewriting
and the duplicate outputs produced by nearest upsampling."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

from .nn import (ArchSpec, Conv, GlobalPool, Linear, ShapeError, Upsample,
                 layer_output_shape, layer_to_dict)
from .reports import csv_text

BYTES_PER_ELEMENT = 8


def _num(x: Fraction):
    return int(x) if x.denominator == 1 else float(x)


def _size2(input_size) -> tuple[int, int]:
    if isinstance(input_size, int):
        return input_size, input_size
    h, w = input_size
    return int(h), int(w)


def _input_shape(arch: ArchSpec, input_size, channels: int | None = None) -> tuple[int, int, int]:
    h, w = _size2(input_size)
    if channels is None:
        first = next((l for l in arch.layers if isinstance(l, Conv)), None)
        channels = first.in_channels if first else 3
    return channels, h, w


# ---------------------------------------------------------------------------
# receptive field


@dataclass(frozen=True)
class RFEntry:
    layer: int          # 1-based conv index
    receptive_field: float
    jump: float
    height: int
    width: int


@dataclass
class RFReport:
    input_size: tuple[int, int]
    entries: list[RFEntry]
    global_layer: int | None

    def to_dict(self) -> dict:
        return {"input_size": list(self.input_size), "global_layer": self.global_layer,
                "layers": [vars(e).copy() for e in self.entries]}

    def to_csv(self) -> str:
        return csv_text(["layer", "receptive_field", "jump", "height", "width"],
                    [[e.layer, e.receptive_field, e.jump, e.height, e.width] for e in self.entries])


def receptive_field(arch: ArchSpec, input_size) -> RFReport:
    """Per-conv receptive field via r += (k - 1) * j, j *= s, starting at r = j = 1.

    Upsampling divides the jump by its scale. Analysis stops at the first
    global pool or linear layer. ``global_layer`` is the first conv whose
    receptive field covers the whole input (the larger side).
    """
    h, w = _size2(input_size)
    shape = _input_shape(arch, (h, w))
    r, j = Fraction(1), Fraction(1)
    entries = []
    n_conv = 0
    global_layer = None
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, (GlobalPool, Linear)):
            break
        try:
            shape = layer_output_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from None
        if isinstance(layer, Upsample):
            j /= layer.scale
        elif isinstance(layer, Conv):
            r += (layer.kernel - 1) * j
            j *= layer.stride
            n_conv += 1
            entries.append(RFEntry(n_conv, _num(r), _num(j), shape[1], shape[2]))
            if global_layer is None and r >= max(h, w):
                global_layer = n_conv
    return RFReport((h, w), entries, global_layer)


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class LayerCost:
    index: int
    type: str
    output_shape: tuple[int, ...]
    flops: int
    activation_memory_bytes: int
    param_count: int


@dataclass
class CostReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(l.flops for l in self.layers)

    @property
    def activation_memory_bytes(self) -> int:
        return sum(l.activation_memory_bytes for l in self.layers)

    @property
    def param_count(self) -> int:
        return sum(l.param_count for l in self.layers)

    @property
    def total_memory_bytes(self) -> int:
        return self.activation_memory_bytes + BYTES_PER_ELEMENT * self.param_count

    def to_dict(self) -> dict:
        return {
            "layers": [{"index": l.index, "type": l.type, "output_shape": list(l.output_shape),
                        "flops": l.flops, "activation_memory_bytes": l.activation_memory_bytes,
                        "param_count": l.param_count} for l in self.layers],
            "totals": {"flops": self.flops, "activation_memory_bytes": self.activation_memory_bytes,
                       "param_count": self.param_count, "total_memory_bytes": self.total_memory_bytes},
        }

    def to_csv(self) -> str:
        return csv_text(["index", "type", "flops", "activation_memory_bytes", "param_count"],
                    [[l.index, l.type, l.flops, l.activation_memory_bytes, l.param_count]
                     for l in self.layers])


def cost(arch: ArchSpec, input_size, in_channels: int | None = None) -> CostReport:
    """Flops, activation memory and parameters per layer for one image.

    A conv costs ``2 * C_in * k^2 * C_out * H_out * W_out`` flops (one MAC is
    two flops); a linear layer ``2 * in * out``; every other layer one flop
    per output element. Activation memory is the output element count times
    8 bytes. The input image itself is not counted.
    """
    shape = _input_shape(arch, input_size, in_channels)
    report = CostReport()
    for i, layer in enumerate(arch.layers):
        try:
            out = layer_output_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from None
        n_out = 1
        for d in out:
            n_out *= d
        if isinstance(layer, Conv):
            params = layer.out_channels * layer.in_channels * layer.kernel**2
            flops = 2 * layer.in_channels * layer.kernel**2 * n_out
        elif isinstance(layer, Linear):
            params = layer.in_features * layer.out_features
            flops = 2 * params
        else:
            params = 0
            flops = n_out
        report.layers.append(LayerCost(i, layer_to_dict(layer)["type"], out, flops,
                                       BYTES_PER_ELEMENT * n_out, params))
        shape = out
    return report


# ---------------------------------------------------------------------------
# stride rewriting


def parse_strides(text: str) -> tuple[int, ...]:
    """``"1,1,2,2"`` or ``"1-1-2-2"`` -> ``(1, 1, 2, 2)``."""
    parts = [p for p in text.replace("-", ",").split(",") if p.strip()]
    try:
        strides = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError(f"bad stride configuration {text!r}") from None
    if not strides or min(strides) < 1:
        raise ValueError(f"strides must be positive integers, got {text!r}")
    return strides


def format_strides(strides: Sequence[int]) -> str:
    return "-".join(str(s) for s in strides)


def rewrite_strides(arch: ArchSpec, new_config: Sequence[int]) -> ArchSpec:
    """Copy of ``arch`` whose stage-``i`` first conv has stride ``new_config[i]``."""
    new_config = tuple(int(s) for s in new_config)
    if len(new_config) != len(arch.stage_markers):
        raise ValueError(f"stride config has {len(new_config)} entries but the arch has "
                         f"{len(arch.stage_markers)} stages")
    if min(new_config, default=1) < 1:
        raise ValueError("strides must be >= 1")
    layers = list(arch.layers)
    for idx, s in zip(arch.stage_markers, new_config):
        layers[idx] = replace(layers[idx], stride=s)
    return ArchSpec(layers, arch.stage_markers)


# ---------------------------------------------------------------------------
# upsampling redundancy


@dataclass(frozen=True)
class RedundancyProfile:
    apparent_dims: int
    distinct_dims: int
    duplicate_groups: tuple[tuple[int, ...], ...]   # 1-based output positions

    def to_dict(self) -> dict:
        return {"apparent_dims": self.apparent_dims, "distinct_dims": self.distinct_dims,
                "duplicate_groups": [list(g) for g in self.duplicate_groups]}


def redundancy_profile(scale: int, kernel_k: int, input_len: int) -> RedundancyProfile:
    """Which outputs of a stride-1 valid 1-D correlation over a nearest-upsampled
    signal read the same input window, and are therefore equal for any filter."""
    if scale < 1 or kernel_k < 1 or input_len < 1:
        raise ValueError("scale, kernel and input length must be positive")
    length = scale * input_len
    if kernel_k > length:
        raise ValueError(f"kernel {kernel_k} exceeds upsampled length {length}")
    source = [t // scale for t in range(length)]
    groups: dict[tuple[int, ...], list[int]] = {}
    for i in range(length - kernel_k + 1):
        groups.setdefault(tuple(source[i:i + kernel_k]), []).append(i + 1)
    dupes = tuple(tuple(g) for g in groups.values() if len(g) > 1)
    return RedundancyProfile(length - kernel_k + 1, len(groups), dupes)

