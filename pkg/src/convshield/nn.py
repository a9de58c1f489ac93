"""Forward-only CNN layers and declarative architectures.

All feature maps are float64 arrays shaped ``(C, H, W)`` or, batched,
``(N, C, H, W)``. Convolution is cross-correlation with symmetric zero
padding and no bias.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .tensor import DTYPE, InitStrategy, RngStream, init_weights

# stream ids reserved for weight initialization, one per layer index
WEIGHT_STREAM_BASE = 1 << 62


class ShapeError(ValueError):
    pass


class ActivationKind(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"


class PoolKind(str, enum.Enum):
    AVG = "avg"
    MAX = "max"

    @classmethod
    def parse(cls, text) -> "PoolKind":
        text = getattr(text, "value", text)
        aliases = {"average": "avg", "mean": "avg", "maximum": "max"}
        return cls(aliases.get(str(text).lower(), str(text).lower()))


class UpsampleMode(str, enum.Enum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"


@dataclass(frozen=True)
class Conv:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.stride) < 1:
            raise ValueError(f"conv channels, kernel and stride must be positive: {self}")
        if self.padding < 0:
            raise ValueError(f"conv padding must be non-negative: {self}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


# the conv spec doubles as the conv layer
ConvLayerSpec = Conv


@dataclass(frozen=True)
class Activation:
    kind: ActivationKind = ActivationKind.RELU

    def __post_init__(self):
        object.__setattr__(self, "kind", ActivationKind(self.kind))


@dataclass(frozen=True)
class GlobalPool:
    kind: PoolKind = PoolKind.AVG

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind.parse(self.kind))


@dataclass(frozen=True)
class Upsample:
    mode: UpsampleMode = UpsampleMode.NEAREST
    scale: int = 2

    def __post_init__(self):
        object.__setattr__(self, "mode", UpsampleMode(self.mode))
        if int(self.scale) != self.scale or self.scale < 1:
            raise ValueError(f"upsample scale must be a positive integer, got {self.scale}")


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int

    def __post_init__(self):
        if min(self.in_features, self.out_features) < 1:
            raise ValueError(f"linear features must be positive: {self}")

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.out_features, self.in_features)


Layer = Union[Conv, Activation, GlobalPool, Upsample, Linear]


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...]
    stage_markers: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "stage_markers", tuple(int(i) for i in self.stage_markers))
        prev = -1
        for idx in self.stage_markers:
            if idx <= prev:
                raise ValueError("stage markers must be strictly increasing")
            if not 0 <= idx < len(self.layers) or not isinstance(self.layers[idx], Conv):
                raise ValueError(f"stage marker {idx} does not point at a conv layer")
            prev = idx

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, Conv)]

    @property
    def stride_config(self) -> tuple[int, ...]:
        return tuple(self.layers[i].stride for i in self.stage_markers)

    def feature_extractor(self) -> "ArchSpec":
        """Layers before the first global pool (the convolutional part)."""
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (GlobalPool, Linear)):
                return ArchSpec(self.layers[:i], [m for m in self.stage_markers if m < i])
        return self

    def to_dict(self) -> dict:
        return {"layers": [layer_to_dict(l) for l in self.layers],
                "stage_markers": list(self.stage_markers)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchSpec":
        if not isinstance(doc, dict) or "layers" not in doc:
            raise ValueError("architecture document needs a 'layers' array")
        layers = [layer_from_dict(entry) for entry in doc["layers"]]
        return cls(layers, doc.get("stage_markers", []))

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))


def load_arch(path) -> ArchSpec:
    return ArchSpec.from_json(Path(path).read_text())


def layer_to_dict(layer: Layer) -> dict:
    if isinstance(layer, Conv):
        return {"type": "conv", "in_channels": layer.in_channels, "out_channels": layer.out_channels,
                "kernel": layer.kernel, "stride": layer.stride, "padding": layer.padding}
    if isinstance(layer, Activation):
        return {"type": layer.kind.value}
    if isinstance(layer, GlobalPool):
        return {"type": "pool", "kind": layer.kind.value}
    if isinstance(layer, Upsample):
        return {"type": "upsample", "mode": layer.mode.value, "scale": layer.scale}
    if isinstance(layer, Linear):
        return {"type": "linear", "in_features": layer.in_features, "out_features": layer.out_features}
    raise TypeError(f"unknown layer {layer!r}")


_LAYER_FIELDS = {
    "conv": (Conv, {"in_channels", "out_channels", "kernel", "stride", "padding"}),
    "pool": (GlobalPool, {"kind"}),
    "upsample": (Upsample, {"mode", "scale"}),
    "linear": (Linear, {"in_features", "out_features"}),
}


def layer_from_dict(entry: dict) -> Layer:
    try:
        kind = entry["type"]
    except (TypeError, KeyError):
        raise ValueError(f"layer entry without 'type': {entry!r}") from None
    params = {k: v for k, v in entry.items() if k != "type"}
    if kind in ("relu", "identity"):
        if params:
            raise ValueError(f"{kind} layer takes no parameters: {entry!r}")
        return Activation(kind)
    if kind not in _LAYER_FIELDS:
        raise ValueError(f"unknown layer type {kind!r}")
    cls, allowed = _LAYER_FIELDS[kind]
    extra = set(params) - allowed
    if extra:
        raise ValueError(f"unexpected fields for {kind}: {sorted(extra)}")
    try:
        return cls(**params)
    except TypeError as exc:
        raise ValueError(f"bad {kind} layer {entry!r}: {exc}") from None


# ---------------------------------------------------------------------------
# convolution arithmetic


def output_dims(h_in: int, w_in: int, spec: Conv) -> tuple[int, int]:
    """floor((n + 2p - k) / s + 1) along each axis."""
    if h_in < 1 or w_in < 1:
        raise ShapeError(f"input dims must be >= 1, got {h_in}x{w_in}")
    h = (h_in + 2 * spec.padding - spec.kernel) // spec.stride + 1
    w = (w_in + 2 * spec.padding - spec.kernel) // spec.stride + 1
    if h < 1 or w < 1:
        raise ShapeError(f"conv k={spec.kernel} s={spec.stride} p={spec.padding} "
                         f"on {h_in}x{w_in} input gives empty output {h}x{w}")
    return h, w


def _check_conv_args(x: np.ndarray, weights: np.ndarray, spec: Conv):
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv input must be CxHxW or NxCxHxW, got shape {x.shape}")
    if x.shape[-3] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} input channels, got {x.shape[-3]}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"conv weights must have shape {spec.weight_shape}, got {weights.shape}")
    return output_dims(x.shape[-2], x.shape[-1], spec)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, widths)


def conv2d(x, weights, spec: Conv, method: str = "direct") -> np.ndarray:
    """Strided cross-correlation of ``x`` with ``weights`` (out x in x k x k).

    ``method="direct"`` accumulates, for every output element, the products
    in the fixed order (channel, row, column) starting from 0.0, so results
    are reproducible to the bit. ``method="gemm"`` lowers the input to a
    patch matrix and uses BLAS; it is much faster but rounds differently.
    """
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if method == "gemm":
        return conv2d_gemm(x, weights, spec)
    if method != "direct":
        raise ValueError(f"unknown conv method {method!r}")
    ho, wo = _check_conv_args(x, weights, spec)
    k, s = spec.kernel, spec.stride
    xp = _pad(x, spec.padding)
    batched = x.ndim == 4
    if not batched:
        xp = xp[None]
    out = np.zeros((xp.shape[0], spec.out_channels, ho, wo), dtype=DTYPE)
    for c in range(spec.in_channels):
        for m in range(k):
            for n in range(k):
                patch = xp[:, c, m:m + s * (ho - 1) + 1:s, n:n + s * (wo - 1) + 1:s]
                out += weights[:, c, m, n][None, :, None, None] * patch[:, None]
    return out if batched else out[0]


def conv2d_gemm(x: np.ndarray, weights: np.ndarray, spec: Conv) -> np.ndarray:
    ho, wo = _check_conv_args(x, weights, spec)
    if x.ndim == 4:
        return np.stack([_gemm_single(img, weights, spec, ho, wo) for img in x])
    return _gemm_single(x, weights, spec, ho, wo)


def _gemm_single(x, weights, spec, ho, wo):
    c, h, w = x.shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    o = spec.out_channels
    hp, wp = h + 2 * p, w + 2 * p
    if s == 1:
        # Row-shift lowering: on the flattened padded image, a column shift n is
        # a contiguous slice, and a row shift m is an offset of m*wp. Outputs are
        # computed on a ho x wp grid and the wrapped columns discarded.
        length = hp * wp
        flat = np.zeros((c, length + k), dtype=DTYPE)
        flat[:, :length].reshape(c, hp, wp)[:, p:p + h, p:p + w] = x
        shifted = np.empty((c, k, length), dtype=DTYPE)
        for n in range(k):
            shifted[:, n] = flat[:, n:n + length]
        shifted = shifted.reshape(c * k, length)
        span = ho * wp
        out = None
        for m in range(k):
            wm = np.ascontiguousarray(weights[:, :, m, :]).reshape(o, c * k)
            term = wm @ shifted[:, m * wp:m * wp + span]
            out = term if out is None else out.__iadd__(term)
        return out.reshape(o, ho, wp)[:, :, :wo].copy()
    xp = _pad(x, p)
    cols = np.empty((c, k, k, ho, wo), dtype=DTYPE)
    for m in range(k):
        for n in range(k):
            cols[:, m, n] = xp[:, m:m + s * (ho - 1) + 1:s, n:n + s * (wo - 1) + 1:s]
    return (weights.reshape(o, -1) @ cols.reshape(c * k * k, ho * wo)).reshape(o, ho, wo)


# ---------------------------------------------------------------------------
# other layers


def global_pool(x, kind) -> np.ndarray:
    """Reduce each channel's H x W map to its mean (``avg``) or maximum (``max``)."""
    x = np.asarray(x, dtype=DTYPE)
    kind = PoolKind.parse(kind)
    if x.ndim not in (3, 4):
        raise ShapeError(f"pool input must be CxHxW or NxCxHxW, got shape {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeError("cannot pool an empty spatial map")
    if kind is PoolKind.AVG:
        return x.mean(axis=(-2, -1))
    return x.max(axis=(-2, -1))


def _bilinear_axis(n_in: int, scale: int):
    dst = np.arange(n_in * scale, dtype=DTYPE)
    src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample(x, mode, scale: int) -> np.ndarray:
    """Integer-factor spatial upsampling.

    Nearest replicates every pixel into a scale x scale block. Bilinear maps
    output coordinate ``d`` to source ``(d + 0.5) / scale - 0.5`` clamped to
    the valid range, separably along height then width.
    """
    x = np.asarray(x, dtype=DTYPE)
    mode = UpsampleMode(getattr(mode, "value", mode))
    if int(scale) != scale or scale < 1:
        raise ValueError(f"upsample scale must be a positive integer, got {scale}")
    if x.ndim < 2:
        raise ShapeError(f"upsample needs at least 2 spatial dims, got shape {x.shape}")
    scale = int(scale)
    if scale == 1:
        return x.copy()
    if mode is UpsampleMode.NEAREST:
        return np.repeat(np.repeat(x, scale, axis=-2), scale, axis=-1)
    i0, i1, t = _bilinear_axis(x.shape[-2], scale)
    t = t[:, None]
    x = x[..., i0, :] * (1.0 - t) + x[..., i1, :] * t
    j0, j1, u = _bilinear_axis(x.shape[-1], scale)
    return x[..., j0] * (1.0 - u) + x[..., j1] * u


def linear(x, weights, batched: bool = False) -> np.ndarray:
    """``weights @ x`` on the flattened input (row-wise when ``batched``)."""
    x = np.asarray(x, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    flat = x.reshape(x.shape[0], -1) if batched else x.reshape(-1)
    if flat.shape[-1] != weights.shape[1]:
        raise ShapeError(f"linear expects {weights.shape[1]} features, got {flat.shape[-1]}")
    return flat @ weights.T


def relu(x) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# whole networks


def layer_output_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Shape after ``layer`` for an unbatched input of ``shape``."""
    if isinstance(layer, Conv):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"conv expects {layer.in_channels}xHxW input, got {shape}")
        return (layer.out_channels, *output_dims(shape[1], shape[2], layer))
    if isinstance(layer, Activation):
        return shape
    if isinstance(layer, GlobalPool):
        if len(shape) != 3:
            raise ShapeError(f"pool expects CxHxW input, got {shape}")
        return (shape[0],)
    if isinstance(layer, Upsample):
        if len(shape) != 3:
            raise ShapeError(f"upsample expects CxHxW input, got {shape}")
        return (shape[0], shape[1] * layer.scale, shape[2] * layer.scale)
    if isinstance(layer, Linear):
        n = int(np.prod(shape))
        if n != layer.in_features:
            raise ShapeError(f"linear expects {layer.in_features} features, got {n}")
        return (layer.out_features,)
    raise TypeError(f"unknown layer {layer!r}")


def layer_shapes(arch: ArchSpec, input_shape) -> list[tuple[int, ...]]:
    """Output shape of every layer for an unbatched input of ``input_shape``."""
    shapes = []
    shape = tuple(int(s) for s in input_shape)
    for i, layer in enumerate(arch.layers):
        try:
            shape = layer_output_shape(layer, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i}: {exc}") from None
        shapes.append(shape)
    return shapes


def init_arch_weights(arch: ArchSpec, strategy: InitStrategy, seed: int) -> list[np.ndarray | None]:
    """One weight tensor per conv/linear layer (``None`` elsewhere).

    Layer ``i`` draws from stream ``WEIGHT_STREAM_BASE + i`` of ``seed``.
    """
    weights = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, (Conv, Linear)):
            weights.append(init_weights(layer.weight_shape, strategy, RngStream(seed, WEIGHT_STREAM_BASE + i)))
        else:
            weights.append(None)
    return weights


def forward(arch: ArchSpec, weights: Sequence, x, *, intermediates: bool = False,
            conv_method: str = "direct"):
    """Apply ``arch`` to ``x``; optionally also return every layer's output."""
    if len(weights) != len(arch.layers):
        raise ShapeError(f"expected {len(arch.layers)} weight entries, got {len(weights)}")
    out = np.asarray(x, dtype=DTYPE)
    batched = out.ndim == 4
    trace = []
    for i, (layer, w) in enumerate(zip(arch.layers, weights)):
        try:
            if isinstance(layer, Conv):
                out = conv2d(out, w, layer, method=conv_method)
            elif isinstance(layer, Activation):
                out = relu(out) if layer.kind is ActivationKind.RELU else out
            elif isinstance(layer, GlobalPool):
                out = global_pool(out, layer.kind)
            elif isinstance(layer, Upsample):
                out = upsample(out, layer.mode, layer.scale)
            elif isinstance(layer, Linear):
                w = np.asarray(w, dtype=DTYPE)
                if w.shape != layer.weight_shape:
                    raise ShapeError(f"linear weights must have shape {layer.weight_shape}, got {w.shape}")
                out = linear(out, w, batched)
            else:
                raise TypeError(f"unknown layer {layer!r}")
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({layer_to_dict(layer)['type']}): {exc}") from None
        if intermediates:
            trace.append(out)
    return (out, trace) if intermediates else out


# ---------------------------------------------------------------------------
# arch editing helpers


def set_activation(arch: ArchSpec, kind) -> ArchSpec:
    """Drop all activation layers, then put ``kind`` after every conv (none for identity)."""
    kind = ActivationKind("identity" if kind in (None, "none") else getattr(kind, "value", kind))
    layers: list[Layer] = []
    markers = []
    marker_set = set(arch.stage_markers)
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Activation):
            continue
        if i in marker_set:
            markers.append(len(layers))
        layers.append(layer)
        if isinstance(layer, Conv) and kind is ActivationKind.RELU:
            layers.append(Activation(kind))
    return ArchSpec(layers, markers)


def set_pool(arch: ArchSpec, kind) -> ArchSpec:
    kind = PoolKind.parse(kind)
    layers = [GlobalPool(kind) if isinstance(l, GlobalPool) else l for l in arch.layers]
    return replace(arch, layers=tuple(layers))


def with_head(arch: ArchSpec, num_classes: int, input_shape=None) -> ArchSpec:
    """Append a linear classifier after the (first) global pool."""
    body = arch.feature_extractor()
    pool = next((l for l in arch.layers if isinstance(l, GlobalPool)), GlobalPool(PoolKind.AVG))
    channels = body.conv_indices and body.layers[body.conv_indices[-1]].out_channels
    if not channels:
        if input_shape is None:
            raise ValueError("cannot infer feature count for an arch without convs")
        channels = int(input_shape[0])
    return ArchSpec((*body.layers, pool, Linear(channels, num_classes)), body.stage_markers)


def prepend_upsample(arch: ArchSpec, mode, scale: int) -> ArchSpec:
    return ArchSpec((Upsample(mode, scale), *arch.layers), [m + 1 for m in arch.stage_markers])
