"""Dense float64 tensors, reproducible random streams and weight initializers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64, laid out as
channels x height x width (optionally with a leading batch axis).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

DTYPE = np.float64


def as_tensor(values) -> np.ndarray:
    """Return ``values`` as a C-contiguous float64 array, rejecting NaN/Inf."""
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def linf_norm(t) -> float:
    arr = np.asarray(t, dtype=DTYPE)
    if arr.size == 0:
        return 0.0
    return float(np.max(np.abs(arr)))


@dataclass(frozen=True)
class RngStream:
    """Counter-style random stream keyed by ``(seed, stream_id)``.

    Two streams with the same key always produce the same values, no matter
    which thread draws them or in which order. ``generator(*subkeys)`` derives
    further independent sub-streams (e.g. one per input size).
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self, *subkeys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *subkeys))
        return np.random.Generator(np.random.PCG64(ss))


class InitKind(str, enum.Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"
    XAVIER_NORMAL = "xavier_normal"
    XAVIER_UNIFORM = "xavier_uniform"


@dataclass(frozen=True)
class InitStrategy:
    """Weight initialization rule.

    ``mean``/``std`` parametrize ``NORMAL`` and ``low``/``high`` parametrize
    ``UNIFORM``; the Xavier variants derive their scale from the fans.
    """

    kind: InitKind = InitKind.XAVIER_NORMAL
    mean: float = 0.0
    std: float = 0.05
    low: float = -0.05
    high: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.low > self.high:
            raise ValueError("uniform bounds must satisfy low <= high")

    @classmethod
    def parse(cls, text: str) -> "InitStrategy":
        """Parse ``kind[:a,b]``, e.g. ``normal:0,1`` or ``uniform:-0.1,0.1``."""
        kind, _, params = text.partition(":")
        kind = InitKind(kind.strip().lower().replace("-", "_"))
        if not params:
            return cls(kind)
        a, b = (float(v) for v in params.split(","))
        if kind is InitKind.NORMAL:
            return cls(kind, mean=a, std=b)
        if kind is InitKind.UNIFORM:
            return cls(kind, low=a, high=b)
        raise ValueError(f"{kind.value} takes no parameters")

    def label(self) -> str:
        if self.kind is InitKind.NORMAL:
            return f"normal({self.mean:g},{self.std:g})"
        if self.kind is InitKind.UNIFORM:
            return f"uniform({self.low:g},{self.high:g})"
        return self.kind.value


def fans(shape) -> tuple[int, int]:
    """(fan_in, fan_out) of a conv filter ``out x in x k x k`` or linear ``out x in``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise ValueError(f"cannot compute fans for shape {shape}")
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def init_weights(shape, strategy: InitStrategy, rng: RngStream) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"weight shape must be non-empty with positive dims, got {shape}")
    gen = rng.generator()
    kind = strategy.kind
    if kind is InitKind.NORMAL:
        return gen.normal(strategy.mean, strategy.std, size=shape)
    if kind is InitKind.UNIFORM:
        return gen.uniform(strategy.low, strategy.high, size=shape)
    fan_in, fan_out = fans(shape)
    if kind is InitKind.XAVIER_NORMAL:
        return gen.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return gen.uniform(-bound, bound, size=shape)


def sample_uniform_perturbation(shape, epsilon: float, rng: RngStream | np.random.Generator) -> np.ndarray:
    """i.i.d. draws from U[-epsilon, epsilon]."""
    if not epsilon >= 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    shape = tuple(int(s) for s in shape)
    if epsilon == 0:
        return np.zeros(shape, dtype=DTYPE)
    return gen.uniform(-epsilon, epsilon, size=shape)
