"""Tail bounds on the pooled feature disturbance.

For a feature disturbance map ``d`` of size H x W whose entries are
independent, zero-mean and supported on ``[a, b]``:

* average pooling: ``P(|mean d| >= gamma) <= 2 exp(-2 H W gamma^2 / (b - a)^2)``
  (Hoeffding);
* max pooling: ``P(|max d| >= gamma) <= (b - a) sqrt(ln sqrt(2 H W)) / gamma``
  (Hoeffding's lemma plus Markov).

Logarithms are natural. Probability outputs are clamped to 1 and flagged
as saturated when the raw bound is vacuous.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .nn import PoolKind


@dataclass(frozen=True)
class BoundResult:
    value: float
    saturated: bool = False


@dataclass(frozen=True)
class BoundQuery:
    H: int
    W: int
    a: float
    b: float
    pooling: PoolKind
    gamma: float | None = None
    p: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "pooling", PoolKind.parse(self.pooling))
        _check_dims(self.H, self.W, self.a, self.b)
        if (self.gamma is None) == (self.p is None):
            raise ValueError("give exactly one of gamma or p")

    def solve(self) -> BoundResult:
        """Tail probability if ``gamma`` was given, else the minimal gamma for ``p``."""
        avg = self.pooling is PoolKind.AVG
        if self.gamma is not None:
            fn = avg_pool_tail_bound if avg else max_pool_tail_bound
            return fn(self.H, self.W, self.a, self.b, self.gamma)
        fn = avg_pool_gamma_min if avg else max_pool_gamma_min
        return fn(self.H, self.W, self.a, self.b, self.p)

    def to_record(self) -> dict:
        """JSON-ready dict with the solved quantity filled in."""
        res = self.solve()
        rec = {"pooling": self.pooling.value, "H": self.H, "W": self.W, "a": self.a, "b": self.b,
               "gamma": self.gamma, "p": self.p, "saturated": res.saturated}
        rec["p" if self.gamma is not None else "gamma"] = res.value
        return rec


def _check_dims(H, W, a, b):
    if int(H) != H or int(W) != W or H < 1 or W < 1:
        raise ValueError(f"feature dims must be positive integers, got {H}x{W}")
    if not (math.isfinite(a) and math.isfinite(b)):
        raise ValueError("a and b must be finite")
    if a > b:
        raise ValueError(f"need a <= b, got a={a}, b={b}")


def _clamp(raw: float) -> BoundResult:
    if raw > 1.0:
        return BoundResult(1.0, True)
    return BoundResult(raw, False)


def avg_pool_tail_bound(H: int, W: int, a: float, b: float, gamma: float) -> BoundResult:
    _check_dims(H, W, a, b)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if a == b:
        return BoundResult(0.0)
    return _clamp(2.0 * math.exp(-2.0 * H * W * gamma**2 / (b - a) ** 2))


def avg_pool_gamma_min(H: int, W: int, a: float, b: float, p: float) -> BoundResult:
    """Smallest gamma whose average-pooling tail bound is at most ``p``."""
    _check_dims(H, W, a, b)
    if not p > 0:
        raise ValueError(f"p must be > 0, got {p}")
    if a == b or p >= 2.0:
        return BoundResult(0.0)
    return BoundResult((b - a) * math.sqrt(math.log(2.0 / p) / (2.0 * H * W)))


def _max_log_term(H: int, W: int) -> float:
    return math.sqrt(math.log(math.sqrt(2.0 * H * W)))


def max_pool_tail_bound(H: int, W: int, a: float, b: float, gamma: float) -> BoundResult:
    _check_dims(H, W, a, b)
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    if a == b:
        return BoundResult(0.0)
    return _clamp((b - a) * _max_log_term(H, W) / gamma)


def max_pool_gamma_min(H: int, W: int, a: float, b: float, p: float) -> BoundResult:
    """Smallest gamma whose max-pooling tail bound is at most ``p``."""
    _check_dims(H, W, a, b)
    if not 0 < p <= 1:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    if a == b:
        return BoundResult(0.0)
    return BoundResult((b - a) * _max_log_term(H, W) / p)


def empirical_tail(samples: Iterable[float], gamma: float) -> float:
    """Fraction of ``samples`` with ``|value| >= gamma``."""
    arr = np.abs(np.asarray(list(samples) if not isinstance(samples, np.ndarray) else samples,
                            dtype=np.float64))
    if arr.size == 0:
        raise ValueError("empirical_tail needs at least one sample")
    return float(np.count_nonzero(arr >= gamma)) / arr.size


def binomial_slack(p: float, n: int, sigmas: float = 3.0) -> float:
    """``sigmas`` standard errors of a binomial proportion ``p`` estimated from ``n`` draws."""
    return sigmas * math.sqrt(max(p * (1.0 - p), 0.0) / n)

