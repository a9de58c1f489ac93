"""Monte Carlo perturbation experiments on randomly initialized CNNs.

Every trial ``t`` draws its perturbation from ``RngStream(base_seed, t)``
(one sub-stream per input size), so reports do not depend on how trials are
scheduled across worker threads. Trials are grouped into fixed blocks and
reassembled in trial order.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .nn import (Activation, ActivationKind, ArchSpec, Conv, Linear, PoolKind, ShapeError, forward,
                 global_pool, init_arch_weights, layer_shapes, set_activation)
from .tensor import DTYPE, InitStrategy, RngStream, linf_norm, sample_uniform_perturbation
from .reports import csv_text

BASE_INPUT_STREAM = 1 << 61
BLOCK_SIZE = 16
BASE_INPUTS = ("uniform", "normal", "zeros")


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("CONVSHIELD_THREADS", "1")))
    except ValueError:
        return 1


def _sizes(sizes) -> tuple[tuple[int, int], ...]:
    out = []
    for s in sizes:
        h, w = (s, s) if isinstance(s, int) else s
        out.append((int(h), int(w)))
    return tuple(out)


def _poolings(pooling) -> tuple[PoolKind, ...]:
    if isinstance(pooling, (str, PoolKind)):
        pooling = (pooling,)
    kinds = tuple(PoolKind.parse(p) for p in pooling)
    if not kinds:
        raise ValueError("need at least one pooling kind")
    return kinds


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings for :func:`run_disturbance`.

    ``arch`` is truncated at its first global pool; the poolings listed in
    ``pooling`` are then applied to the final feature map. ``activation``
    (``"identity"`` or ``"relu"``) replaces the arch's activations after every
    conv; ``None`` keeps them as declared.
    """

    arch: ArchSpec
    init: InitStrategy = field(default_factory=InitStrategy)
    activation: str | None = None
    epsilon: float = 0.1
    trials: int = 1000
    base_seed: int = 0
    input_sizes: tuple = ((32, 32),)
    pooling: tuple = (PoolKind.AVG,)
    base_input: str = "uniform"
    threads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_sizes", _sizes(self.input_sizes))
        object.__setattr__(self, "pooling", _poolings(self.pooling))
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.base_input not in BASE_INPUTS:
            raise ValueError(f"base_input must be one of {BASE_INPUTS}")
        if self.activation is not None:
            object.__setattr__(self, "activation", _activation_name(self.activation))

    def network(self) -> ArchSpec:
        arch = self.arch.feature_extractor()
        if self.activation is not None:
            arch = set_activation(arch, self.activation)
        return arch


def _activation_name(kind) -> str:
    kind = getattr(kind, "value", kind)
    return "identity" if kind in (None, "none", "identity") else ActivationKind(kind).value


def base_input(kind: str, shape, seed: int, size_index: int) -> np.ndarray:
    gen = RngStream(seed, BASE_INPUT_STREAM).generator(size_index)
    if kind == "uniform":
        return gen.uniform(0.0, 1.0, size=shape)
    if kind == "normal":
        return gen.standard_normal(size=shape)
    return np.zeros(shape, dtype=DTYPE)


# ---------------------------------------------------------------------------
# disturbance propagation


@dataclass(frozen=True)
class LayerStats:
    input_size: tuple[int, int]
    layer: int          # 1-based conv index
    median: float
    mean: float
    max: float
    a: float            # min d_ij seen over all trials
    b: float            # max d_ij seen over all trials


@dataclass
class DisturbanceReport:
    """Per-layer l-inf disturbance statistics and pooled disturbance samples.

    ``linf[size]`` is ``(trials, n_layers)``; ``pooled[pool][size]`` holds,
    per trial, the largest over channels of ``|P(g(x+delta)) - P(g(x))|`` and
    ``pooled_channels[pool][size]`` the per-channel values ``(trials, C)``.
    ``final_range[size]`` is the empirical ``(a, b)`` of the last feature map.
    """

    config: ExperimentConfig
    layer_stats: list[LayerStats]
    linf: dict
    pooled: dict
    pooled_channels: dict
    final_range: dict

    def stats(self, size, layer: int) -> LayerStats:
        size = _sizes([size])[0]
        for s in self.layer_stats:
            if s.input_size == size and s.layer == layer:
                return s
        raise KeyError((size, layer))

    def pooled_samples(self, pool, size) -> np.ndarray:
        return self.pooled[PoolKind.parse(pool)][_sizes([size])[0]]

    def pooled_median(self, pool, size) -> float:
        return float(np.median(self.pooled_samples(pool, size)))

    def to_dict(self) -> dict:
        c = self.config
        doc = {
            "seed": c.base_seed, "epsilon": c.epsilon, "trials": c.trials,
            "init": c.init.label(), "activation": c.activation or "as-declared",
            "base_input": c.base_input,
            "input_sizes": [list(s) for s in c.input_sizes],
            "layers": [{"input_size": list(s.input_size), "layer": s.layer, "median": s.median,
                        "mean": s.mean, "max": s.max, "a": s.a, "b": s.b} for s in self.layer_stats],
            "pooled": [],
        }
        for pool, per_size in self.pooled.items():
            for size, samples in per_size.items():
                a, b = self.final_range[size]
                doc["pooled"].append({
                    "pooling": pool.value, "input_size": list(size),
                    "median": float(np.median(samples)), "mean": float(np.mean(samples)),
                    "max": float(np.max(samples)), "a": a, "b": b,
                    "samples": [float(v) for v in samples],
                })
        return doc

    def csv_rows(self) -> list[list]:
        rows = []
        for s in self.layer_stats:
            size = f"{s.input_size[0]}x{s.input_size[1]}"
            for name in ("median", "mean", "max", "a", "b"):
                rows.append([size, f"conv{s.layer}", name, getattr(s, name)])
        for pool, per_size in self.pooled.items():
            for size, samples in per_size.items():
                label = f"{size[0]}x{size[1]}"
                a, b = self.final_range[size]
                for name, value in (("median", np.median(samples)), ("mean", np.mean(samples)),
                                    ("max", np.max(samples)), ("a", a), ("b", b)):
                    rows.append([label, f"pooled_{pool.value}", name, float(value)])
        return rows

    def to_csv(self) -> str:
        return csv_text(["input_size", "layer", "statistic", "value"], self.csv_rows())


def _probe_indices(arch: ArchSpec) -> list[int]:
    """Index of the last layer of each conv block (a conv plus its trailing activations)."""
    probes = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Conv):
            probes.append(i)
        elif isinstance(layer, Activation) and probes and probes[-1] == i - 1:
            probes[-1] = i
    return probes


def _final(x, trace):
    return trace[-1] if trace else x


def _run_block(arch, weights, x, ref_trace, probes, poolings, ref_pooled, epsilon, seed,
               size_index, start, stop):
    n_layers = len(probes)
    linf = np.zeros((stop - start, n_layers))
    lo = np.full(n_layers + 1, np.inf)
    hi = np.full(n_layers + 1, -np.inf)
    pooled = {p: [] for p in poolings}
    for row, t in enumerate(range(start, stop)):
        delta = sample_uniform_perturbation(x.shape, epsilon, RngStream(seed, t).generator(size_index))
        perturbed = x + delta
        _, trace = forward(arch, weights, perturbed, intermediates=True, conv_method="gemm")
        d = None
        for li, idx in enumerate(probes):
            d = trace[idx] - ref_trace[idx]
            dmin, dmax = d.min(), d.max()
            lo[li] = min(lo[li], dmin)
            hi[li] = max(hi[li], dmax)
            linf[row, li] = max(-dmin, dmax)
        final = _final(perturbed, trace)
        if not probes or probes[-1] != len(trace) - 1:
            d = final - _final(x, ref_trace)
        lo[-1] = min(lo[-1], d.min())
        hi[-1] = max(hi[-1], d.max())
        for p in poolings:
            pooled[p].append(np.abs(global_pool(final, p) - ref_pooled[p]))
    return linf, lo, hi, {p: np.array(v) for p, v in pooled.items()}


def run_disturbance(config: ExperimentConfig) -> DisturbanceReport:
    arch = config.network()
    weights = init_arch_weights(arch, config.init, config.base_seed)
    probes = _probe_indices(arch)
    in_channels = next((l.in_channels for l in arch.layers if isinstance(l, Conv)), 3)
    layer_stats, linf_all, final_range = [], {}, {}
    pooled_ch = {p: {} for p in config.pooling}
    with threadpool_limits(limits=1, user_api="blas"), \
            ThreadPoolExecutor(max_workers=config.threads) as pool_exec:
        for k, size in enumerate(config.input_sizes):
            shape = (in_channels, *size)
            try:
                shapes = layer_shapes(arch, shape)
            except ShapeError as exc:
                raise ShapeError(f"input size {size[0]}x{size[1]}: {exc}") from None
            if shapes and len(shapes[-1]) != 3:
                raise ShapeError("disturbance experiments need a spatial final feature map")
            x = base_input(config.base_input, shape, config.base_seed, k)
            _, ref_trace = forward(arch, weights, x, intermediates=True, conv_method="gemm")
            ref_pooled = {p: global_pool(_final(x, ref_trace), p) for p in config.pooling}
            starts = range(0, config.trials, BLOCK_SIZE)
            jobs = [pool_exec.submit(_run_block, arch, weights, x, ref_trace, probes, config.pooling,
                                     ref_pooled, config.epsilon, config.base_seed, k,
                                     s, min(s + BLOCK_SIZE, config.trials)) for s in starts]
            results = [j.result() for j in jobs]
            linf = np.concatenate([r[0] for r in results])
            lo = np.min([r[1] for r in results], axis=0)
            hi = np.max([r[2] for r in results], axis=0)
            for li in range(len(probes)):
                col = linf[:, li]
                layer_stats.append(LayerStats(size, li + 1, float(np.median(col)), float(col.mean()),
                                              float(col.max()), float(lo[li]), float(hi[li])))
            linf_all[size] = linf
            final_range[size] = (float(lo[-1]), float(hi[-1]))
            for p in config.pooling:
                pooled_ch[p][size] = np.concatenate([r[3][p] for r in results])
    pooled = {p: {s: v.max(axis=1) for s, v in per.items()} for p, per in pooled_ch.items()}
    return DisturbanceReport(config, layer_stats, linf_all, pooled, pooled_ch, final_range)


def run_init_sweep(base_config: ExperimentConfig, strategies: Sequence[InitStrategy],
                   activations: Iterable = ("identity",)) -> dict:
    """One report per (strategy, activation); all arms share perturbation streams."""
    from dataclasses import replace

    reports = {}
    for act in activations:
        act = _activation_name(act)
        for strategy in strategies:
            cfg = replace(base_config, init=strategy, activation=act)
            reports[(strategy.label(), act)] = run_disturbance(cfg)
    return reports


# ---------------------------------------------------------------------------
# prediction invariance


@dataclass
class InvarianceReport:
    epsilons: list[float]
    fractions: list[float]
    unchanged: list[int]
    total: int

    def to_dict(self) -> dict:
        return {"total_per_epsilon": self.total,
                "rows": [{"epsilon": e, "fraction_unchanged": f, "unchanged": u}
                         for e, f, u in zip(self.epsilons, self.fractions, self.unchanged)]}

    def to_csv(self) -> str:
        return csv_text(["epsilon", "fraction_unchanged", "unchanged", "total"],
                    [[e, f, u, self.total] for e, f, u in zip(self.epsilons, self.fractions, self.unchanged)])


def prediction_invariance(arch: ArchSpec, weights, inputs: Sequence, epsilons: Sequence[float],
                          trials: int, seed: int, threads: int = 1) -> InvarianceReport:
    """Fraction of perturbed inputs whose argmax prediction is unchanged.

    Ties resolve to the lowest class index. Trial ``t`` for epsilon ``e`` and
    input ``i`` uses sub-stream ``(e, i)`` of ``RngStream(seed, t)``.
    """
    if not arch.layers or not isinstance(arch.layers[-1], Linear):
        raise ValueError("prediction invariance needs an arch ending in a linear head")
    if not inputs:
        raise ValueError("need at least one input")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    inputs = [np.asarray(x, dtype=DTYPE) for x in inputs]
    clean = [int(np.argmax(forward(arch, weights, x, conv_method="gemm"))) for x in inputs]

    def count(e_idx: int, eps: float, i: int) -> int:
        hits = 0
        for t in range(trials):
            delta = sample_uniform_perturbation(inputs[i].shape, eps, RngStream(seed, t).generator(e_idx, i))
            pred = int(np.argmax(forward(arch, weights, inputs[i] + delta, conv_method="gemm")))
            hits += pred == clean[i]
        return hits

    unchanged = []
    with threadpool_limits(limits=1, user_api="blas"), ThreadPoolExecutor(max_workers=threads) as ex:
        for e_idx, eps in enumerate(epsilons):
            if eps < 0:
                raise ValueError("epsilons must be >= 0")
            jobs = [ex.submit(count, e_idx, eps, i) for i in range(len(inputs))]
            unchanged.append(sum(j.result() for j in jobs))
    total = trials * len(inputs)
    return InvarianceReport([float(e) for e in epsilons], [u / total for u in unchanged], unchanged, total)


# ---------------------------------------------------------------------------
# empirical Lipschitz constant


@dataclass
class LipschitzEstimate:
    lower_bound: float
    argmax_pair: tuple[int, int]
    inputs: tuple[np.ndarray, np.ndarray]
    pairs_used: int

    def to_dict(self) -> dict:
        return {"lower_bound": self.lower_bound, "argmax_pair": list(self.argmax_pair),
                "pairs_used": self.pairs_used}


def lipschitz_lower_bound(arch: ArchSpec, weights, probe_inputs: Sequence, pair_count: int,
                          seed: int) -> LipschitzEstimate:
    """Largest ``||f(x) - f(x')||_inf / ||x - x'||_inf`` over random probe pairs.

    Pairs are drawn uniformly (with replacement) from ``probe_inputs``;
    coincident pairs are skipped. Any such ratio is a lower bound on the
    l-inf Lipschitz constant of ``f``.
    """
    if pair_count < 1:
        raise ValueError("pair_count must be >= 1")
    probes = [np.asarray(x, dtype=DTYPE) for x in probe_inputs]
    if not probes:
        raise ValueError("need at least one probe input")
    outputs = [forward(arch, weights, x) for x in probes]
    gen = RngStream(seed, 0).generator()
    idx = gen.integers(0, len(probes), size=(pair_count, 2))
    best, best_pair, used = -1.0, None, 0
    for i, j in idx:
        gap = linf_norm(probes[i] - probes[j])
        if gap == 0:
            continue
        used += 1
        ratio = linf_norm(outputs[i] - outputs[j]) / gap
        if ratio > best:
            best, best_pair = ratio, (int(i), int(j))
    if best_pair is None:
        raise ValueError("every sampled pair was coincident")
    return LipschitzEstimate(best, best_pair, (probes[best_pair[0]], probes[best_pair[1]]), used)

