"""Command-line entry point: ``convshield <subcommand> [flags]``.

Exit status is 0 on success, 2 on usage errors (bad flags, unknown preset,
malformed arch JSON, out-of-range numbers) and 1 on other runtime failures.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path


from . import analysis, bounds, experiments, presets
from .nn import ArchSpec, Conv, GlobalPool, Linear, PoolKind, init_arch_weights, layer_shapes, layer_to_dict, \
    load_arch, prepend_upsample, with_head
from .reports import csv_text, json_text
from .tensor import InitStrategy, RngStream


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    h, _, w = text.lower().partition("x")
    try:
        size = (int(h), int(w or h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}; use N or HxW") from None
    if min(size) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return size


def _sizes(text: str):
    return [_size(t) for t in text.split(",") if t.strip()]


def _floats(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _strides(text: str):
    try:
        return analysis.parse_strides(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pools(text: str):
    try:
        return [PoolKind.parse(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad pooling list {text!r}") from None


def _init(text: str):
    try:
        return InitStrategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_arch(p, default_preset=None):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", default=None,
                   help=f"one of {', '.join(sorted(presets.BASELINE_STRIDES))}"
                        + (f" (default {default_preset})" if default_preset else ""))
    g.add_argument("--arch", type=Path, help="architecture JSON file")
    p.add_argument("--strides", type=_strides, help="stage stride config, e.g. 1,1,2,2 or 1-1-2-2")
    p.set_defaults(default_preset=default_preset)


def _add_output(p):
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", type=Path, help="write the report here instead of stdout")


def _load_arch(args) -> ArchSpec:
    if args.arch is not None:
        try:
            arch = load_arch(args.arch)
        except OSError as exc:
            raise UsageError(f"cannot read {args.arch}: {exc}") from None
        except (ValueError, TypeError) as exc:
            raise UsageError(f"malformed arch JSON {args.arch}: {exc}") from None
    else:
        name = args.preset or args.default_preset
        if name is None:
            raise UsageError("give --preset or --arch")
        try:
            arch = presets.preset(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.strides is not None:
        try:
            arch = analysis.rewrite_strides(arch, args.strides)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return arch


def _emit(args, doc, csv_body: str):
    text = json_text(doc) if args.format == "json" else csv_body
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)


def _in_channels(arch: ArchSpec) -> int:
    return next((l.in_channels for l in arch.layers if isinstance(l, Conv)), 3)


# ---------------------------------------------------------------------------
# subcommands


def cmd_dims(args):
    arch = _load_arch(args)
    shape = (_in_channels(arch), *args.input)
    shapes = layer_shapes(arch, shape)
    rows = []
    pre_pool = list(shape)
    for i, (layer, s) in enumerate(zip(arch.layers, shapes)):
        rows.append({"index": i, "type": layer_to_dict(layer)["type"], "shape": list(s)})
        if isinstance(layer, (GlobalPool, Linear)):
            break
        pre_pool = list(s)
    for i in range(len(rows), len(shapes)):
        rows.append({"index": i, "type": layer_to_dict(arch.layers[i])["type"], "shape": list(shapes[i])})
    doc = {"input": list(shape), "stride_config": analysis.format_strides(arch.stride_config),
           "layers": rows, "final_feature_map": pre_pool}
    body = csv_text(["index", "type", "shape"], [[r["index"], r["type"], "x".join(map(str, r["shape"]))]
                                                 for r in rows])
    _emit(args, doc, body)


def cmd_rf(args):
    report = analysis.receptive_field(_load_arch(args), args.input)
    _emit(args, report.to_dict(), report.to_csv())


def cmd_cost(args):
    arch = _load_arch(args)
    if args.upsample > 1:
        arch = prepend_upsample(arch, args.mode, args.upsample)
    report = analysis.cost(arch, args.input)
    _emit(args, report.to_dict(), report.to_csv())


def cmd_rewrite(args):
    if args.strides is None:
        raise UsageError("rewrite needs --strides")
    arch = _load_arch(args)
    text = arch.to_json() + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)


def cmd_redundancy(args):
    try:
        prof = analysis.redundancy_profile(args.scale, args.kernel, args.len)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = [[i + 1, ";".join(map(str, g))] for i, g in enumerate(prof.duplicate_groups)]
    body = (f"# apparent_dims={prof.apparent_dims} distinct_dims={prof.distinct_dims}\n"
            + csv_text(["group", "positions"], rows))
    _emit(args, prof.to_dict(), body)


def cmd_bound(args):
    if (args.p is None) == (args.gamma is None):
        raise UsageError("give exactly one of --p or --gamma")
    try:
        query = bounds.BoundQuery(args.height, args.width, args.a, args.b, args.pool,
                                  gamma=args.gamma, p=args.p)
        rec = query.to_record()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    header = ["pooling", "H", "W", "a", "b", "gamma", "p", "saturated"]
    _emit(args, rec, csv_text(header, [[rec[k] for k in header]]))


def cmd_simulate(args):
    arch = _load_arch(args)
    try:
        cfg = experiments.ExperimentConfig(
            arch, init=args.init, activation=args.activation, epsilon=args.epsilon,
            trials=args.trials, base_seed=args.seed, input_sizes=args.sizes, pooling=args.pool,
            base_input=args.base_input, threads=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = experiments.run_disturbance(cfg)
    _emit(args, report.to_dict(), report.to_csv())


def _random_inputs(count, shape, seed, stream):
    gen = RngStream(seed, stream).generator()
    return [gen.uniform(0.0, 1.0, size=shape) for _ in range(count)]


def cmd_invariance(args):
    arch = _load_arch(args)
    if not isinstance(arch.layers[-1], Linear):
        arch = with_head(arch, args.classes)
    weights = init_arch_weights(arch, args.init, args.seed)
    shape = (_in_channels(arch), *args.input)
    layer_shapes(arch, shape)
    inputs = _random_inputs(args.inputs, shape, args.seed, 1 << 60)
    report = experiments.prediction_invariance(arch, weights, inputs, args.epsilons, args.trials,
                                               args.seed, threads=args.threads)
    _emit(args, report.to_dict(), report.to_csv())


def cmd_lipschitz(args):
    arch = _load_arch(args)
    weights = init_arch_weights(arch, args.init, args.seed)
    shape = (_in_channels(arch), *args.input)
    layer_shapes(arch, shape)
    probes = _random_inputs(args.probes, shape, args.seed, 1 << 60)
    est = experiments.lipschitz_lower_bound(arch, weights, probes, args.pairs, args.seed)
    _emit(args, est.to_dict(), csv_text(["lower_bound", "pair_i", "pair_j", "pairs_used"],
                                        [[est.lower_bound, *est.argmax_pair, est.pairs_used]]))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dims", help="feature-map shape after every layer")
    _add_arch(p, "resnet18")
    p.add_argument("--input", type=_size, default=(32, 32))
    _add_output(p)
    p.set_defaults(func=cmd_dims)

    p = sub.add_parser("rf", help="receptive field per conv layer")
    _add_arch(p, "resnet18")
    p.add_argument("--input", type=_size, default=(32, 32))
    _add_output(p)
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("cost", help="flops / memory / parameters per layer")
    _add_arch(p, "resnet18")
    p.add_argument("--input", type=_size, default=(32, 32))
    p.add_argument("--upsample", type=int, default=1, help="prepend an input upsampling by this factor")
    p.add_argument("--mode", choices=("nearest", "bilinear"), default="nearest")
    _add_output(p)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("rewrite", help="emit the arch JSON with new stage strides")
    _add_arch(p, "resnet18")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("redundancy", help="duplicate outputs after nearest upsampling (1-D)")
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--kernel", type=int, required=True)
    p.add_argument("--len", type=int, required=True)
    _add_output(p)
    p.set_defaults(func=cmd_redundancy)

    p = sub.add_parser("bound", help="pooled-disturbance tail bound or minimal gamma")
    p.add_argument("--pool", type=PoolKind.parse, required=True, help="avg or max")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--a", type=float, required=True)
    p.add_argument("--b", type=float, required=True)
    p.add_argument("--p", type=float)
    p.add_argument("--gamma", type=float)
    _add_output(p)
    p.set_defaults(func=cmd_bound)

    threads = experiments.default_threads()

    p = sub.add_parser("simulate", help="Monte Carlo disturbance propagation")
    _add_arch(p, "toycnn")
    p.add_argument("--init", type=_init, default=InitStrategy(),
                   help="normal[:mean,std] | uniform[:low,high] | xavier_normal | xavier_uniform")
    p.add_argument("--activation", choices=("none", "relu"), default=None,
                   help="override activations after every conv")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", type=_sizes, default=[(16, 16), (32, 32), (64, 64)])
    p.add_argument("--pool", type=_pools, default=[PoolKind.AVG, PoolKind.MAX])
    p.add_argument("--base-input", choices=experiments.BASE_INPUTS, default="uniform")
    p.add_argument("--threads", type=int, default=threads)
    _add_output(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("invariance", help="fraction of unchanged predictions under noise")
    _add_arch(p, "toycnn")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--init", type=_init, default=InitStrategy())
    p.add_argument("--input", type=_size, default=(32, 32))
    p.add_argument("--inputs", type=int, default=10, help="number of random base inputs")
    p.add_argument("--epsilons", type=_floats, default=[0, 2 / 255, 4 / 255, 6 / 255, 8 / 255, 10 / 255])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=threads)
    _add_output(p)
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("lipschitz", help="empirical lower bound on the l-inf Lipschitz constant")
    _add_arch(p, "toycnn")
    p.add_argument("--init", type=_init, default=InitStrategy())
    p.add_argument("--input", type=_size, default=(32, 32))
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--pairs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _add_output(p)
    p.set_defaults(func=cmd_lipschitz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"convshield {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"convshield {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
