"""Command-line interface for MAC accounting, benchmarking, and reports.

Exit codes: 0 on success, 1 when a verification command finds a real
mismatch (check-oracle), 2 for usage errors such as unknown variants,
broken divisibility, or missing files.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import arch, bench, blocks, kernels, macs, report
from .tensor import Shape4, random_uniform

MODEL_VARIANTS = ("B0", "B1", "B2", "B3")


def _add_common_bench_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--warmup", type=int, default=20, help="warmup iterations")
    parser.add_argument(
        "--iters", type=int, default=100, help="timed iterations per repeat"
    )
    parser.add_argument("--repeats", type=int, default=5, help="measurement repeats")
    parser.add_argument("--threads", type=int, default=1, help="kernel threads")
    parser.add_argument("--seed", type=int, default=0, help="input/weight seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpubone",
        description=(
            "CPU convolution micro-kernels, exact MAC accounting, and a "
            "MACpS benchmark harness for grouped/fused inverted-bottleneck "
            "blocks and the CPUBone backbones."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser(
        "macs", formatter_class=fmt,
        help="exact MAC counts for a model or a single block",
    )
    p.add_argument(
        "--variant", required=True,
        help="model (B0..B3) or block variant (MBConv, GrMBConv, FuMBConv, "
             "GrFuMBConv)",
    )
    p.add_argument("--res", "--resolution", dest="resolution", type=int,
                   default=None, help="input resolution (default 224 for models, "
                   "required for blocks)")
    p.add_argument("--c", "--channels", dest="channels", type=int, default=None,
                   help="block channel count")
    p.add_argument("--k", "--kernel", dest="kernel", type=int, default=3,
                   help="block kernel size")
    p.add_argument("--g", "--groups", dest="groups", type=int, default=2,
                   help="first-conv groups for grouped variants")
    p.add_argument("--e", "--expansion", dest="expansion", type=int, default=4,
                   help="block expansion factor")
    p.add_argument("--per-layer", action="store_true", help="print each layer")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser(
        "sweep", formatter_class=fmt, help="run a benchmark grid and write CSV"
    )
    p.add_argument("--grid", required=True,
                   help="shipped grid name or a JSON grid file")
    p.add_argument("--out", required=True, help="output CSV path ('-' for stdout)")
    _add_common_bench_args(p)

    p = sub.add_parser(
        "build", formatter_class=fmt,
        help="build a model and print its layer summary",
    )
    p.add_argument("--variant", required=True, help="model variant (B0..B3)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--groups", type=int, default=None,
                   help="override first-conv groups everywhere")
    p.add_argument("--plain-mbconv", action="store_true",
                   help="revert all blocks to plain MBConv")
    p.add_argument("--kernel3", action="store_true",
                   help="use 3x3 kernels in every stage")
    p.add_argument("--out", default=None, help="write the model spec JSON here")
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser(
        "infer", formatter_class=fmt,
        help="run one forward pass on random input",
    )
    p.add_argument("--variant", default=None, help="model variant (B0..B3)")
    p.add_argument("--spec", default=None, help="model spec JSON file")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser(
        "check-oracle", formatter_class=fmt,
        help="randomized fast-vs-reference kernel verification",
    )
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels-max", type=int, default=64)

    p = sub.add_parser(
        "report", formatter_class=fmt, help="render result tables"
    )
    p.add_argument("--layout", required=True,
                   choices=[layout.value for layout in report.TableLayout])
    p.add_argument("--results", default=None, help="bench CSV to render")
    p.add_argument("--reference", default=None,
                   help="render a shipped reference table instead")
    p.add_argument("--device", default=None,
                   help="device filter for --reference")
    p.add_argument("--format", dest="fmt", default="markdown",
                   choices=["markdown", "csv"])
    p.add_argument("--resolution", type=int, default=224,
                   help="resolution for the model-macs layout")
    p.add_argument("--out", default=None, help="output path (default stdout)")

    p = sub.add_parser(
        "compare", formatter_class=fmt,
        help="compare measured results against shipped reference data",
    )
    p.add_argument("--results", required=True, help="bench CSV with measurements")
    p.add_argument("--reference", required=True, help="shipped reference name")
    p.add_argument("--device", default=None, help="device filter")
    p.add_argument("--out", default=None, help="output path (default stdout)")

    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _cmd_macs(args: argparse.Namespace) -> int:
    if args.variant in MODEL_VARIANTS:
        resolution = args.resolution if args.resolution is not None else 224
        spec = arch.cpubone_spec(args.variant)
        counts = macs.model_macs(spec, resolution, resolution)
        if args.json:
            payload = {
                "variant": args.variant,
                "resolution": resolution,
                "total": counts.total,
                "conv_subtotal": counts.conv_subtotal,
                "attention_subtotal": counts.attention_subtotal,
            }
            if args.per_layer:
                payload["layers"] = [
                    {"name": e.name, "kind": e.kind, "section": e.section,
                     "macs": e.macs}
                    for e in counts.layers
                ]
            print(json.dumps(payload, indent=2))
            return 0
        print(f"{args.variant} @ {resolution}x{resolution}")
        if args.per_layer:
            for entry in counts.layers:
                print(f"  {entry.name:<24} {entry.kind:<8} {entry.macs:>14}")
        print(f"conv subtotal:      {counts.conv_subtotal}")
        print(f"attention subtotal: {counts.attention_subtotal}")
        print(f"total:              {counts.total}")
        return 0
    variant = blocks.parse_variant(args.variant)
    if args.channels is None or args.resolution is None:
        raise ValueError("block MACs need --c/--channels and --res/--resolution")
    spec = blocks.BlockSpec(
        variant=variant,
        c_in=args.channels,
        c_out=args.channels,
        expansion=args.expansion,
        kh=args.kernel,
        kw=args.kernel,
        stride=1,
        groups=args.groups,
    )
    value = blocks.block_macs(spec, args.resolution, args.resolution)
    if args.json:
        print(json.dumps({
            "variant": variant.value, "channels": args.channels,
            "resolution": args.resolution, "kernel": args.kernel,
            "groups": spec.first_conv_groups, "expansion": args.expansion,
            "macs": value,
        }))
    else:
        print(value)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    grid = bench.load_grid(str(report.grid_path(args.grid)))
    config = bench.BenchConfig(
        warmup_iters=args.warmup,
        measure_iters=args.iters,
        repeats=args.repeats,
        threads=args.threads,
    )
    results = bench.run_sweep(grid, config, seed=args.seed)
    if args.out == "-":
        bench.write_csv(results, sys.stdout)
    else:
        bench.write_csv(results, args.out)
        print(f"wrote {len(results)} rows to {args.out}", file=sys.stderr)
    return 0


def _model_spec_from_args(args: argparse.Namespace) -> arch.ModelSpec:
    if getattr(args, "spec", None):
        with open(args.spec, "r", encoding="utf-8") as fh:
            return arch.spec_from_json(fh.read())
    if args.variant is None:
        raise ValueError("need --variant or --spec")
    spec = arch.cpubone_spec(args.variant)
    groups = getattr(args, "groups", None)
    plain = getattr(args, "plain_mbconv", False)
    kernel3 = getattr(args, "kernel3", False)
    if groups is not None or plain or kernel3:
        spec = arch.ablation_spec(
            spec, groups=groups, plain_mbconv=plain, kernel3_everywhere=kernel3
        )
    return spec


def _cmd_build(args: argparse.Namespace) -> int:
    spec = _model_spec_from_args(args)
    model = arch.build_model(spec, seed=args.seed)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(arch.spec_to_json(spec))
            fh.write("\n")
    if args.json:
        print(json.dumps({
            "variant": spec.variant,
            "stages": [
                {"channels": s.channels, "num_blocks": s.num_blocks,
                 "kind": s.kind, "kernel": s.kernel, "attention": s.attention}
                for s in spec.stages
            ],
            "groups": spec.groups,
            "layers": len(model.layers),
            "params": model.num_params(),
        }, indent=2))
        return 0
    print(f"{spec.variant}: {len(model.layers)} layers, "
          f"{model.num_params()} parameters")
    for stage_index, stage in enumerate(spec.stages):
        print(
            f"  stage {stage_index}: c={stage.channels} blocks={stage.num_blocks} "
            f"kind={stage.kind} kernel={stage.kernel}x{stage.kernel} "
            f"attention={'yes' if stage.attention else 'no'}"
        )
    if args.out:
        print(f"spec written to {args.out}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    spec = _model_spec_from_args(args)
    model = arch.build_model(spec, seed=args.seed)
    x = random_uniform(
        Shape4(1, 3, args.resolution, args.resolution), args.seed
    )
    t0 = time.perf_counter()
    logits = arch.forward_model(model, x, threads=args.threads)
    elapsed_ms = (time.perf_counter() - t0) * 1e3
    stats = {
        "variant": spec.variant,
        "resolution": args.resolution,
        "elapsed_ms": elapsed_ms,
        "logits_shape": list(logits.shape),
        "logits_mean": float(np.mean(logits)),
        "logits_std": float(np.std(logits)),
        "argmax": int(np.argmax(logits)),
        "finite": bool(np.all(np.isfinite(logits))),
    }
    if args.json:
        print(json.dumps(stats, indent=2))
        return 0
    print(f"{spec.variant} @ {args.resolution}x{args.resolution}: "
          f"forward {elapsed_ms:.1f} ms (threads {args.threads})")
    print(
        f"logits shape {tuple(logits.shape)}, mean {stats['logits_mean']:.4f}, "
        f"std {stats['logits_std']:.4f}, argmax {stats['argmax']}, "
        f"finite {stats['finite']}"
    )
    return 0


def _cmd_check_oracle(args: argparse.Namespace) -> int:
    result = kernels.run_oracle_check(
        cases=args.cases, seed=args.seed, channels_max=args.channels_max
    )
    if result.ok:
        print(
            f"ok: {len(result.cases)} cases, worst rel err "
            f"{result.worst_rel_err:.3g}"
        )
        return 0
    print(f"FAILED: {len(result.failures)}/{len(result.cases)} cases", file=sys.stderr)
    for case in result.failures[:5]:
        print(f"  {case.describe()}", file=sys.stderr)
    return 1


def _cmd_report(args: argparse.Namespace) -> int:
    layout = report.parse_layout(args.layout)
    if layout is report.TableLayout.MODEL_MACS:
        rows: list = report.model_macs_rows(resolution=args.resolution)
    elif args.reference is not None:
        rows = report.load_reference(args.reference, device=args.device)
    elif args.results is not None:
        rows = bench.read_csv(args.results)
    else:
        raise ValueError("report needs --results or --reference")
    _emit(report.render(rows, layout, args.fmt), args.out)
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    measured = bench.read_csv(args.results)
    reference = report.load_reference(args.reference, device=args.device)
    comparison = report.compare_to_reference(measured, reference)
    _emit(comparison.render_text(), args.out)
    return 0


_COMMANDS = {
    "macs": _cmd_macs,
    "sweep": _cmd_sweep,
    "build": _cmd_build,
    "infer": _cmd_infer,
    "check-oracle": _cmd_check_oracle,
    "report": _cmd_report,
    "compare": _cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
