"""Latency and MACpS measurement for blocks and raw depthwise kernels.

Timing methodology: a monotonic nanosecond clock around each call, a fixed
warmup that is never reported, `measure_iters` timed calls per repeat, and
the reported latency is the median of the per-repeat medians. Throughput
is derived, never measured separately: MACpS in MMACs/ms equals
(macs / 1e6) / median_ms by construction. Batch size is pinned to 1.

Sweeps walk a small grid (variant-major, channels innermost) and emit one
CSV row per point; grid points that violate divisibility constraints
become skipped rows instead of crashes.
"""

from __future__ import annotations

import csv
import json
import statistics
import sys
import time
from dataclasses import dataclass
from typing import Callable, Iterator, TextIO

import numpy as np

from .blocks import BlockSpec, block_macs, build_block, parse_variant
from .kernels import ConvSpec, conv2d_fast, init_conv_weights, same_padding
from .macs import conv_macs
from .tensor import Shape4, derive_seed, random_uniform

CSV_COLUMNS = (
    "subject_id",
    "variant",
    "channels",
    "resolution",
    "kernel",
    "groups",
    "macs",
    "latency_median_ms",
    "latency_mean_ms",
    "latency_stddev_ms",
    "macps_mmacs_per_ms",
    "skipped",
    "skip_reason",
)

# Pseudo-variant for benchmarking a bare depthwise convolution.
DEPTHWISE_SUBJECT = "DWConv"


@dataclass(frozen=True)
class BenchConfig:
    """Measurement parameters; batch is pinned to 1."""

    warmup_iters: int = 20
    measure_iters: int = 100
    repeats: int = 5
    threads: int = 1
    batch: int = 1

    def __post_init__(self) -> None:
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0, got {self.warmup_iters}")
        if self.measure_iters < 10:
            raise ValueError(
                f"measure_iters must be >= 10, got {self.measure_iters}"
            )
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.batch != 1:
            raise ValueError(f"batch is pinned to 1, got {self.batch}")


@dataclass
class TimingStats:
    median_ms: float
    mean_ms: float
    min_ms: float
    stddev_ms: float
    timer_warning: bool


_timer_resolution_cache: float | None = None


def timer_resolution_ns() -> float:
    """Smallest positive step observed on the monotonic clock."""
    global _timer_resolution_cache
    if _timer_resolution_cache is None:
        best = float("inf")
        for _ in range(2000):
            a = time.perf_counter_ns()
            b = time.perf_counter_ns()
            if b > a:
                best = min(best, float(b - a))
        _timer_resolution_cache = best if best != float("inf") else 1.0
    return _timer_resolution_cache


def machine_stability(seconds: float = 6.0, buckets: int = 8) -> float:
    """Timing spread of fixed work across consecutive buckets.

    Times the same matmul over `buckets` back-to-back windows and returns
    (max - min) / min over the per-bucket median latencies. An idle machine
    with a steady clock stays under a couple of percent; larger values mean
    the effective CPU speed is moving (frequency scaling, co-tenants,
    thermal limits) and latency comparisons across runs are untrustworthy.
    """
    if buckets < 2:
        raise ValueError(f"buckets must be >= 2, got {buckets}")
    if seconds <= 0:
        raise ValueError(f"seconds must be > 0, got {seconds}")
    rng = np.random.default_rng(0)
    a = rng.standard_normal((256, 2304)).astype(np.float32)
    b = rng.standard_normal((2304, 196)).astype(np.float32)
    a @ b  # first call pays one-off setup costs
    t0 = time.perf_counter_ns()
    a @ b
    per_call_s = max(time.perf_counter_ns() - t0, 1) / 1e9
    per_bucket = max(3, int(seconds / buckets / per_call_s))
    medians: list[float] = []
    for _ in range(buckets):
        times: list[int] = []
        for _ in range(per_bucket):
            c0 = time.perf_counter_ns()
            a @ b
            c1 = time.perf_counter_ns()
            times.append(c1 - c0)
        medians.append(statistics.median(times))
    return (max(medians) - min(medians)) / min(medians)


def time_subject(fn: Callable[[], object], config: BenchConfig) -> TimingStats:
    """Measure one callable; warmups excluded, median of repeat medians."""
    for _ in range(config.warmup_iters):
        fn()
    pooled: list[int] = []
    repeat_medians: list[float] = []
    for _ in range(config.repeats):
        times: list[int] = []
        for _ in range(config.measure_iters):
            t0 = time.perf_counter_ns()
            fn()
            t1 = time.perf_counter_ns()
            times.append(t1 - t0)
        repeat_medians.append(statistics.median(times))
        pooled.extend(times)
    median_ns = statistics.median(repeat_medians)
    stats = TimingStats(
        median_ms=median_ns / 1e6,
        mean_ms=statistics.fmean(pooled) / 1e6,
        min_ms=min(pooled) / 1e6,
        stddev_ms=(statistics.stdev(pooled) if len(pooled) > 1 else 0.0) / 1e6,
        timer_warning=timer_resolution_ns() > 0.01 * median_ns,
    )
    return stats


@dataclass
class BenchResult:
    subject_id: str
    variant: str
    channels: int
    resolution: int
    kernel: int
    groups: int
    macs: int
    latency_median_ms: float | None = None
    latency_mean_ms: float | None = None
    latency_stddev_ms: float | None = None
    latency_min_ms: float | None = None
    macps_mmacs_per_ms: float | None = None
    timer_warning: bool = False
    skipped: bool = False
    skip_reason: str = ""

    def csv_row(self) -> dict[str, str]:
        def num(v: float | None) -> str:
            # repr is the shortest digit string that parses back exactly,
            # so write -> read -> write is byte-stable.
            return "" if v is None else repr(float(v))

        return {
            "subject_id": self.subject_id,
            "variant": self.variant,
            "channels": str(self.channels),
            "resolution": str(self.resolution),
            "kernel": str(self.kernel),
            "groups": str(self.groups),
            "macs": str(self.macs),
            "latency_median_ms": num(self.latency_median_ms),
            "latency_mean_ms": num(self.latency_mean_ms),
            "latency_stddev_ms": num(self.latency_stddev_ms),
            "macps_mmacs_per_ms": num(self.macps_mmacs_per_ms),
            "skipped": "true" if self.skipped else "false",
            "skip_reason": self.skip_reason,
        }


@dataclass(frozen=True)
class SweepGrid:
    """Benchmark grid axes; points iterate variant-major, channels last."""

    variants: tuple[str, ...]
    channels: tuple[int, ...]
    resolutions: tuple[int, ...]
    kernels: tuple[int, ...] = (3,)
    groups: tuple[int, ...] = (2,)
    expansion: int = 4

    def __post_init__(self) -> None:
        if not self.variants or not self.channels or not self.resolutions:
            raise ValueError("grid needs at least one variant/channel/resolution")
        if not self.kernels or not self.groups:
            raise ValueError("grid needs at least one kernel and group value")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")

    def points(self) -> Iterator[dict]:
        for variant in self.variants:
            grouped = variant not in (DEPTHWISE_SUBJECT,) and parse_variant(
                variant
            ).grouped
            group_values = self.groups if grouped else (1,)
            for resolution in self.resolutions:
                for kernel in self.kernels:
                    for groups in group_values:
                        for channels in self.channels:
                            yield {
                                "variant": variant,
                                "channels": channels,
                                "resolution": resolution,
                                "kernel": kernel,
                                "groups": groups,
                                "expansion": self.expansion,
                            }

    def num_points(self) -> int:
        return sum(1 for _ in self.points())


def grid_from_dict(payload: dict) -> SweepGrid:
    known = {"variants", "channels", "resolutions", "kernels", "groups", "expansion"}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown grid fields: {sorted(unknown)}")
    try:
        return SweepGrid(
            variants=tuple(payload["variants"]),
            channels=tuple(int(c) for c in payload["channels"]),
            resolutions=tuple(int(r) for r in payload["resolutions"]),
            kernels=tuple(int(k) for k in payload.get("kernels", [3])),
            groups=tuple(int(g) for g in payload.get("groups", [2])),
            expansion=int(payload.get("expansion", 4)),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed grid payload: {exc}") from exc


def load_grid(path: str) -> SweepGrid:
    with open(path, "r", encoding="utf-8") as fh:
        return grid_from_dict(json.load(fh))


def subject_id(point: dict) -> str:
    return (
        f"{point['variant']}_c{point['channels']}_r{point['resolution']}"
        f"_k{point['kernel']}_g{point['groups']}"
    )


def _depthwise_closure(point: dict, config: BenchConfig, seed: int):
    channels = point["channels"]
    resolution = point["resolution"]
    kernel = point["kernel"]
    pad = same_padding(kernel, kernel, 1, resolution, resolution)
    spec = ConvSpec(
        c_in=channels, c_out=channels, kh=kernel, kw=kernel, stride=1,
        pad=pad, groups=channels,
    )
    weights = init_conv_weights(spec, derive_seed(seed, 1))
    x = random_uniform(
        Shape4(config.batch, channels, resolution, resolution), derive_seed(seed, 0)
    )
    oh, ow = spec.out_dims(resolution, resolution)
    macs = config.batch * conv_macs(
        kernel, kernel, channels, channels, oh, ow, channels
    )
    threads = config.threads

    def fn() -> None:
        conv2d_fast(x, weights, spec, threads=threads)

    return fn, macs, channels  # groups column carries the channel count


def _block_closure(point: dict, config: BenchConfig, seed: int):
    spec = BlockSpec(
        variant=parse_variant(point["variant"]),
        c_in=point["channels"],
        c_out=point["channels"],
        expansion=point["expansion"],
        kh=point["kernel"],
        kw=point["kernel"],
        stride=1,
        groups=point["groups"],
    )
    block = build_block(spec, derive_seed(seed, 1))
    x = random_uniform(
        Shape4(config.batch, spec.c_in, point["resolution"], point["resolution"]),
        derive_seed(seed, 0),
    )
    macs = config.batch * block_macs(spec, point["resolution"], point["resolution"])
    threads = config.threads

    def fn() -> None:
        block.forward(x, threads=threads)

    return fn, macs, spec.first_conv_groups


def bench_subject(point: dict, config: BenchConfig, seed: int = 0) -> BenchResult:
    """Measure one grid point; divisibility violations become skipped rows."""
    sid = subject_id(point)
    try:
        if point["variant"] == DEPTHWISE_SUBJECT:
            fn, macs, groups_used = _depthwise_closure(point, config, seed)
        else:
            fn, macs, groups_used = _block_closure(point, config, seed)
    except ValueError as exc:
        return BenchResult(
            subject_id=sid,
            variant=point["variant"],
            channels=point["channels"],
            resolution=point["resolution"],
            kernel=point["kernel"],
            groups=point["groups"],
            macs=0,
            skipped=True,
            skip_reason=str(exc),
        )
    stats = time_subject(fn, config)
    return BenchResult(
        subject_id=sid,
        variant=point["variant"],
        channels=point["channels"],
        resolution=point["resolution"],
        kernel=point["kernel"],
        groups=groups_used,
        macs=macs,
        latency_median_ms=stats.median_ms,
        latency_mean_ms=stats.mean_ms,
        latency_stddev_ms=stats.stddev_ms,
        latency_min_ms=stats.min_ms,
        macps_mmacs_per_ms=(macs / 1e6) / stats.median_ms,
        timer_warning=stats.timer_warning,
    )


def bench_block(
    spec: BlockSpec, resolution: int, config: BenchConfig, seed: int = 0
) -> BenchResult:
    """Measure one explicit block spec at a square resolution."""
    point = {
        "variant": spec.variant.value,
        "channels": spec.c_in,
        "resolution": resolution,
        "kernel": spec.kh,
        "groups": spec.groups,
        "expansion": spec.expansion,
    }
    return bench_subject(point, config, seed)


def run_sweep(
    grid: SweepGrid,
    config: BenchConfig,
    seed: int = 0,
    progress: TextIO | None = None,
) -> list[BenchResult]:
    """Measure every grid point in stable order, reporting progress."""
    stream = sys.stderr if progress is None else progress
    total = grid.num_points()
    results: list[BenchResult] = []
    for index, point in enumerate(grid.points()):
        result = bench_subject(point, config, derive_seed(seed, index))
        results.append(result)
        if result.skipped:
            note = f"skipped ({result.skip_reason})"
        else:
            note = (
                f"{result.latency_median_ms:.4f} ms, "
                f"{result.macps_mmacs_per_ms:.1f} MMACs/ms"
            )
        print(f"[{index + 1}/{total}] {result.subject_id}: {note}", file=stream)
        stream.flush()
    return results


def write_csv(results: list[BenchResult], dest: "str | TextIO") -> None:
    def emit(fh: TextIO) -> None:
        writer = csv.DictWriter(fh, fieldnames=list(CSV_COLUMNS))
        writer.writeheader()
        for result in results:
            writer.writerow(result.csv_row())

    if isinstance(dest, str):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            emit(fh)
    else:
        emit(dest)


def read_csv(src: "str | TextIO") -> list[BenchResult]:
    def parse(fh: TextIO) -> list[BenchResult]:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != CSV_COLUMNS:
            raise ValueError(
                f"unexpected CSV header {reader.fieldnames}, want {list(CSV_COLUMNS)}"
            )
        rows: list[BenchResult] = []
        for raw in reader:
            def num(key: str) -> float | None:
                text = raw[key].strip()
                return float(text) if text else None

            rows.append(
                BenchResult(
                    subject_id=raw["subject_id"],
                    variant=raw["variant"],
                    channels=int(raw["channels"]),
                    resolution=int(raw["resolution"]),
                    kernel=int(raw["kernel"]),
                    groups=int(raw["groups"]),
                    macs=int(raw["macs"]),
                    latency_median_ms=num("latency_median_ms"),
                    latency_mean_ms=num("latency_mean_ms"),
                    latency_stddev_ms=num("latency_stddev_ms"),
                    macps_mmacs_per_ms=num("macps_mmacs_per_ms"),
                    skipped=raw["skipped"].strip().lower() == "true",
                    skip_reason=raw["skip_reason"],
                )
            )
        return rows

    if isinstance(src, str):
        with open(src, "r", newline="", encoding="utf-8") as fh:
            return parse(fh)
    return parse(src)


def group_delta(grouped_avg: float, ungrouped_avg: float) -> float:
    """Percent MACpS change of the grouped variant over the ungrouped."""
    if ungrouped_avg <= 0:
        raise ValueError(f"ungrouped average must be > 0, got {ungrouped_avg}")
    return 100.0 * (grouped_avg - ungrouped_avg) / ungrouped_avg


def format_delta(pct: float) -> str:
    """Integer display form, magnitude truncated, sign always shown."""
    sign = "-" if pct < 0 else "+"
    return f"{sign}{int(abs(pct))}%"
