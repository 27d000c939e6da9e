"""Result tables, shipped reference measurements, and comparisons.

Rendering is pure and deterministic: the same rows produce byte-identical
output. MACpS cells print with one decimal; the Avg column is the
arithmetic mean over the channel axis of the unrounded values, and the
grouped rows annotate the percent delta against their ungrouped partner
(magnitude truncated to an integer, sign always shown). Within each
ungrouped/grouped or kernel pair the higher cell is bold; ties bold both.

The package ships published device measurements as static CSV assets for
side-by-side comparison. Ratios against them are informational only: they
were taken on different hardware than the local machine.
"""

from __future__ import annotations

import io
import os
import statistics
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from . import arch, macs
from .bench import (
    BenchResult,
    format_delta,
    group_delta,
    write_csv,
)

VARIANT_ORDER = ("MBConv", "GrMBConv", "FuMBConv", "GrFuMBConv")
VARIANT_PAIRS = (("MBConv", "GrMBConv"), ("FuMBConv", "GrFuMBConv"))

DATA_DIR_ENV = "CPUBONE_DATA_DIR"


class TableLayout(str, Enum):
    GROUPING = "grouping"
    DEPTHWISE_KERNEL = "depthwise-kernel"
    FUSED_KERNEL = "fused-kernel"
    MODEL_MACS = "model-macs"


def parse_layout(name: str) -> TableLayout:
    for layout in TableLayout:
        if layout.value == name:
            return layout
    raise ValueError(
        f"unknown layout {name!r}, expected one of "
        f"{[layout.value for layout in TableLayout]}"
    )


def data_dir() -> Path:
    override = os.environ.get(DATA_DIR_ENV)
    if override:
        return Path(override)
    return Path(__file__).parent / "data"


def grid_path(name: str) -> Path:
    direct = Path(name)
    if direct.exists():
        return direct
    candidate = data_dir() / "grids" / f"{name}.json"
    if candidate.exists():
        return candidate
    raise ValueError(
        f"no grid named {name!r}; shipped grids: {sorted(list_grids())}"
    )


def list_grids() -> list[str]:
    folder = data_dir() / "grids"
    if not folder.is_dir():
        return []
    return [p.stem for p in folder.glob("*.json")]


def list_references() -> list[str]:
    folder = data_dir() / "reference"
    if not folder.is_dir():
        return []
    return [p.stem for p in folder.glob("*.csv")]


def load_reference(name: str, device: str | None = None) -> list[dict]:
    """Rows of a shipped reference CSV, optionally filtered by device."""
    direct = Path(name)
    path = direct if direct.exists() else data_dir() / "reference" / f"{name}.csv"
    if not path.exists():
        raise ValueError(
            f"no reference named {name!r}; shipped: {sorted(list_references())}"
        )
    rows: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        header: list[str] | None = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if header is None:
                header = parts
                continue
            row: dict = dict(zip(header, parts))
            for key in ("channels", "resolution", "kernel", "groups"):
                if key in row and row[key] != "":
                    row[key] = int(row[key])
            if "macps_mmacs_per_ms" in row and row["macps_mmacs_per_ms"] != "":
                row["macps_mmacs_per_ms"] = float(row["macps_mmacs_per_ms"])
            if "macs_millions" in row and row["macs_millions"] != "":
                row["macs_millions"] = float(row["macs_millions"])
            if "params_millions" in row and row["params_millions"] != "":
                row["params_millions"] = float(row["params_millions"])
            rows.append(row)
    if device is not None:
        rows = [r for r in rows if r.get("device") == device]
        if not rows:
            raise ValueError(f"reference {name!r} has no rows for device {device!r}")
    return rows


def _norm(row: "BenchResult | dict") -> dict:
    if isinstance(row, BenchResult):
        return {
            "device": "measured",
            "variant": row.variant,
            "channels": row.channels,
            "resolution": row.resolution,
            "kernel": row.kernel,
            "groups": row.groups,
            "macps": row.macps_mmacs_per_ms,
            "macs": row.macs,
            "skipped": row.skipped,
        }
    return {
        "device": row.get("device", "reference"),
        "variant": row["variant"],
        "channels": row["channels"],
        "resolution": row["resolution"],
        "kernel": row.get("kernel", 3),
        "groups": row.get("groups", 1),
        "macps": row.get("macps_mmacs_per_ms"),
        "macs": row.get("macs", 0),
        "skipped": False,
    }


def fmt(value: float | None, decimals: int = 1) -> str:
    if value is None:
        return "--"
    return f"{value:.{decimals}f}"


def _mean(values: list[float]) -> float | None:
    return statistics.fmean(values) if values else None


def _markdown_table(headers: list[str], rows: list[list[str]]) -> list[str]:
    lines = ["| " + " | ".join(headers) + " |"]
    lines.append("|" + "|".join("---" for _ in headers) + "|")
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return lines


def _sections(cells: list[dict], keys: tuple[str, ...]) -> list[tuple[tuple, list[dict]]]:
    ordered: dict[tuple, list[dict]] = {}
    for cell in cells:
        key = tuple(cell[k] for k in keys)
        ordered.setdefault(key, []).append(cell)
    return sorted(ordered.items(), key=lambda item: tuple(str(v) for v in item[0]))


def _render_grouping(cells: list[dict]) -> str:
    out: list[str] = []
    for (device, resolution), section in _sections(cells, ("device", "resolution")):
        channels = sorted({c["channels"] for c in section})
        value: dict[tuple[str, int], float] = {}
        for cell in section:
            if cell["macps"] is not None:
                value.setdefault((cell["variant"], cell["channels"]), cell["macps"])
        variants = [v for v in VARIANT_ORDER if any(k[0] == v for k in value)]
        partner: dict[str, str] = {}
        for a, b in VARIANT_PAIRS:
            partner[a] = b
            partner[b] = a
        averages = {
            v: _mean([value[(v, c)] for c in channels if (v, c) in value])
            for v in variants
        }
        rows = []
        for variant in variants:
            row = [variant]
            for c in channels:
                v = value.get((variant, c))
                if v is None:
                    row.append("--")
                    continue
                other = value.get((partner.get(variant, ""), c))
                text = fmt(v)
                if other is not None and v >= other:
                    text = f"**{text}**"
                row.append(text)
            avg = averages.get(variant)
            avg_text = fmt(avg)
            mate = partner.get(variant)
            if (
                variant in ("GrMBConv", "GrFuMBConv")
                and avg is not None
                and mate in averages
                and averages[mate] is not None
            ):
                delta = format_delta(group_delta(avg, averages[mate]))
                avg_text = f"{avg_text} ({delta})"
            row.append(avg_text)
            rows.append(row)
        out.append(f"Grouping sweep, {device}, {resolution}x{resolution}")
        out.append("")
        headers = ["Variant"] + [str(c) for c in channels] + ["Avg."]
        out.extend(_markdown_table(headers, rows))
        out.append("")
    return "\n".join(out).rstrip() + "\n"


def _render_kernel_pairs(
    cells: list[dict], with_groups: bool
) -> str:
    out: list[str] = []
    for (device,), section in _sections(cells, ("device",)):
        channels = sorted({c["channels"] for c in section})
        kernels = sorted({c["kernel"] for c in section}, reverse=True)
        resolutions = sorted({c["resolution"] for c in section})
        group_vals = sorted({c["groups"] for c in section}) if with_groups else [None]
        value: dict[tuple, float] = {}
        for cell in section:
            if cell["macps"] is not None:
                key = (cell["groups"] if with_groups else None, cell["resolution"],
                       cell["kernel"], cell["channels"])
                value.setdefault(key, cell["macps"])
        rows = []
        for g in group_vals:
            for resolution in resolutions:
                for kernel in kernels:
                    row = []
                    if with_groups:
                        row.append(str(g))
                    row.append(f"{resolution}x{resolution}")
                    row.append(f"{kernel}x{kernel}")
                    found: list[float] = []
                    for c in channels:
                        v = value.get((g, resolution, kernel, c))
                        if v is None:
                            row.append("--")
                            continue
                        rivals = [
                            value[(g, resolution, k2, c)]
                            for k2 in kernels
                            if k2 != kernel and (g, resolution, k2, c) in value
                        ]
                        text = fmt(v)
                        if rivals and v >= max(rivals):
                            text = f"**{text}**"
                        row.append(text)
                        found.append(v)
                    row.append(fmt(_mean(found)))
                    rows.append(row)
        title = "Fused kernel sweep" if with_groups else "Depthwise kernel sweep"
        out.append(f"{title}, {device}")
        out.append("")
        headers = (["Groups"] if with_groups else []) + ["Resolution", "Kernel"]
        headers += [str(c) for c in channels] + ["Avg."]
        out.extend(_markdown_table(headers, rows))
        out.append("")
    return "\n".join(out).rstrip() + "\n"


def model_macs_rows(
    variants: tuple[str, ...] = ("B0", "B1", "B2", "B3"), resolution: int = 224
) -> list[dict]:
    """Computed model MAC totals next to the published reference totals."""
    try:
        reference = {
            r["variant"]: r for r in load_reference("model_macs")
        }
    except ValueError:
        reference = {}
    rows = []
    for variant in variants:
        spec = arch.cpubone_spec(variant)
        counts = macs.model_macs(spec, resolution, resolution)
        ref = reference.get(variant)
        ref_macs = ref["macs_millions"] if ref else None
        rows.append(
            {
                "variant": variant,
                "resolution": resolution,
                "macs_total": counts.total,
                "conv_subtotal": counts.conv_subtotal,
                "attention_subtotal": counts.attention_subtotal,
                "reference_macs_m": ref_macs,
                "ratio": (counts.total / 1e6) / ref_macs if ref_macs else None,
            }
        )
    return rows


def _render_model_macs(rows: list[dict]) -> str:
    headers = [
        "Model", "MACs (M)", "Conv (M)", "Attention (M)",
        "Published (M)", "Ratio",
    ]
    body = []
    for row in rows:
        body.append(
            [
                row["variant"],
                fmt(row["macs_total"] / 1e6),
                fmt(row["conv_subtotal"] / 1e6),
                fmt(row["attention_subtotal"] / 1e6),
                fmt(row["reference_macs_m"]),
                fmt(row["ratio"], 3) if row["ratio"] is not None else "--",
            ]
        )
    lines = [f"Model MAC totals at {rows[0]['resolution']}x{rows[0]['resolution']}"
             if rows else "Model MAC totals"]
    lines.append("")
    lines.extend(_markdown_table(headers, body))
    return "\n".join(lines) + "\n"


def _csv_of_cells(cells: list[dict]) -> str:
    results = []
    for cell in cells:
        results.append(
            BenchResult(
                subject_id=(
                    f"{cell['variant']}_c{cell['channels']}"
                    f"_r{cell['resolution']}_k{cell['kernel']}_g{cell['groups']}"
                ),
                variant=cell["variant"],
                channels=cell["channels"],
                resolution=cell["resolution"],
                kernel=cell["kernel"],
                groups=cell["groups"],
                macs=cell["macs"],
                macps_mmacs_per_ms=cell["macps"],
                skipped=cell["skipped"],
            )
        )
    buf = io.StringIO()
    write_csv(results, buf)
    return buf.getvalue()


def _csv_of_model_rows(rows: list[dict]) -> str:
    results = []
    for row in rows:
        results.append(
            BenchResult(
                subject_id=f"{row['variant']}_r{row['resolution']}",
                variant=row["variant"],
                channels=0,
                resolution=row["resolution"],
                kernel=0,
                groups=0,
                macs=row["macs_total"],
            )
        )
    buf = io.StringIO()
    write_csv(results, buf)
    return buf.getvalue()


def render(
    rows: list,
    layout: "TableLayout | str",
    fmt_kind: str = "markdown",
) -> str:
    """Render rows under a layout to markdown or bench-schema CSV."""
    layout = parse_layout(layout) if isinstance(layout, str) else layout
    if fmt_kind not in ("markdown", "csv"):
        raise ValueError(f"format must be markdown or csv, got {fmt_kind!r}")
    if layout is TableLayout.MODEL_MACS:
        return (
            _render_model_macs(rows) if fmt_kind == "markdown"
            else _csv_of_model_rows(rows)
        )
    cells = [_norm(r) for r in rows]
    cells = [c for c in cells if not c["skipped"]]
    if fmt_kind == "csv":
        return _csv_of_cells(cells)
    if layout is TableLayout.GROUPING:
        return _render_grouping(cells)
    if layout is TableLayout.DEPTHWISE_KERNEL:
        return _render_kernel_pairs(cells, with_groups=False)
    return _render_kernel_pairs(cells, with_groups=True)


@dataclass
class CellComparison:
    variant: str
    channels: int
    resolution: int
    kernel: int
    measured: float
    reference: float

    @property
    def ratio(self) -> float:
        return self.measured / self.reference


@dataclass
class ComparisonReport:
    """Cell ratios and winner agreement against a reference set.

    Informational only: reference rows come from other hardware, so
    absolute ratios say nothing about correctness. Winner agreement asks a
    robuster question: does the same side of each grouped/ungrouped or
    kernel pair win here as in the reference?
    """

    matched: list[CellComparison]
    contests: int
    agreements: int
    unmatched_measured: int
    unmatched_reference: int

    @property
    def winner_agreement(self) -> float | None:
        if self.contests == 0:
            return None
        return self.agreements / self.contests

    def render_text(self) -> str:
        lines = [
            f"matched cells: {len(self.matched)} "
            f"(unmatched measured {self.unmatched_measured}, "
            f"reference {self.unmatched_reference})",
        ]
        if self.matched:
            ratios = [c.ratio for c in self.matched]
            lines.append(
                f"measured/reference ratio: min {min(ratios):.3f}, "
                f"median {statistics.median(ratios):.3f}, max {max(ratios):.3f}"
            )
        if self.winner_agreement is None:
            lines.append("winner agreement: n/a (no comparable pairs)")
        else:
            lines.append(
                f"winner agreement: {self.agreements}/{self.contests} "
                f"({100.0 * self.winner_agreement:.0f}%)"
            )
        lines.append(
            "note: ratios are informational; the reference numbers were "
            "measured on different hardware"
        )
        return "\n".join(lines) + "\n"


def _winner(a: float, b: float) -> int:
    if a > b:
        return 1
    if b > a:
        return -1
    return 0


def compare_to_reference(
    measured_rows: list, reference_rows: list[dict]
) -> ComparisonReport:
    """Align measured and reference cells and score winner agreement."""
    ours = {}
    for cell in (_norm(r) for r in measured_rows):
        if cell["skipped"] or cell["macps"] is None:
            continue
        ours.setdefault(
            (cell["variant"], cell["channels"], cell["resolution"], cell["kernel"]),
            cell["macps"],
        )
    theirs = {}
    for cell in (_norm(r) for r in reference_rows):
        if cell["macps"] is None:
            continue
        theirs.setdefault(
            (cell["variant"], cell["channels"], cell["resolution"], cell["kernel"]),
            cell["macps"],
        )
    matched = []
    for key in sorted(ours.keys() & theirs.keys(), key=lambda k: tuple(map(str, k))):
        variant, channels, resolution, kernel = key
        matched.append(
            CellComparison(
                variant=variant,
                channels=channels,
                resolution=resolution,
                kernel=kernel,
                measured=ours[key],
                reference=theirs[key],
            )
        )
    shared = ours.keys() & theirs.keys()
    contests = 0
    agreements = 0
    # Grouped-vs-ungrouped contests at fixed channels/resolution/kernel.
    axes = {(c, r, k) for (_, c, r, k) in shared}
    for c, r, k in sorted(axes):
        for a, b in VARIANT_PAIRS:
            ka, kb = (a, c, r, k), (b, c, r, k)
            if ka in shared and kb in shared:
                contests += 1
                if _winner(ours[ka], ours[kb]) == _winner(theirs[ka], theirs[kb]):
                    agreements += 1
    # Kernel contests at fixed variant/channels/resolution.
    vcr = {(v, c, r) for (v, c, r, _) in shared}
    for v, c, r in sorted(vcr):
        kernels = sorted({k for (v2, c2, r2, k) in shared if (v2, c2, r2) == (v, c, r)})
        for i in range(len(kernels)):
            for j in range(i + 1, len(kernels)):
                ka, kb = (v, c, r, kernels[i]), (v, c, r, kernels[j])
                contests += 1
                if _winner(ours[ka], ours[kb]) == _winner(theirs[ka], theirs[kb]):
                    agreements += 1
    return ComparisonReport(
        matched=matched,
        contests=contests,
        agreements=agreements,
        unmatched_measured=len(ours.keys() - theirs.keys()),
        unmatched_reference=len(theirs.keys() - ours.keys()),
    )
