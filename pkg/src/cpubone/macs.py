"""Exact multiply-accumulate counts for convolutions, blocks, and models.

Everything here is closed-form integer or rational arithmetic, no floats:
a convolution's MAC count is kernel_area * (c_in / groups) * c_out * out_area,
bias adds excluded. Ratios between design variants are exact `Fraction`
values so tests can compare them as integers. The instrumented reference
kernel in `cpubone.kernels` independently counts the same quantities one
scalar multiply at a time; agreement between the two routes is part of the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .arch import ModelSpec

# Exact rational ratio between two MAC counts.
Ratio = Fraction


def _check_count(name: str, value: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ValueError(f"{name} must be an int, got {value!r}")
    if value < 1:
        raise ValueError(f"{name} must be >= 1, got {value}")


def conv_macs(
    kh: int,
    kw: int,
    c_in: int,
    c_out: int,
    h_out: int,
    w_out: int,
    groups: int = 1,
) -> int:
    """MACs of a 2-D convolution producing an h_out x w_out map.

    Counts every kernel tap at every output position, padding taps
    included, so the value scales with kernel area and inversely with the
    group count. Bias terms are adds, not multiplies, and are excluded.
    """
    for name, value in (
        ("kh", kh), ("kw", kw), ("c_in", c_in), ("c_out", c_out),
        ("h_out", h_out), ("w_out", w_out), ("groups", groups),
    ):
        _check_count(name, value)
    if c_in % groups != 0:
        raise ValueError(f"groups {groups} does not divide c_in {c_in}")
    if c_out % groups != 0:
        raise ValueError(f"groups {groups} does not divide c_out {c_out}")
    return kh * kw * (c_in // groups) * c_out * h_out * w_out


def fumbconv_macs(
    c_in: int,
    expansion: int,
    kh: int,
    kw: int,
    h: int,
    w: int,
    groups: int = 1,
) -> int:
    """MACs of a fused inverted-bottleneck block at constant resolution.

    A spatial kh x kw convolution expands c_in to expansion*c_in (optionally
    grouped), then a 1x1 convolution projects back to c_in.
    """
    _check_count("expansion", expansion)
    hidden = expansion * c_in
    return conv_macs(kh, kw, c_in, hidden, h, w, groups) + conv_macs(
        1, 1, hidden, c_in, h, w, 1
    )


def mbconv_macs(
    c_in: int,
    expansion: int,
    kh: int,
    kw: int,
    h: int,
    w: int,
    groups: int = 1,
) -> int:
    """MACs of an inverted-bottleneck block at constant resolution.

    A 1x1 convolution (optionally grouped) expands c_in to expansion*c_in,
    a depthwise kh x kw convolution mixes spatially, and a 1x1 convolution
    projects back to c_in.
    """
    _check_count("expansion", expansion)
    hidden = expansion * c_in
    return (
        conv_macs(1, 1, c_in, hidden, h, w, groups)
        + conv_macs(kh, kw, hidden, hidden, h, w, hidden)
        + conv_macs(1, 1, hidden, c_in, h, w, 1)
    )


def grouped_fused_ratio(
    kh: int, kw: int, groups: int, expansion: int = 4
) -> Ratio:
    """Exact fused-block MAC ratio, grouped first conv over ungrouped.

    Equals (kernel_area/groups + 1) / (kernel_area + 1); the channel count
    and expansion factor cancel. 3x3 with groups 2 gives 11/20.
    """
    for name, value in (
        ("kh", kh), ("kw", kw), ("groups", groups), ("expansion", expansion),
    ):
        _check_count(name, value)
    area = kh * kw
    return Fraction(area + groups, groups * (area + 1))


def grouped_mbconv_ratio(
    c_in: int, kh: int = 3, kw: int = 3, groups: int = 2
) -> Ratio:
    """Exact MBConv MAC ratio, grouped expansion conv over ungrouped.

    Equals (c_in/groups + kernel_area + c_in) / (2*c_in + kernel_area); the
    expansion factor cancels. Approaches 3/4 from above as c_in grows when
    groups is 2.
    """
    for name, value in (
        ("c_in", c_in), ("kh", kh), ("kw", kw), ("groups", groups),
    ):
        _check_count(name, value)
    area = kh * kw
    return Fraction(
        c_in + groups * (area + c_in), groups * (2 * c_in + area)
    )


def kernel_reduction_ratio_grfused(groups: int = 2) -> Ratio:
    """Exact fused-block MAC ratio of a 2x2 kernel over a 3x3 kernel.

    Equals (4/groups + 1) / (9/groups + 1) = (4 + groups) / (9 + groups):
    1/2 ungrouped, 6/11 at groups 2.
    """
    _check_count("groups", groups)
    return Fraction(4 + groups, 9 + groups)


def kernel_area_ratio(
    kh_new: int, kw_new: int, kh_old: int, kw_old: int
) -> Ratio:
    """Exact MAC ratio of two kernel sizes for an otherwise fixed conv.

    MACs scale linearly with kernel area, so a depthwise (or any plain)
    convolution moved from 3x3 to 2x2 costs 4/9 of the original.
    """
    for name, value in (
        ("kh_new", kh_new), ("kw_new", kw_new),
        ("kh_old", kh_old), ("kw_old", kw_old),
    ):
        _check_count(name, value)
    return Fraction(kh_new * kw_new, kh_old * kw_old)


@dataclass(frozen=True)
class LayerMacs:
    """One layer's MAC count inside a model walk.

    `section` is "conv" for the stem, block, and classifier layers whose
    structure is fully pinned, and "attention" for everything inside an
    attention insert (projections, matrix products, feed-forward).
    """

    name: str
    kind: str
    section: str
    macs: int


@dataclass(frozen=True)
class ModelMacs:
    """Per-layer MAC breakdown of a model at one input resolution."""

    layers: tuple[LayerMacs, ...]
    total: int
    conv_subtotal: int
    attention_subtotal: int


def model_macs(spec: "ModelSpec", h: int, w: int) -> ModelMacs:
    """Exact per-layer MAC counts for a model at input resolution h x w."""
    from .arch import layer_plan

    layers = tuple(layer_plan(spec, h, w))
    conv_subtotal = sum(e.macs for e in layers if e.section == "conv")
    attn_subtotal = sum(e.macs for e in layers if e.section == "attention")
    return ModelMacs(
        layers=layers,
        total=conv_subtotal + attn_subtotal,
        conv_subtotal=conv_subtotal,
        attention_subtotal=attn_subtotal,
    )
