"""Inverted-bottleneck blocks: plain, grouped, fused, and grouped-fused.

A block is a short chain of convolutions with an optional residual add:

* MBConv: 1x1 expansion, depthwise k x k, 1x1 projection.
* FuMBConv: fused k x k expansion straight to the hidden width, then a 1x1
  projection.
* The Gr- prefix puts a channel-group split (default 2) on the first
  convolution only.

Activations default to gelu inside the block and none after the projection.
Normalization is folded to an identity scale and zero shift at build time,
so built blocks carry zero biases and the MAC calculus is unaffected.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .kernels import ConvSpec, ConvWeights, MacCounter, fold_batchnorm, same_padding
from .macs import conv_macs
from .tensor import Tensor, derive_seed


class BlockVariant(str, Enum):
    MBCONV = "MBConv"
    GR_MBCONV = "GrMBConv"
    FU_MBCONV = "FuMBConv"
    GR_FU_MBCONV = "GrFuMBConv"

    @property
    def fused(self) -> bool:
        return self in (BlockVariant.FU_MBCONV, BlockVariant.GR_FU_MBCONV)

    @property
    def grouped(self) -> bool:
        return self in (BlockVariant.GR_MBCONV, BlockVariant.GR_FU_MBCONV)


def parse_variant(name: str) -> BlockVariant:
    for variant in BlockVariant:
        if variant.value.lower() == name.lower():
            return variant
    raise ValueError(
        f"unknown block variant {name!r}, expected one of "
        f"{[v.value for v in BlockVariant]}"
    )


@dataclass(frozen=True)
class BlockSpec:
    """Static description of one block.

    `groups` only applies to the first convolution and only for grouped
    variants; the others run that convolution ungrouped. `residual`
    defaults to stride 1 with matching channel counts.
    """

    variant: BlockVariant
    c_in: int
    c_out: int
    expansion: int = 4
    kh: int = 3
    kw: int = 3
    stride: int = 1
    groups: int = 2
    residual: bool | None = None

    def __post_init__(self) -> None:
        for name in ("c_in", "c_out", "expansion", "kh", "kw", "stride", "groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        g = self.first_conv_groups
        if self.c_in % g != 0:
            raise ValueError(f"groups {g} does not divide c_in {self.c_in}")
        if self.hidden % g != 0:
            raise ValueError(f"groups {g} does not divide hidden width {self.hidden}")
        if self.use_residual and (self.stride != 1 or self.c_in != self.c_out):
            raise ValueError(
                "residual requires stride 1 and c_in == c_out, got "
                f"stride {self.stride}, {self.c_in}->{self.c_out}"
            )

    @property
    def hidden(self) -> int:
        return self.expansion * self.c_in

    @property
    def first_conv_groups(self) -> int:
        return self.groups if self.variant.grouped else 1

    @property
    def use_residual(self) -> bool:
        if self.residual is None:
            return self.stride == 1 and self.c_in == self.c_out
        return self.residual


@dataclass
class ConvUnit:
    """One convolution layer with its weights and trailing activation.

    Padding follows the same-size rule and is recomputed from the incoming
    extents, so even kernels at stride 2 stay exact on even maps.
    """

    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int
    groups: int
    act: str
    weights: ConvWeights

    def spec_for(self, h: int, w: int) -> ConvSpec:
        return ConvSpec(
            c_in=self.c_in,
            c_out=self.c_out,
            kh=self.kh,
            kw=self.kw,
            stride=self.stride,
            pad=same_padding(self.kh, self.kw, self.stride, h, w),
            groups=self.groups,
            has_bias=self.weights.bias is not None,
        )

    def forward(
        self,
        x: Tensor,
        threads: int = 1,
        reference: bool = False,
        counter: MacCounter | None = None,
    ) -> Tensor:
        spec = self.spec_for(x.shape.h, x.shape.w)
        if reference:
            y = kernels.conv2d_ref(x, self.weights, spec, counter=counter)
        else:
            y = kernels.conv2d_fast(x, self.weights, spec, threads=threads)
        return kernels.activation(y, self.act)

    def macs(self, h: int, w: int) -> tuple[int, tuple[int, int]]:
        spec = self.spec_for(h, w)
        oh, ow = spec.out_dims(h, w)
        return (
            conv_macs(self.kh, self.kw, self.c_in, self.c_out, oh, ow, self.groups),
            (oh, ow),
        )


def _built_unit(
    c_in: int,
    c_out: int,
    kh: int,
    kw: int,
    stride: int,
    groups: int,
    act: str,
    seed: int,
) -> ConvUnit:
    spec = ConvSpec(
        c_in=c_in, c_out=c_out, kh=kh, kw=kw, stride=stride, groups=groups
    )
    raw = kernels.init_conv_weights(spec, seed)
    ones = np.ones(c_out, dtype=np.float32)
    zeros = np.zeros(c_out, dtype=np.float32)
    return ConvUnit(
        c_in=c_in,
        c_out=c_out,
        kh=kh,
        kw=kw,
        stride=stride,
        groups=groups,
        act=act,
        weights=fold_batchnorm(raw, ones, zeros),
    )


def _unit_layout(spec: BlockSpec) -> list[tuple[int, int, int, int, int, int, str]]:
    """(c_in, c_out, kh, kw, stride, groups, act) per convolution."""
    g = spec.first_conv_groups
    if spec.variant.fused:
        return [
            (spec.c_in, spec.hidden, spec.kh, spec.kw, spec.stride, g, "gelu"),
            (spec.hidden, spec.c_out, 1, 1, 1, 1, "none"),
        ]
    return [
        (spec.c_in, spec.hidden, 1, 1, 1, g, "gelu"),
        (spec.hidden, spec.hidden, spec.kh, spec.kw, spec.stride, spec.hidden, "gelu"),
        (spec.hidden, spec.c_out, 1, 1, 1, 1, "none"),
    ]


@dataclass
class Block:
    spec: BlockSpec
    convs: list[ConvUnit]

    def forward(
        self,
        x: Tensor,
        threads: int = 1,
        reference: bool = False,
        counter: MacCounter | None = None,
    ) -> Tensor:
        y = x
        for unit in self.convs:
            y = unit.forward(y, threads=threads, reference=reference, counter=counter)
        if self.spec.use_residual:
            y = Tensor(y.data + x.data)
        return y

    def macs(self, h: int, w: int) -> int:
        total = 0
        dims = (h, w)
        for unit in self.convs:
            layer, dims = unit.macs(*dims)
            total += layer
        return total

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        dims = (h, w)
        for unit in self.convs:
            _, dims = unit.macs(*dims)
        return dims


def build_block(spec: BlockSpec, seed: int = 0) -> Block:
    """Materialize a block with deterministic per-layer weights."""
    convs = [
        _built_unit(*layout, derive_seed(seed, idx))
        for idx, layout in enumerate(_unit_layout(spec))
    ]
    return Block(spec=spec, convs=convs)


def forward_block(
    block: Block,
    x: Tensor,
    threads: int = 1,
    reference: bool = False,
    counter: MacCounter | None = None,
) -> Tensor:
    """Run a block; `reference=True` routes through the counted oracle."""
    return block.forward(x, threads=threads, reference=reference, counter=counter)


def block_macs(spec: BlockSpec, h: int, w: int) -> int:
    """Closed-form MAC count of a block applied to an h x w input."""
    total = 0
    dims = (h, w)
    for c_in, c_out, kh, kw, stride, groups, _ in _unit_layout(spec):
        pad = same_padding(kh, kw, stride, *dims)
        conv = ConvSpec(
            c_in=c_in, c_out=c_out, kh=kh, kw=kw, stride=stride, pad=pad,
            groups=groups,
        )
        oh, ow = conv.out_dims(*dims)
        total += conv_macs(kh, kw, c_in, c_out, oh, ow, groups)
        dims = (oh, ow)
    return total
