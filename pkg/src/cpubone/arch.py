"""CPUBone backbone assembly: specs, builder, forward pass, layer walk.

A model is a stride-2 stem followed by five stages and a pooled linear
classifier. The stem provides stage 0's downsampling; every later stage
opens with a stride-2 block and continues with stride-1 residual blocks.
Stages below 256 channels use the fused block form, the rest the unfused
form, and the last two stages shrink spatial kernels to 2x2. In those two
stages every residual block is paired with an attention insert: a
downsampled multi-head self-attention followed by a pointwise
feed-forward, both with residual adds.

`layer_plan` walks the same structure symbolically and yields exact MAC
counts per layer; `build_model` materializes weights deterministically
from a seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .blocks import Block, BlockSpec, BlockVariant, ConvUnit, _built_unit, build_block
from .kernels import MacCounter, nearest_upsample
from .macs import LayerMacs, conv_macs
from .tensor import Shape4, Tensor, derive_seed, random_uniform

STAGE_KINDS = ("GrFu", "Gr")
FUSED_BELOW_CHANNELS = 256
ATTENTION_DOWNSAMPLE = 2
FFN_EXPANSION = 4
DEFAULT_HEAD_DIM = 32

# Stage schedule per named variant: (channels, residual blocks) x 5 stages.
_VARIANT_STAGES: dict[str, tuple[tuple[int, int], ...]] = {
    "B0": ((16, 0), (32, 0), (64, 0), (128, 3), (256, 4)),
    "B1": ((16, 0), (32, 0), (64, 0), (128, 5), (256, 5)),
    "B2": ((20, 0), (40, 0), (80, 0), (160, 6), (320, 6)),
    "B3": ((32, 1), (64, 1), (128, 2), (256, 6), (512, 6)),
}


@dataclass(frozen=True)
class StageSpec:
    channels: int
    num_blocks: int
    kind: str
    kernel: int
    attention: bool

    def __post_init__(self) -> None:
        if not isinstance(self.channels, int) or self.channels < 1:
            raise ValueError(f"channels must be a positive int, got {self.channels!r}")
        if not isinstance(self.num_blocks, int) or self.num_blocks < 0:
            raise ValueError(f"num_blocks must be >= 0, got {self.num_blocks!r}")
        if self.kind not in STAGE_KINDS:
            raise ValueError(f"kind must be one of {STAGE_KINDS}, got {self.kind!r}")
        if self.kernel not in (2, 3):
            raise ValueError(f"stage kernel must be 2 or 3, got {self.kernel!r}")


@dataclass(frozen=True)
class AttentionSpec:
    channels: int
    heads: int
    head_dim: int = DEFAULT_HEAD_DIM
    downsample: int = ATTENTION_DOWNSAMPLE

    def __post_init__(self) -> None:
        if self.heads * self.head_dim != self.channels:
            raise ValueError(
                f"heads {self.heads} * head_dim {self.head_dim} != "
                f"channels {self.channels}"
            )


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    stem_channels: int
    stages: tuple[StageSpec, ...]
    groups: int = 2
    num_classes: int = 1000
    head_dim: int = DEFAULT_HEAD_DIM

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("a model needs at least one stage")
        if self.stem_channels != self.stages[0].channels:
            raise ValueError(
                f"stem_channels {self.stem_channels} != stage-0 channels "
                f"{self.stages[0].channels}"
            )
        if self.groups < 1:
            raise ValueError(f"groups must be >= 1, got {self.groups}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        for stage in self.stages:
            if stage.attention and stage.channels % self.head_dim != 0:
                raise ValueError(
                    f"attention stage channels {stage.channels} not divisible "
                    f"by head_dim {self.head_dim}"
                )

    def attention_spec(self, stage: StageSpec) -> AttentionSpec:
        return AttentionSpec(
            channels=stage.channels,
            heads=stage.channels // self.head_dim,
            head_dim=self.head_dim,
        )


def stage_kind_for_channels(channels: int) -> str:
    """Fused below 256 channels, unfused at or above."""
    return "GrFu" if channels < FUSED_BELOW_CHANNELS else "Gr"


def cpubone_spec(variant: str) -> ModelSpec:
    """Named backbone spec; variant is one of B0, B1, B2, B3."""
    if variant not in _VARIANT_STAGES:
        raise ValueError(
            f"unknown variant {variant!r}, expected one of "
            f"{sorted(_VARIANT_STAGES)}"
        )
    schedule = _VARIANT_STAGES[variant]
    last_two = {len(schedule) - 2, len(schedule) - 1}
    stages = tuple(
        StageSpec(
            channels=channels,
            num_blocks=num_blocks,
            kind=stage_kind_for_channels(channels),
            kernel=2 if index in last_two else 3,
            attention=index in last_two,
        )
        for index, (channels, num_blocks) in enumerate(schedule)
    )
    return ModelSpec(variant=variant, stem_channels=stages[0].channels, stages=stages)


def ablation_spec(
    base: ModelSpec,
    groups: int | None = None,
    plain_mbconv: bool = False,
    kernel3_everywhere: bool = False,
) -> ModelSpec:
    """Controlled single-change variants of a base spec.

    `groups` overrides the first-conv group count everywhere;
    `plain_mbconv` reverts every block to the ungrouped, unfused form;
    `kernel3_everywhere` undoes the 2x2 kernels of the late stages.
    """
    spec = base
    suffix = []
    if groups is not None:
        if groups < 1:
            raise ValueError(f"groups must be >= 1, got {groups}")
        spec = replace(spec, groups=groups)
        if groups != base.groups:
            suffix.append(f"g{groups}")
    if plain_mbconv:
        spec = replace(
            spec,
            groups=1,
            stages=tuple(replace(s, kind="Gr") for s in spec.stages),
        )
        suffix.append("plain")
    if kernel3_everywhere:
        spec = replace(
            spec, stages=tuple(replace(s, kernel=3) for s in spec.stages)
        )
        suffix.append("k3")
    if suffix:
        spec = replace(spec, variant=base.variant + "-" + "-".join(suffix))
    return spec


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "variant": spec.variant,
        "stem_channels": spec.stem_channels,
        "stages": [
            {
                "channels": s.channels,
                "num_blocks": s.num_blocks,
                "kind": s.kind,
                "kernel": s.kernel,
                "attention": s.attention,
            }
            for s in spec.stages
        ],
        "groups": spec.groups,
        "num_classes": spec.num_classes,
    }


def spec_to_json(spec: ModelSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2)


def spec_from_dict(payload: dict) -> ModelSpec:
    known = {"variant", "stem_channels", "stages", "groups", "num_classes"}
    unknown = set(payload) - known
    if unknown:
        raise ValueError(f"unknown model spec fields: {sorted(unknown)}")
    try:
        stages = tuple(
            StageSpec(
                channels=s["channels"],
                num_blocks=s["num_blocks"],
                kind=s["kind"],
                kernel=s["kernel"],
                attention=s["attention"],
            )
            for s in payload["stages"]
        )
        return ModelSpec(
            variant=payload["variant"],
            stem_channels=payload["stem_channels"],
            stages=stages,
            groups=payload.get("groups", 2),
            num_classes=payload.get("num_classes", 1000),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model spec payload: {exc}") from exc


def spec_from_json(text: str) -> ModelSpec:
    return spec_from_dict(json.loads(text))


def block_variant_for(kind: str, groups: int) -> BlockVariant:
    """Map a stage kind plus group count onto the effective block variant."""
    if kind == "GrFu":
        return BlockVariant.GR_FU_MBCONV if groups > 1 else BlockVariant.FU_MBCONV
    return BlockVariant.GR_MBCONV if groups > 1 else BlockVariant.MBCONV


def _iter_structure(spec: ModelSpec) -> Iterator[tuple[str, str, object]]:
    """Yield (name, kind, payload) for every layer in forward order.

    Kinds: "stem" (payload (c_in, c_out)), "block" (payload BlockSpec),
    "attention" (payload AttentionSpec), "ffn" (payload channels),
    "head" (payload (channels, num_classes)).
    """
    yield "stem", "stem", (3, spec.stem_channels)
    prev = spec.stem_channels
    for index, stage in enumerate(spec.stages):
        variant = block_variant_for(stage.kind, spec.groups)
        if index > 0:
            yield (
                f"s{index}.down",
                "block",
                BlockSpec(
                    variant=variant,
                    c_in=prev,
                    c_out=stage.channels,
                    kh=stage.kernel,
                    kw=stage.kernel,
                    stride=2,
                    groups=spec.groups,
                    residual=False,
                ),
            )
        for j in range(stage.num_blocks):
            yield (
                f"s{index}.b{j}",
                "block",
                BlockSpec(
                    variant=variant,
                    c_in=stage.channels,
                    c_out=stage.channels,
                    kh=stage.kernel,
                    kw=stage.kernel,
                    stride=1,
                    groups=spec.groups,
                ),
            )
            if stage.attention:
                yield f"s{index}.b{j}.attn", "attention", spec.attention_spec(stage)
                yield f"s{index}.b{j}.ffn", "ffn", stage.channels
        if stage.attention and stage.num_blocks == 0:
            yield f"s{index}.attn", "attention", spec.attention_spec(stage)
            yield f"s{index}.ffn", "ffn", stage.channels
        prev = stage.channels
    yield "head", "head", (prev, spec.num_classes)


def _attention_reduced_dims(h: int, w: int) -> tuple[int, int]:
    # Depthwise 3x3 stride-2 with pad 1 on each side.
    return (h - 1) // 2 + 1, (w - 1) // 2 + 1


def layer_plan(spec: ModelSpec, h: int, w: int) -> list[LayerMacs]:
    """Exact MAC count per layer for an h x w input."""
    if h < 32 or w < 32 or h % 32 or w % 32:
        raise ValueError(f"input resolution must be a multiple of 32, got {h}x{w}")
    from .blocks import block_macs  # local to keep module imports acyclic

    entries: list[LayerMacs] = []
    dims = (h, w)
    for name, kind, payload in _iter_structure(spec):
        if kind == "stem":
            c_in, c_out = payload
            oh, ow = dims[0] // 2, dims[1] // 2
            entries.append(
                LayerMacs(name, "conv", "conv", conv_macs(3, 3, c_in, c_out, oh, ow))
            )
            dims = (oh, ow)
        elif kind == "block":
            entries.append(LayerMacs(name, "block", "conv", block_macs(payload, *dims)))
            if payload.stride == 2:
                dims = ((dims[0] + 1) // 2, (dims[1] + 1) // 2)
        elif kind == "attention":
            aspec = payload
            c = aspec.channels
            rh, rw = _attention_reduced_dims(*dims)
            tokens = rh * rw
            entries.append(
                LayerMacs(
                    f"{name}.qkv", "conv", "attention",
                    conv_macs(1, 1, c, 3 * c, dims[0], dims[1]),
                )
            )
            entries.append(
                LayerMacs(
                    f"{name}.dw", "conv", "attention",
                    conv_macs(3, 3, 3 * c, 3 * c, rh, rw, 3 * c),
                )
            )
            entries.append(
                LayerMacs(
                    f"{name}.qk", "matmul", "attention",
                    aspec.heads * tokens * tokens * aspec.head_dim,
                )
            )
            entries.append(
                LayerMacs(
                    f"{name}.av", "matmul", "attention",
                    aspec.heads * tokens * tokens * aspec.head_dim,
                )
            )
            entries.append(
                LayerMacs(
                    f"{name}.proj", "conv", "attention",
                    conv_macs(1, 1, c, c, rh, rw),
                )
            )
        elif kind == "ffn":
            c = payload
            hidden = FFN_EXPANSION * c
            macs = conv_macs(1, 1, c, hidden, dims[0], dims[1]) + conv_macs(
                1, 1, hidden, c, dims[0], dims[1]
            )
            entries.append(LayerMacs(name, "conv", "attention", macs))
        elif kind == "head":
            c, classes = payload
            entries.append(LayerMacs(name, "linear", "conv", c * classes))
    return entries


class AttentionBlock:
    """Downsampled multi-head self-attention with a residual add.

    Q, K, V come from one pointwise projection, get reduced 2x by a
    depthwise 3x3 stride-2 convolution, attend over the reduced tokens,
    and the projected result is nearest-upsampled back (cropped to the
    input extents when they are odd) before the residual add. Only the
    two attention matrix products are non-convolutional work.
    """

    def __init__(self, spec: AttentionSpec, seed: int):
        c = spec.channels
        self.spec = spec
        self.qkv = _built_unit(c, 3 * c, 1, 1, 1, 1, "none", derive_seed(seed, 0))
        self.reduce = _built_unit(
            3 * c, 3 * c, 3, 3, 2, 3 * c, "none", derive_seed(seed, 1)
        )
        self.proj = _built_unit(c, c, 1, 1, 1, 1, "none", derive_seed(seed, 2))

    def forward(self, x: Tensor, threads: int = 1) -> Tensor:
        s = self.spec
        n, c, h, w = x.shape.as_tuple()
        if c != s.channels:
            raise ValueError(f"attention built for {s.channels} channels, got {c}")
        if h < 2 or w < 2:
            raise ValueError(f"attention needs at least a 2x2 map, got {h}x{w}")
        qkv = self.qkv.forward(x, threads=threads)
        red = self.reduce.forward(qkv, threads=threads)
        rh, rw = red.shape.h, red.shape.w
        tokens = rh * rw
        merged = red.data.reshape(n, 3, s.heads, s.head_dim, tokens)
        # (n, heads, tokens, head_dim) per projection
        q = np.ascontiguousarray(merged[:, 0].transpose(0, 1, 3, 2))
        k = np.ascontiguousarray(merged[:, 1].transpose(0, 1, 3, 2))
        v = np.ascontiguousarray(merged[:, 2].transpose(0, 1, 3, 2))
        scale = np.float32(1.0 / np.sqrt(s.head_dim))
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores, dtype=np.float32)
        weights /= weights.sum(axis=-1, keepdims=True)
        mixed = np.matmul(weights, v)  # (n, heads, tokens, head_dim)
        folded = np.ascontiguousarray(
            mixed.transpose(0, 1, 3, 2).reshape(n, c, rh, rw)
        )
        projected = self.proj.forward(Tensor(folded), threads=threads)
        up = nearest_upsample(projected, ATTENTION_DOWNSAMPLE)
        cropped = np.ascontiguousarray(up.data[:, :, :h, :w])
        return Tensor(cropped + x.data)

    def last_attention_weights(self, x: Tensor) -> np.ndarray:
        """Softmax matrix for inspection; rows sum to one."""
        qkv = self.qkv.forward(x)
        red = self.reduce.forward(qkv)
        s = self.spec
        tokens = red.shape.h * red.shape.w
        merged = red.data.reshape(x.shape.n, 3, s.heads, s.head_dim, tokens)
        q = merged[:, 0].transpose(0, 1, 3, 2)
        k = merged[:, 1].transpose(0, 1, 3, 2)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * np.float32(
            1.0 / np.sqrt(s.head_dim)
        )
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores, dtype=np.float32)
        weights /= weights.sum(axis=-1, keepdims=True)
        return weights


def attention_forward(block: AttentionBlock, x: Tensor, threads: int = 1) -> Tensor:
    """Run one attention insert; output extents equal input extents."""
    return block.forward(x, threads=threads)


class FeedForward:
    """Pointwise expand/project pair with a residual add."""

    def __init__(self, channels: int, seed: int, expansion: int = FFN_EXPANSION):
        hidden = expansion * channels
        self.channels = channels
        self.expand = _built_unit(
            channels, hidden, 1, 1, 1, 1, "gelu", derive_seed(seed, 0)
        )
        self.project = _built_unit(
            hidden, channels, 1, 1, 1, 1, "none", derive_seed(seed, 1)
        )

    def forward(self, x: Tensor, threads: int = 1) -> Tensor:
        y = self.expand.forward(x, threads=threads)
        y = self.project.forward(y, threads=threads)
        return Tensor(y.data + x.data)


class Head:
    """Global average pool followed by a linear classifier."""

    def __init__(self, channels: int, num_classes: int, seed: int):
        self.channels = channels
        self.num_classes = num_classes
        bound = 1.0 / float(np.sqrt(channels))
        self.weight = random_uniform(
            Shape4(num_classes, channels, 1, 1), seed, -bound, bound
        ).data.reshape(num_classes, channels)
        self.bias = np.zeros(num_classes, dtype=np.float32)

    def forward(self, x: Tensor) -> np.ndarray:
        pooled = x.data.mean(axis=(2, 3), dtype=np.float32)
        return pooled @ self.weight.T + self.bias


class Model:
    """A built backbone: named layers in forward order."""

    def __init__(self, spec: ModelSpec, layers: list[tuple[str, object]]):
        self.spec = spec
        self.layers = layers

    def forward(self, x: Tensor, threads: int = 1) -> np.ndarray:
        if x.shape.c != 3:
            raise ValueError(f"model input must have 3 channels, got {x.shape.c}")
        if x.shape.h % 32 or x.shape.w % 32:
            raise ValueError(
                f"input extents must be multiples of 32, got "
                f"{x.shape.h}x{x.shape.w}"
            )
        y = x
        for _, layer in self.layers[:-1]:
            y = layer.forward(y, threads=threads)
        head = self.layers[-1][1]
        return head.forward(y)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        for name, layer in self.layers:
            if isinstance(layer, ConvUnit):
                out.append((f"{name}.w", layer.weights.w))
            elif isinstance(layer, Block):
                for i, unit in enumerate(layer.convs):
                    out.append((f"{name}.c{i}.w", unit.weights.w))
            elif isinstance(layer, AttentionBlock):
                out.append((f"{name}.qkv.w", layer.qkv.weights.w))
                out.append((f"{name}.red.w", layer.reduce.weights.w))
                out.append((f"{name}.proj.w", layer.proj.weights.w))
            elif isinstance(layer, FeedForward):
                out.append((f"{name}.up.w", layer.expand.weights.w))
                out.append((f"{name}.down.w", layer.project.weights.w))
            elif isinstance(layer, Head):
                out.append((f"{name}.w", layer.weight))
        return out

    def num_params(self) -> int:
        total = 0
        for _, arr in self.named_arrays():
            total += arr.size
        return total


class ConvUnitAdapter:
    """Gives a bare ConvUnit the same forward signature as the blocks."""

    def __init__(self, unit: ConvUnit):
        self.unit = unit
        self.weights = unit.weights

    def forward(self, x: Tensor, threads: int = 1) -> Tensor:
        return self.unit.forward(x, threads=threads)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Materialize a model with weights deterministic in (spec, seed)."""
    layers: list[tuple[str, object]] = []
    for index, (name, kind, payload) in enumerate(_iter_structure(spec)):
        sub_seed = derive_seed(seed, index)
        if kind == "stem":
            _, c_out = payload
            stem = _built_unit(3, c_out, 3, 3, 2, 1, "gelu", sub_seed)
            layers.append((name, ConvUnitAdapter(stem)))
        elif kind == "block":
            layers.append((name, build_block(payload, sub_seed)))
        elif kind == "attention":
            layers.append((name, AttentionBlock(payload, sub_seed)))
        elif kind == "ffn":
            layers.append((name, FeedForward(payload, sub_seed)))
        elif kind == "head":
            c, classes = payload
            layers.append((name, Head(c, classes, sub_seed)))
    return Model(spec, layers)


def forward_model(model: Model, x: Tensor, threads: int = 1) -> np.ndarray:
    """Forward pass; returns (batch, num_classes) float32 logits."""
    return model.forward(x, threads=threads)


def instrumented_model_conv_macs(model: Model, x: Tensor) -> int:
    """Forward through the counted reference kernels; returns conv MACs.

    Stem and block convolutions run through the loop-counting reference
    kernel; attention inserts run normally (they belong to the other
    section); the classifier's multiplies are counted from the matmul
    it actually executes. The result matches the symbolic plan's "conv"
    section exactly.
    """
    counter = MacCounter()
    y = x
    for _, layer in model.layers[:-1]:
        if isinstance(layer, Block):
            y = layer.forward(y, reference=True, counter=counter)
        elif isinstance(layer, ConvUnitAdapter):
            y = layer.unit.forward(y, reference=True, counter=counter)
        else:
            y = layer.forward(y)
    head = model.layers[-1][1]
    logits = head.forward(y)
    counter.add(logits.shape[0] * head.weight.shape[0] * head.weight.shape[1])
    return counter.macs
