"""CPU-focused convolution micro-kernels with exact MAC accounting.

The package provides four inverted-bottleneck block variants (plain,
grouped, fused, grouped-fused), a counted reference convolution plus a
numerically-matched fast path, closed-form MAC formulas with exact
rational cost ratios, the CPUBone B0-B3 backbones, a MACpS benchmark
harness, and table/report rendering against shipped reference data.
"""

from .arch import (
    AttentionBlock,
    Model,
    ModelSpec,
    StageSpec,
    ablation_spec,
    build_model,
    cpubone_spec,
    forward_model,
    layer_plan,
    spec_from_json,
    spec_to_json,
)
from .bench import BenchConfig, BenchResult, SweepGrid, load_grid, run_sweep
from .blocks import Block, BlockSpec, BlockVariant, build_block, forward_block
from .kernels import (
    ConvSpec,
    ConvWeights,
    MacCounter,
    conv2d_fast,
    conv2d_ref,
    run_oracle_check,
)
from .macs import (
    conv_macs,
    fumbconv_macs,
    grouped_fused_ratio,
    grouped_mbconv_ratio,
    kernel_area_ratio,
    kernel_reduction_ratio_grfused,
    mbconv_macs,
    model_macs,
)
from .tensor import Shape4, Tensor, derive_seed, random_uniform, zeros

__version__ = "0.1.0"

__all__ = [
    "AttentionBlock",
    "BenchConfig",
    "BenchResult",
    "Block",
    "BlockSpec",
    "BlockVariant",
    "ConvSpec",
    "ConvWeights",
    "MacCounter",
    "Model",
    "ModelSpec",
    "Shape4",
    "StageSpec",
    "SweepGrid",
    "Tensor",
    "ablation_spec",
    "build_block",
    "build_model",
    "conv2d_fast",
    "conv2d_ref",
    "conv_macs",
    "cpubone_spec",
    "derive_seed",
    "forward_block",
    "forward_model",
    "fumbconv_macs",
    "grouped_fused_ratio",
    "grouped_mbconv_ratio",
    "kernel_area_ratio",
    "kernel_reduction_ratio_grfused",
    "layer_plan",
    "load_grid",
    "mbconv_macs",
    "model_macs",
    "random_uniform",
    "run_oracle_check",
    "run_sweep",
    "spec_from_json",
    "spec_to_json",
    "zeros",
    "__version__",
]
