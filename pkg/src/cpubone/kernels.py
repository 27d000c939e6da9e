"""Grouped 2-D convolution kernels: instrumented reference and fast path.

Two independent routes compute the same operator:

* `conv2d_ref` is a direct nested-loop convolution compiled with numba. It
  optionally carries a `MacCounter` that is incremented exactly once per
  scalar multiply-accumulate, padding taps included, so a counted run is
  an executable cross-check of the closed-form counts in `cpubone.macs`.
* `conv2d_fast` gathers each group's input patches into a matrix (skipping
  the copy for 1x1 stride-1 convolutions, which are already matrices) and
  runs a cache-tiled matrix multiply. Depthwise convolutions dispatch to a
  direct per-channel loop instead.

Both routes accumulate in float32 in the same tap order, so they agree far
inside the 1e-4 relative tolerance the tests demand. With threads == 1
results are bit-identical run to run; threads > 1 splits output-channel
stripes with no shared mutable state.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from numba import njit, prange

from .macs import conv_macs
from .tensor import Shape4, Tensor, derive_seed, max_rel_err, random_uniform

_TILE = 64  # square gemm tile edge; fits three f32 tiles in L1


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer.

    `pad` is (top, left, bottom, right); even kernels pad asymmetrically.
    Weights are laid out (c_out, c_in/groups, kh, kw).
    """

    c_in: int
    c_out: int
    kh: int
    kw: int
    stride: int = 1
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self) -> None:
        for name in ("c_in", "c_out", "kh", "kw", "stride", "groups"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be a positive int, got {value!r}")
        if self.kh not in (1, 2, 3) or self.kw not in (1, 2, 3):
            raise ValueError(f"kernel {self.kh}x{self.kw} outside supported 1..3")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.c_in % self.groups != 0:
            raise ValueError(f"groups {self.groups} does not divide c_in {self.c_in}")
        if self.c_out % self.groups != 0:
            raise ValueError(f"groups {self.groups} does not divide c_out {self.c_out}")
        if len(self.pad) != 4 or any(
            not isinstance(p, int) or p < 0 or p > 2 for p in self.pad
        ):
            raise ValueError(f"pad must be four ints in 0..2, got {self.pad!r}")

    def out_dims(self, h: int, w: int) -> tuple[int, int]:
        pt, pl, pb, pr = self.pad
        span_h = h + pt + pb - self.kh
        span_w = w + pl + pr - self.kw
        if span_h < 0 or span_w < 0:
            raise ValueError(
                f"input {h}x{w} with pad {self.pad} smaller than kernel "
                f"{self.kh}x{self.kw}"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.c_out, self.c_in // self.groups, self.kh, self.kw)


def same_padding(kh: int, kw: int, stride: int, h: int, w: int) -> tuple[int, int, int, int]:
    """Padding that keeps stride-1 maps same-sized and halves stride-2 maps.

    Odd kernels pad (k-1)/2 on every side. Even kernels pad only bottom and
    right: by 1 at stride 1, and at stride 2 only when the extent is odd.
    """

    def axis(k: int, extent: int) -> tuple[int, int]:
        if k % 2 == 1:
            p = (k - 1) // 2
            return p, p
        if stride == 1:
            return 0, 1
        return 0, extent % 2

    pt, pb = axis(kh, h)
    pl, pr = axis(kw, w)
    return (pt, pl, pb, pr)


@dataclass
class ConvWeights:
    """Filter bank plus optional bias for one convolution."""

    w: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.w.ndim != 4 or self.w.dtype != np.float32:
            raise ValueError("weights must be a rank-4 float32 array")
        if not self.w.flags["C_CONTIGUOUS"]:
            self.w = np.ascontiguousarray(self.w)
        if self.bias is not None:
            if self.bias.ndim != 1 or self.bias.dtype != np.float32:
                raise ValueError("bias must be a rank-1 float32 array")
            if self.bias.shape[0] != self.w.shape[0]:
                raise ValueError(
                    f"bias length {self.bias.shape[0]} != c_out {self.w.shape[0]}"
                )


class MacCounter:
    """Mutable accumulator for scalar multiply-accumulate counts."""

    __slots__ = ("macs",)

    def __init__(self) -> None:
        self.macs = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError(f"cannot add a negative MAC count: {n}")
        self.macs += n

    def reset(self) -> None:
        self.macs = 0


def init_conv_weights(spec: ConvSpec, seed: int) -> ConvWeights:
    """Fan-in-scaled uniform init, deterministic in (spec shape, seed)."""
    c_out, cg, kh, kw = spec.weight_shape()
    fan_in = cg * kh * kw
    bound = 1.0 / float(np.sqrt(fan_in))
    w = random_uniform(Shape4(c_out, cg, kh, kw), seed, -bound, bound).data
    bias = np.zeros(c_out, dtype=np.float32) if spec.has_bias else None
    return ConvWeights(w=w, bias=bias)


def _check_call(x: Tensor, weights: ConvWeights, spec: ConvSpec) -> tuple[int, int]:
    if x.shape.c != spec.c_in:
        raise ValueError(f"input has {x.shape.c} channels, spec wants {spec.c_in}")
    if tuple(weights.w.shape) != spec.weight_shape():
        raise ValueError(
            f"weight shape {tuple(weights.w.shape)} != {spec.weight_shape()}"
        )
    if spec.has_bias and weights.bias is None:
        raise ValueError("spec declares a bias but weights carry none")
    return spec.out_dims(x.shape.h, x.shape.w)


def _padded(data: np.ndarray, spec: ConvSpec) -> np.ndarray:
    pt, pl, pb, pr = spec.pad
    if pt == pl == pb == pr == 0:
        return data
    n, c, h, w = data.shape
    buf = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=np.float32)
    buf[:, :, pt : pt + h, pl : pl + w] = data
    return buf


@njit(cache=True)
def _conv_ref_loops(xp, w, out, stride):
    nb, c_out, oh, ow = out.shape
    cg = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    cpg = c_out // (xp.shape[1] // cg)
    macs = 0
    for n in range(nb):
        for oc in range(c_out):
            ic0 = (oc // cpg) * cg
            for oy in range(oh):
                iy0 = oy * stride
                for ox in range(ow):
                    ix0 = ox * stride
                    acc = np.float32(0.0)
                    for ic in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ic0 + ic, iy0 + u, ix0 + v] * w[oc, ic, u, v]
                                macs += 1
                    out[n, oc, oy, ox] = acc
    return macs


@njit(cache=True)
def _im2col(img, ic0, cg, kh, kw, stride, oh, ow, buf):
    # img (C, Hp, Wp) padded; buf (cg*kh*kw, oh*ow); row order matches the
    # reference kernel's ic, u, v accumulation order.
    for ic in range(cg):
        for u in range(kh):
            for v in range(kw):
                r = (ic * kh + u) * kw + v
                for oy in range(oh):
                    iy = oy * stride + u
                    ob = oy * ow
                    for ox in range(ow):
                        buf[r, ob + ox] = img[ic0 + ic, iy, ox * stride + v]


@njit(cache=True)
def _gemm_stripe(a, b, c, i0, i1):
    # Accumulates into a stripe-local buffer: the fresh allocation is
    # provably alias-free, so the j loop vectorizes; per output element the
    # k order is still plain ascending, matching the reference kernel, and
    # the final add lands on a zeroed c so the sums are identical.
    kk = a.shape[1]
    n = b.shape[1]
    rows = i1 - i0
    buf = np.zeros((rows, n), dtype=np.float32)
    for k0 in range(0, kk, _TILE):
        k1 = min(k0 + _TILE, kk)
        for ii in range(rows):
            k = k0
            while k + 3 < k1:
                a0 = a[i0 + ii, k]
                a1 = a[i0 + ii, k + 1]
                a2 = a[i0 + ii, k + 2]
                a3 = a[i0 + ii, k + 3]
                for j in range(n):
                    t = buf[ii, j] + a0 * b[k, j]
                    t = t + a1 * b[k + 1, j]
                    t = t + a2 * b[k + 2, j]
                    buf[ii, j] = t + a3 * b[k + 3, j]
                k += 4
            while k < k1:
                aik = a[i0 + ii, k]
                for j in range(n):
                    buf[ii, j] += aik * b[k, j]
                k += 1
    for ii in range(rows):
        for j in range(n):
            c[i0 + ii, j] += buf[ii, j]


@njit(cache=True)
def _gemm(a, b, c):
    # c += a @ b with square tiles; k ascends per output element, matching
    # the reference kernel's accumulation order exactly.
    m = a.shape[0]
    for i0 in range(0, m, _TILE):
        _gemm_stripe(a, b, c, i0, min(i0 + _TILE, m))


@njit(cache=True, parallel=True)
def _gemm_par(a, b, c):
    m = a.shape[0]
    stripes = (m + _TILE - 1) // _TILE
    for s in prange(stripes):
        i0 = s * _TILE
        _gemm_stripe(a, b, c, i0, min(i0 + _TILE, m))


@njit(cache=True)
def _dw_channel(img, w, out, ch, stride):
    oh = out.shape[1]
    ow = out.shape[2]
    kh = w.shape[2]
    kw = w.shape[3]
    for oy in range(oh):
        iy0 = oy * stride
        for ox in range(ow):
            ix0 = ox * stride
            acc = np.float32(0.0)
            for u in range(kh):
                for v in range(kw):
                    acc += img[ch, iy0 + u, ix0 + v] * w[ch, 0, u, v]
            out[ch, oy, ox] = acc


@njit(cache=True)
def _dwconv(img, w, out, stride):
    for ch in range(out.shape[0]):
        _dw_channel(img, w, out, ch, stride)


@njit(cache=True, parallel=True)
def _dwconv_par(img, w, out, stride):
    for ch in prange(out.shape[0]):
        _dw_channel(img, w, out, ch, stride)


def conv2d_ref(
    x: Tensor,
    weights: ConvWeights,
    spec: ConvSpec,
    counter: MacCounter | None = None,
) -> Tensor:
    """Direct nested-loop convolution; the correctness and count oracle."""
    oh, ow = _check_call(x, weights, spec)
    xp = _padded(x.data, spec)
    out = np.empty((x.shape.n, spec.c_out, oh, ow), dtype=np.float32)
    macs = _conv_ref_loops(xp, weights.w, out, spec.stride)
    if counter is not None:
        counter.add(int(macs))
    if weights.bias is not None:
        out += weights.bias.reshape(1, -1, 1, 1)
    return Tensor(out)


def conv2d_fast(
    x: Tensor, weights: ConvWeights, spec: ConvSpec, threads: int = 1
) -> Tensor:
    """Per-group patch-gather plus tiled matmul; depthwise goes direct."""
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    oh, ow = _check_call(x, weights, spec)
    xp = _padded(x.data, spec)
    out = np.empty((x.shape.n, spec.c_out, oh, ow), dtype=np.float32)
    parallel = threads > 1
    if parallel:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    cg = spec.c_in // spec.groups
    cpg = spec.c_out // spec.groups
    depthwise = spec.groups == spec.c_in == spec.c_out
    pointwise = (
        spec.kh == 1
        and spec.kw == 1
        and spec.stride == 1
        and spec.pad == (0, 0, 0, 0)
    )
    gemm = _gemm_par if parallel else _gemm
    dw = _dwconv_par if parallel else _dwconv
    for i in range(x.shape.n):
        if depthwise:
            dw(xp[i], weights.w, out[i], spec.stride)
            continue
        for g in range(spec.groups):
            a = weights.w[g * cpg : (g + 1) * cpg].reshape(cpg, cg * spec.kh * spec.kw)
            if pointwise:
                b = xp[i, g * cg : (g + 1) * cg].reshape(cg, oh * ow)
            else:
                b = np.empty((cg * spec.kh * spec.kw, oh * ow), dtype=np.float32)
                _im2col(xp[i], g * cg, cg, spec.kh, spec.kw, spec.stride, oh, ow, b)
            dst = out[i, g * cpg : (g + 1) * cpg].reshape(cpg, oh * ow)
            dst[:] = 0.0
            gemm(a, b, dst)
    if weights.bias is not None:
        out += weights.bias.reshape(1, -1, 1, 1)
    return Tensor(out)


def fold_batchnorm(
    weights: ConvWeights, scale: np.ndarray, shift: np.ndarray
) -> ConvWeights:
    """Fold a per-channel scale/shift into conv weights and bias."""
    scale = np.asarray(scale, dtype=np.float32)
    shift = np.asarray(shift, dtype=np.float32)
    c_out = weights.w.shape[0]
    if scale.shape != (c_out,) or shift.shape != (c_out,):
        raise ValueError(
            f"scale/shift must both have shape ({c_out},), got "
            f"{scale.shape} and {shift.shape}"
        )
    w = (weights.w * scale.reshape(-1, 1, 1, 1)).astype(np.float32)
    base = weights.bias if weights.bias is not None else np.zeros(c_out, np.float32)
    bias = (shift + scale * base).astype(np.float32)
    return ConvWeights(w=w, bias=bias)


_GELU_SQRT_2_OVER_PI = np.float32(0.7978845608)
_GELU_CUBIC = np.float32(0.044715)

ACTIVATIONS = ("relu", "gelu", "none")


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation; "gelu" is the tanh approximation."""
    if kind == "none":
        return x
    if kind == "relu":
        return Tensor(np.maximum(x.data, np.float32(0.0)))
    if kind == "gelu":
        d = x.data
        inner = _GELU_SQRT_2_OVER_PI * (d + _GELU_CUBIC * d * d * d)
        return Tensor(
            (np.float32(0.5) * d * (np.float32(1.0) + np.tanh(inner))).astype(
                np.float32
            )
        )
    raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling by integer factor on both spatial axes."""
    if not isinstance(factor, int) or factor < 1:
        raise ValueError(f"factor must be a positive int, got {factor!r}")
    if factor == 1:
        return x
    data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    return Tensor(np.ascontiguousarray(data))


@dataclass
class OracleCase:
    spec: ConvSpec
    h: int
    w: int
    batch: int
    rel_err: float
    count_ok: bool
    group_ok: bool

    @property
    def ok(self) -> bool:
        return self.count_ok and self.group_ok and self.rel_err <= 1e-4

    def describe(self) -> str:
        s = self.spec
        return (
            f"c{s.c_in}->{s.c_out} k{s.kh}x{s.kw} s{s.stride} g{s.groups} "
            f"pad{s.pad} @{self.h}x{self.w} n{self.batch}: "
            f"rel_err={self.rel_err:.3g} count_ok={self.count_ok} "
            f"group_ok={self.group_ok}"
        )


@dataclass
class OracleReport:
    cases: list[OracleCase]

    @property
    def failures(self) -> list[OracleCase]:
        return [c for c in self.cases if not c.ok]

    @property
    def worst_rel_err(self) -> float:
        return max((c.rel_err for c in self.cases), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.failures


def _group_split_check(
    x: Tensor, weights: ConvWeights, spec: ConvSpec, full: Tensor
) -> bool:
    """Grouped conv must equal per-group ungrouped convs, concatenated."""
    cg = spec.c_in // spec.groups
    cpg = spec.c_out // spec.groups
    pieces = []
    for g in range(spec.groups):
        sub_spec = ConvSpec(
            c_in=cg,
            c_out=cpg,
            kh=spec.kh,
            kw=spec.kw,
            stride=spec.stride,
            pad=spec.pad,
            groups=1,
            has_bias=False,
        )
        sub_x = Tensor(np.ascontiguousarray(x.data[:, g * cg : (g + 1) * cg]))
        sub_w = ConvWeights(w=np.ascontiguousarray(weights.w[g * cpg : (g + 1) * cpg]))
        pieces.append(conv2d_ref(sub_x, sub_w, sub_spec).data)
    merged = Tensor(np.ascontiguousarray(np.concatenate(pieces, axis=1)))
    return max_rel_err(merged, full) <= 1e-6


def run_oracle_check(
    cases: int = 200,
    seed: int = 0,
    channels_max: int = 64,
    resolutions: tuple[int, ...] = (7, 14, 28),
    fast: Callable[..., Tensor] | None = None,
) -> OracleReport:
    """Randomized equivalence and count-exactness sweep at desk sizes.

    Each case compares `conv2d_fast` against the counted reference kernel
    and the closed-form MAC count; grouped cases also check the per-group
    split decomposition.
    """
    if cases < 1:
        raise ValueError(f"cases must be >= 1, got {cases}")
    rng = random.Random(seed)
    run_fast = fast if fast is not None else conv2d_fast
    report = OracleReport(cases=[])
    for i in range(cases):
        c_in = 4 * rng.randint(1, channels_max // 4)
        kh = rng.choice((1, 2, 3))
        kw = kh if rng.random() < 0.8 else rng.choice((1, 2, 3))
        stride = rng.choice((1, 2))
        h = rng.choice(resolutions)
        w = h if rng.random() < 0.8 else rng.choice(resolutions)
        choices = [g for g in (1, 2, 4) if c_in % g == 0]
        if rng.random() < 0.25:
            groups = c_in  # depthwise
            c_out = c_in
        else:
            groups = rng.choice(choices)
            c_out = groups * rng.randint(1, max(1, channels_max // groups))
        pad = same_padding(kh, kw, stride, h, w)
        spec = ConvSpec(
            c_in=c_in,
            c_out=c_out,
            kh=kh,
            kw=kw,
            stride=stride,
            pad=pad,
            groups=groups,
            has_bias=rng.random() < 0.5,
        )
        batch = 2 if rng.random() < 0.15 else 1
        case_seed = derive_seed(seed, i)
        x = random_uniform(Shape4(batch, c_in, h, w), case_seed)
        wts = init_conv_weights(spec, derive_seed(case_seed, 1))
        counter = MacCounter()
        ref = conv2d_ref(x, wts, spec, counter=counter)
        oh, ow = spec.out_dims(h, w)
        expect = batch * conv_macs(kh, kw, c_in, c_out, oh, ow, groups)
        got = run_fast(x, wts, spec)
        group_ok = True
        if groups > 1 and groups < c_in:
            unbiased = ConvWeights(w=wts.w)
            bare_spec = ConvSpec(
                c_in=c_in, c_out=c_out, kh=kh, kw=kw, stride=stride,
                pad=pad, groups=groups, has_bias=False,
            )
            full = conv2d_ref(x, unbiased, bare_spec)
            group_ok = _group_split_check(x, unbiased, bare_spec, full)
        report.cases.append(
            OracleCase(
                spec=spec,
                h=h,
                w=w,
                batch=batch,
                rel_err=max_rel_err(ref, got),
                count_ok=counter.macs == expect,
                group_ok=group_ok,
            )
        )
    return report
