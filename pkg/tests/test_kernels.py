"""Reference and fast convolution kernels, counters, and helpers."""

import numpy as np
import pytest

from cpubone.kernels import (
    ConvSpec,
    ConvWeights,
    MacCounter,
    activation,
    conv2d_fast,
    conv2d_ref,
    fold_batchnorm,
    init_conv_weights,
    nearest_upsample,
    run_oracle_check,
    same_padding,
)
from cpubone.macs import conv_macs
from cpubone.tensor import Shape4, Tensor, max_rel_err, random_uniform, zeros


class TestSamePadding:
    def test_odd_kernel_symmetric(self):
        assert same_padding(3, 3, 1, 14, 14) == (1, 1, 1, 1)
        assert same_padding(3, 3, 2, 14, 14) == (1, 1, 1, 1)
        assert same_padding(1, 1, 1, 14, 14) == (0, 0, 0, 0)

    def test_even_kernel_pads_bottom_right(self):
        assert same_padding(2, 2, 1, 14, 14) == (0, 0, 1, 1)
        assert same_padding(2, 2, 2, 14, 14) == (0, 0, 0, 0)
        assert same_padding(2, 2, 2, 7, 7) == (0, 0, 1, 1)

    @pytest.mark.parametrize("k", [1, 2, 3])
    @pytest.mark.parametrize("stride", [1, 2])
    @pytest.mark.parametrize("extent", [7, 8, 13, 14])
    def test_output_dims_cover_input(self, k, stride, extent):
        pad = same_padding(k, k, stride, extent, extent)
        spec = ConvSpec(
            c_in=4, c_out=4, kh=k, kw=k, stride=stride, pad=pad, groups=1
        )
        oh, ow = spec.out_dims(extent, extent)
        want = extent if stride == 1 else -(-extent // 2)
        assert (oh, ow) == (want, want)


class TestConvSpec:
    def test_rejects_bad_kernel(self):
        with pytest.raises(ValueError):
            ConvSpec(c_in=4, c_out=4, kh=4, kw=3, stride=1,
                     pad=(0, 0, 0, 0), groups=1)

    def test_rejects_bad_stride(self):
        with pytest.raises(ValueError):
            ConvSpec(c_in=4, c_out=4, kh=3, kw=3, stride=3,
                     pad=(1, 1, 1, 1), groups=1)

    def test_rejects_indivisible_groups(self):
        with pytest.raises(ValueError):
            ConvSpec(c_in=6, c_out=8, kh=3, kw=3, stride=1,
                     pad=(1, 1, 1, 1), groups=4)

    def test_weight_shape(self):
        spec = ConvSpec(c_in=8, c_out=12, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=2)
        assert spec.weight_shape() == (12, 4, 3, 3)


class TestOracles:
    def test_identity_pointwise(self):
        # 1x1 conv with a permutation matrix must reorder channels exactly.
        c = 6
        spec = ConvSpec(c_in=c, c_out=c, kh=1, kw=1, stride=1,
                        pad=(0, 0, 0, 0), groups=1)
        perm = np.roll(np.eye(c, dtype=np.float32), 2, axis=0)
        w = ConvWeights(w=perm.reshape(c, c, 1, 1), bias=None)
        x = random_uniform(Shape4(1, c, 5, 5), seed=4)
        for fn in (conv2d_ref, conv2d_fast):
            y = fn(x, w, spec)
            assert np.array_equal(y.data[0], np.roll(x.data[0], 2, axis=0))

    def test_box_sum_depthwise(self):
        # All-ones 3x3 depthwise over an all-ones map counts live taps:
        # 9 interior, 6 edge, 4 corner.
        c = 3
        spec = ConvSpec(c_in=c, c_out=c, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=c)
        w = ConvWeights(w=np.ones((c, 1, 3, 3), dtype=np.float32), bias=None)
        x = Tensor(np.ones((1, c, 5, 5), dtype=np.float32))
        for fn in (conv2d_ref, conv2d_fast):
            y = fn(x, w, spec).data[0, 0]
            assert y[2, 2] == 9.0
            assert y[0, 2] == 6.0
            assert y[0, 0] == 4.0

    def test_padding_taps_are_counted(self):
        # The counter includes multiplies against padded zeros, so the count
        # depends only on the output size, exactly like the closed form.
        spec = ConvSpec(c_in=4, c_out=4, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=1)
        x = random_uniform(Shape4(1, 4, 6, 6), seed=0)
        w = init_conv_weights(spec, seed=1)
        counter = MacCounter()
        conv2d_ref(x, w, spec, counter)
        assert counter.macs == conv_macs(3, 3, 4, 4, 6, 6, 1)

    def test_batch_scales_count(self):
        spec = ConvSpec(c_in=4, c_out=8, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=1)
        w = init_conv_weights(spec, seed=1)
        counts = []
        for batch in (1, 3):
            counter = MacCounter()
            conv2d_ref(random_uniform(Shape4(batch, 4, 7, 7), 0), w, spec, counter)
            counts.append(counter.macs)
        assert counts[1] == 3 * counts[0]


class TestFastVsRef:
    @pytest.mark.parametrize(
        "c_in,c_out,k,stride,groups,res,batch,bias",
        [
            (8, 12, 3, 1, 2, 14, 1, False),
            (12, 12, 3, 1, 4, 9, 2, True),
            (16, 16, 3, 2, 16, 14, 1, False),
            (16, 16, 2, 1, 16, 7, 1, True),
            (16, 32, 2, 2, 2, 7, 1, False),
            (24, 48, 1, 1, 1, 7, 2, True),
        ],
    )
    def test_matches_reference(self, c_in, c_out, k, stride, groups, res, batch, bias):
        pad = same_padding(k, k, stride, res, res)
        spec = ConvSpec(c_in=c_in, c_out=c_out, kh=k, kw=k, stride=stride,
                        pad=pad, groups=groups, has_bias=bias)
        x = random_uniform(Shape4(batch, c_in, res, res), seed=3)
        w = init_conv_weights(spec, seed=5)
        if bias:
            w = ConvWeights(
                w=w.w,
                bias=random_uniform(Shape4(1, 1, 1, c_out), seed=6).data.ravel(),
            )
        ref = conv2d_ref(x, w, spec)
        fast = conv2d_fast(x, w, spec)
        assert max_rel_err(ref, fast) <= 1e-4

    def test_group_split_equivalence(self):
        # A grouped conv must equal independent convs over channel slices.
        c_in, c_out, groups, res = 12, 18, 3, 10
        spec = ConvSpec(c_in=c_in, c_out=c_out, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=groups)
        x = random_uniform(Shape4(1, c_in, res, res), seed=7)
        w = init_conv_weights(spec, seed=8)
        full = conv2d_fast(x, w, spec)
        cg, cpg = c_in // groups, c_out // groups
        sub = ConvSpec(c_in=cg, c_out=cpg, kh=3, kw=3, stride=1,
                       pad=(1, 1, 1, 1), groups=1)
        for g in range(groups):
            xg = Tensor(np.ascontiguousarray(x.data[:, g * cg:(g + 1) * cg]))
            wg = ConvWeights(w=w.w[g * cpg:(g + 1) * cpg], bias=None)
            part = conv2d_fast(xg, wg, sub)
            got = Tensor(np.ascontiguousarray(full.data[:, g * cpg:(g + 1) * cpg]))
            assert max_rel_err(got, part) <= 1e-6

    def test_threads_clamp_and_agree(self):
        spec = ConvSpec(c_in=16, c_out=24, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=2)
        x = random_uniform(Shape4(1, 16, 14, 14), seed=1)
        w = init_conv_weights(spec, seed=2)
        single = conv2d_fast(x, w, spec, threads=1)
        multi = conv2d_fast(x, w, spec, threads=4)
        assert np.array_equal(single.data, multi.data)

    def test_rejects_bad_threads(self):
        spec = ConvSpec(c_in=4, c_out=4, kh=1, kw=1, stride=1,
                        pad=(0, 0, 0, 0), groups=1)
        x = random_uniform(Shape4(1, 4, 4, 4), seed=0)
        w = init_conv_weights(spec, seed=0)
        with pytest.raises(ValueError):
            conv2d_fast(x, w, spec, threads=0)

    def test_deterministic(self):
        spec = ConvSpec(c_in=8, c_out=8, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=1)
        x = random_uniform(Shape4(1, 8, 12, 12), seed=9)
        w = init_conv_weights(spec, seed=10)
        a = conv2d_fast(x, w, spec)
        b = conv2d_fast(x, w, spec)
        assert np.array_equal(a.data, b.data)


class TestWeightsAndFolding:
    def test_init_deterministic_and_bounded(self):
        spec = ConvSpec(c_in=8, c_out=16, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=2)
        a = init_conv_weights(spec, seed=3)
        b = init_conv_weights(spec, seed=3)
        assert np.array_equal(a.w, b.w)
        fan_in = (8 // 2) * 9
        assert np.abs(a.w).max() <= 1.0 / np.sqrt(fan_in)

    def test_fold_batchnorm_matches_post_scaling(self):
        spec = ConvSpec(c_in=6, c_out=9, kh=3, kw=3, stride=1,
                        pad=(1, 1, 1, 1), groups=3, has_bias=True)
        x = random_uniform(Shape4(1, 6, 8, 8), seed=0)
        w = init_conv_weights(spec, seed=1)
        scale = random_uniform(Shape4(1, 1, 1, 9), seed=2, lo=0.5, hi=1.5).data.ravel()
        shift = random_uniform(Shape4(1, 1, 1, 9), seed=3).data.ravel()
        folded = fold_batchnorm(ConvWeights(w=w.w, bias=None), scale, shift)
        y_folded = conv2d_fast(x, folded, spec)
        plain_spec = ConvSpec(c_in=6, c_out=9, kh=3, kw=3, stride=1,
                              pad=(1, 1, 1, 1), groups=3)
        y_plain = conv2d_fast(x, ConvWeights(w=w.w, bias=None), plain_spec)
        want = y_plain.data * scale.reshape(1, -1, 1, 1) + shift.reshape(1, -1, 1, 1)
        # scaling each product before accumulation instead of scaling the
        # accumulated sum shifts f32 rounding by a few ulps per term
        assert max_rel_err(y_folded, Tensor(want.astype(np.float32))) <= 1e-4

    def test_fold_identity_keeps_weights(self):
        spec = ConvSpec(c_in=4, c_out=4, kh=1, kw=1, stride=1,
                        pad=(0, 0, 0, 0), groups=1)
        w = init_conv_weights(spec, seed=5)
        folded = fold_batchnorm(w, np.ones(4), np.zeros(4))
        assert np.array_equal(folded.w, w.w)
        assert np.all(folded.bias == 0.0)

    def test_fold_rejects_bad_shapes(self):
        spec = ConvSpec(c_in=4, c_out=4, kh=1, kw=1, stride=1,
                        pad=(0, 0, 0, 0), groups=1)
        w = init_conv_weights(spec, seed=5)
        with pytest.raises(ValueError):
            fold_batchnorm(w, np.ones(3), np.zeros(4))


class TestActivationAndUpsample:
    def test_gelu_known_values(self):
        x = Tensor(np.array([[[[0.0, 1.0, -1.0, 3.0]]]], dtype=np.float32))
        y = activation(x, "gelu").data.ravel()
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.8412, abs=1e-4)
        assert y[2] == pytest.approx(-0.1588, abs=1e-4)
        assert y[3] == pytest.approx(2.9964, abs=1e-3)

    def test_relu_and_none(self):
        x = Tensor(np.array([[[[-2.0, 0.5]]]], dtype=np.float32))
        assert activation(x, "relu").data.ravel().tolist() == [0.0, 0.5]
        assert activation(x, "none") is x

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            activation(zeros((1, 1, 1, 1)), "swish")

    def test_nearest_upsample_replicates(self):
        x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        y = nearest_upsample(x, 2)
        assert y.shape.as_tuple() == (1, 1, 4, 4)
        assert np.array_equal(
            y.data[0, 0],
            np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]],
                     dtype=np.float32),
        )

    def test_upsample_factor_one_is_identity(self):
        x = random_uniform((1, 2, 3, 3), seed=0)
        assert nearest_upsample(x, 1) is x


class TestOracleHarness:
    def test_small_run_is_clean(self):
        report = run_oracle_check(cases=40, seed=1)
        assert report.ok
        assert len(report.cases) == 40
        assert report.worst_rel_err <= 1e-4

    def test_detects_corrupted_fast_path(self):
        def corrupted(x, w, spec, threads=1):
            out = conv2d_fast(x, w, spec, threads)
            out.data[0, 0, 0, 0] += 0.5
            return out

        report = run_oracle_check(cases=10, seed=1, fast=corrupted)
        assert not report.ok
        assert report.failures
        assert "rel_err" in report.failures[0].describe()
