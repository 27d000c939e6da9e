"""Closed-form MAC formulas, exact rational ratios, and model totals."""

from fractions import Fraction

import pytest

from cpubone.arch import cpubone_spec
from cpubone.kernels import (
    ConvSpec,
    MacCounter,
    conv2d_ref,
    init_conv_weights,
    same_padding,
)
from cpubone.macs import (
    conv_macs,
    fumbconv_macs,
    grouped_fused_ratio,
    grouped_mbconv_ratio,
    kernel_area_ratio,
    kernel_reduction_ratio_grfused,
    mbconv_macs,
    model_macs,
)
from cpubone.tensor import Shape4, random_uniform


class TestConvMacs:
    def test_reference_values(self):
        assert conv_macs(3, 3, 64, 64, 14, 14, 1) == 7_225_344
        assert conv_macs(3, 3, 64, 64, 14, 14, 2) == 3_612_672
        assert conv_macs(1, 1, 64, 64, 14, 14, 1) == 802_816
        # depthwise: one filter per channel
        assert conv_macs(3, 3, 64, 64, 14, 14, 64) == 3 * 3 * 64 * 14 * 14

    def test_groups_divide_count(self):
        assert conv_macs(3, 3, 8, 8, 4, 4, 4) == conv_macs(3, 3, 8, 8, 4, 4, 1) // 4

    def test_rejects_bad_groups(self):
        with pytest.raises(ValueError):
            conv_macs(3, 3, 6, 8, 4, 4, 4)  # 4 does not divide 6
        with pytest.raises(ValueError):
            conv_macs(3, 3, 8, 6, 4, 4, 4)  # 4 does not divide 6

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            conv_macs(0, 3, 8, 8, 4, 4, 1)
        with pytest.raises(ValueError):
            conv_macs(3, 3, 8, 8, -1, 4, 1)


class TestBlockFormulas:
    def test_fused_reference_values(self):
        assert fumbconv_macs(64, 4, 3, 3, 14, 14, 1) == 32_112_640
        assert fumbconv_macs(64, 4, 3, 3, 14, 14, 2) == 17_661_952
        assert fumbconv_macs(64, 4, 2, 2, 14, 14, 1) == 16_056_320

    def test_unfused_reference_values(self):
        assert mbconv_macs(64, 4, 3, 3, 14, 14, 1) == 6_874_112
        assert mbconv_macs(64, 4, 3, 3, 14, 14, 2) == 5_268_480

    def test_fused_is_sum_of_parts(self):
        c, e, h = 32, 4, 7
        expected = conv_macs(3, 3, c, e * c, h, h, 2) + conv_macs(
            1, 1, e * c, c, h, h, 1
        )
        assert fumbconv_macs(c, e, 3, 3, h, h, 2) == expected

    def test_unfused_is_sum_of_parts(self):
        c, e, h = 32, 4, 7
        hidden = e * c
        expected = (
            conv_macs(1, 1, c, hidden, h, h, 2)
            + conv_macs(3, 3, hidden, hidden, h, h, hidden)
            + conv_macs(1, 1, hidden, c, h, h, 1)
        )
        assert mbconv_macs(c, e, 3, 3, h, h, 2) == expected


class TestCounterAgreement:
    """Closed-form formulas against the instrumented reference kernel."""

    @pytest.mark.parametrize(
        "c_in,c_out,k,stride,groups,res",
        [
            (8, 12, 3, 1, 2, 14),
            (16, 16, 3, 2, 4, 14),
            (16, 16, 2, 1, 16, 7),
            (24, 48, 1, 1, 1, 7),
            (6, 9, 3, 1, 3, 9),
        ],
    )
    def test_counter_matches_formula(self, c_in, c_out, k, stride, groups, res):
        pad = same_padding(k, k, stride, res, res)
        spec = ConvSpec(
            c_in=c_in, c_out=c_out, kh=k, kw=k, stride=stride, pad=pad,
            groups=groups,
        )
        x = random_uniform(Shape4(1, c_in, res, res), seed=1)
        w = init_conv_weights(spec, seed=2)
        counter = MacCounter()
        conv2d_ref(x, w, spec, counter)
        oh, ow = spec.out_dims(res, res)
        assert counter.macs == conv_macs(k, k, c_in, c_out, oh, ow, groups)


class TestExactRatios:
    def test_grouped_fused_is_11_20(self):
        r = grouped_fused_ratio(3, 3, 2, 4)
        assert r == Fraction(11, 20)
        assert float(r) == 0.55

    def test_grouped_fused_matches_block_formula(self):
        for c in (32, 64, 256):
            got = Fraction(
                fumbconv_macs(c, 4, 3, 3, 14, 14, 2),
                fumbconv_macs(c, 4, 3, 3, 14, 14, 1),
            )
            assert got == grouped_fused_ratio(3, 3, 2, 4)

    def test_kernel_reduction_grfused(self):
        assert kernel_reduction_ratio_grfused(1) == Fraction(1, 2)
        assert kernel_reduction_ratio_grfused(2) == Fraction(6, 11)

    def test_kernel_reduction_matches_block_formula(self):
        got = Fraction(
            fumbconv_macs(64, 4, 2, 2, 14, 14, 2),
            fumbconv_macs(64, 4, 3, 3, 14, 14, 2),
        )
        assert got == kernel_reduction_ratio_grfused(2)

    def test_kernel_area_ratio(self):
        assert kernel_area_ratio(2, 2, 3, 3) == Fraction(4, 9)
        assert kernel_area_ratio(2, 2, 3, 3) == Fraction(
            conv_macs(2, 2, 8, 8, 4, 4, 8), conv_macs(3, 3, 8, 8, 4, 4, 8)
        )

    def test_grouped_mbconv_reference_points(self):
        assert grouped_mbconv_ratio(64) == Fraction(105, 137)
        expected_pct = {32: 78.1, 64: 76.6, 128: 75.8, 256: 75.4, 512: 75.2}
        for c, pct in expected_pct.items():
            got = grouped_mbconv_ratio(c)
            assert round(float(got) * 100, 1) == pct
            # dual route: the ratio must match the block formulas exactly
            assert got == Fraction(
                mbconv_macs(c, 4, 3, 3, 14, 14, 2),
                mbconv_macs(c, 4, 3, 3, 14, 14, 1),
            )

    def test_grouped_mbconv_mean(self):
        vals = [float(grouped_mbconv_ratio(c)) for c in (32, 64, 128, 256, 512)]
        mean_pct = 100 * sum(vals) / len(vals)
        assert abs(mean_pct - 76.2) <= 0.05

    def test_ratio_type_is_exact(self):
        assert isinstance(grouped_fused_ratio(3, 3, 2, 4), Fraction)
        assert isinstance(grouped_mbconv_ratio(8), Fraction)


class TestModelMacs:
    def test_totals_are_stable(self):
        expected = {
            "B0": 523_879_296,
            "B1": 730_853_504,
            "B2": 1_343_367_360,
            "B3": 4_096_421_376,
        }
        for variant, total in expected.items():
            counts = model_macs(cpubone_spec(variant), 224, 224)
            assert counts.total == total

    def test_subtotals_partition_total(self):
        counts = model_macs(cpubone_spec("B0"), 224, 224)
        assert counts.conv_subtotal + counts.attention_subtotal == counts.total
        assert counts.total == sum(e.macs for e in counts.layers)

    def test_conv_subtotals_are_stable(self):
        assert model_macs(cpubone_spec("B0"), 224, 224).conv_subtotal == 266_690_560
        assert model_macs(cpubone_spec("B2"), 224, 224).conv_subtotal == 655_994_880
        assert model_macs(cpubone_spec("B3"), 224, 224).conv_subtotal == 2_344_132_608

    def test_layer_sections(self):
        counts = model_macs(cpubone_spec("B0"), 224, 224)
        sections = {e.section for e in counts.layers}
        assert sections == {"conv", "attention"}
        names = [e.name for e in counts.layers]
        assert names[0] == "stem"
        assert names[-1] == "head"
