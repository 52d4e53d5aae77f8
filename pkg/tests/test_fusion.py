"""Fusion modules: stacking, the three fusion kinds, their exact
equivalences, parameter counts, and the prediction-strategy audit."""

import numpy as np
import numpy.testing as npt
import pytest

from cfnet.fusion import (
    FusionParams,
    fuse_conv,
    fuse_lc,
    fuse_sum,
    fusion_param_count,
    init_conv,
    init_lc,
    init_sum,
    prediction_strategy_audit,
    stack_branches,
)


def _random_stack(seed, n=2, k=6, s=3, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, k, s)).astype(dtype)


class TestStack:
    def test_single_branch_adds_trailing_axis(self):
        g = np.array([[1.0, 2.0]])
        stacked, _ = stack_branches([g])
        assert stacked.shape == (1, 2, 1)
        npt.assert_array_equal(stacked[:, :, 0], g)

    def test_two_branch_layout(self):
        a = np.array([[1.0, 2.0]])
        b = np.array([[3.0, 4.0]])
        stacked, _ = stack_branches([a, b])
        npt.assert_array_equal(stacked[0], [[1.0, 3.0], [2.0, 4.0]])

    def test_unstack_round_trip(self):
        rng = np.random.default_rng(0)
        gaps = [rng.uniform(-1, 1, (3, 4)) for _ in range(3)]
        stacked, bwd = stack_branches(gaps)
        for original, split in zip(gaps, bwd(stacked)):
            npt.assert_array_equal(split, original)

    def test_ragged_shapes_rejected(self):
        with pytest.raises(ValueError, match="ragged"):
            stack_branches([np.zeros((2, 3)), np.zeros((2, 4))])


class TestFuseLc:
    def test_arithmetic_mean_weights(self):
        """Weights 1/3, bias 0, branch rows [3,6],[0,3],[3,0] -> [2,3]."""
        gaps = [np.array([[3.0, 6.0]]), np.array([[0.0, 3.0]]),
                np.array([[3.0, 0.0]])]
        stacked, _ = stack_branches(gaps)
        params = FusionParams("lc", np.full((2, 3), 1.0 / 3.0), np.zeros(2))
        out, _ = fuse_lc(stacked, params)
        npt.assert_allclose(out, [[2.0, 3.0]], atol=1e-12)

    def test_unit_weights_reduce_to_sum(self):
        g = _random_stack(1)
        params = FusionParams("lc", np.ones((6, 3)), np.zeros(6))
        lc_out, _ = fuse_lc(g, params)
        sum_out, _ = fuse_sum(g)
        assert lc_out.tobytes() == sum_out.tobytes()

    def test_relu_clamps_negative_preactivation(self):
        g = np.full((1, 2, 3), 1.0)
        weight = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
        out, _ = fuse_lc(g, FusionParams("lc", weight, np.zeros(2)))
        npt.assert_array_equal(out, [[0.0, 3.0]])


class TestFuseSum:
    def test_single_branch_identity_on_nonneg(self):
        g = np.abs(_random_stack(2, s=1))
        out, _ = fuse_sum(g)
        npt.assert_array_equal(out, g[:, :, 0])

    def test_two_rows(self):
        stacked, _ = stack_branches([np.array([[1.0, 2.0]]),
                                     np.array([[3.0, 4.0]])])
        out, _ = fuse_sum(stacked)
        npt.assert_array_equal(out, [[4.0, 6.0]])

    def test_gradient_is_masked_broadcast(self):
        g = _random_stack(3)
        out, bwd = fuse_sum(g)
        dout = np.ones_like(out)
        dg = bwd(dout)
        mask = (g.sum(axis=2) > 0).astype(g.dtype)
        for s in range(g.shape[2]):
            npt.assert_array_equal(dg[:, :, s], mask)


class TestFuseConv:
    def test_unit_filter_equals_sum_bitwise(self):
        g = _random_stack(4)
        conv_out, _ = fuse_conv(g, np.ones(3), 0.0)
        sum_out, _ = fuse_sum(g)
        assert conv_out.tobytes() == sum_out.tobytes()

    def test_one_hot_filter_selects_branch(self):
        g = _random_stack(5)
        for j in range(3):
            selector = np.zeros(3)
            selector[j] = 1.0
            out, _ = fuse_conv(g, selector, 0.0)
            npt.assert_array_equal(out, np.maximum(g[:, :, j], 0))

    def test_tied_rows_equal_lc_bitwise(self):
        g = _random_stack(6)
        rng = np.random.default_rng(7)
        shared = rng.uniform(-1, 1, 3)
        bias = rng.uniform(-1, 1)
        conv_out, _ = fuse_conv(g, shared, bias)
        tied = FusionParams("lc", np.tile(shared, (6, 1)), np.full(6, bias))
        lc_out, _ = fuse_lc(g, tied)
        assert conv_out.tobytes() == lc_out.tobytes()


class TestParamCounts:
    def test_table_values(self):
        assert fusion_param_count("sum", 192, 3) == 0
        assert fusion_param_count("conv", 192, 3) == 4
        assert fusion_param_count("lc", 192, 3) == 768

    def test_lc_minus_conv_identity(self):
        for k in (1, 2, 5, 192):
            for s in (1, 2, 3, 7):
                diff = (fusion_param_count("lc", k, s)
                        - fusion_param_count("conv", k, s))
                assert diff == (k - 1) * (s + 1)

    def test_init_param_counts_match(self):
        assert init_lc(192, 3).param_count() == 768
        assert init_conv(3).param_count() == 4
        assert init_sum().param_count() == 0


class TestPredictionStrategyAudit:
    def test_direct_counts(self):
        audit = prediction_strategy_audit(192, 10, 3, "lc")
        assert audit.eflp_direct == 10 * 193 + 768 == 2698
        assert audit.eplf_direct == 3 * 10 * 193 + 768 == 6558

    def test_formula_fields(self):
        audit = prediction_strategy_audit(192, 10, 3, "lc")
        assert audit.eflp_formula == 3 * 11 + 768
        assert audit.eplf_formula == 3 * 192 * 11 + 768

    def test_single_branch_degenerate(self):
        audit = prediction_strategy_audit(16, 4, 1, "sum")
        assert audit.eflp_direct == audit.eplf_direct

    def test_eflp_cheaper_for_multiple_branches(self):
        for s in (2, 3, 5):
            audit = prediction_strategy_audit(64, 10, s, "lc")
            assert audit.eflp_direct < audit.eplf_direct


class TestInitLc:
    def test_one_third_weights(self):
        p = init_lc(4, 3, dtype=np.float64)
        npt.assert_array_equal(p.weight, np.full((4, 3), 1.0 / 3.0))

    def test_quarter_weights_for_four_branches(self):
        p = init_lc(4, 4, dtype=np.float64)
        npt.assert_array_equal(p.weight, np.full((4, 4), 0.25))

    def test_zero_bias(self):
        npt.assert_array_equal(init_lc(5, 2).bias, np.zeros(5))

    def test_init_scales_sum_on_nonneg_inputs(self):
        """At init, lc fusion equals (1/S) * sum fusion for nonneg stacks."""
        g = np.abs(_random_stack(8, dtype=np.float64))
        lc_out, _ = fuse_lc(g, init_lc(6, 3, dtype=np.float64))
        sum_out, _ = fuse_sum(g)
        npt.assert_allclose(lc_out, sum_out / 3.0, atol=1e-12, rtol=0)
