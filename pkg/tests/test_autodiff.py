import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from dloss import autodiff as ad
from dloss.errors import BatchTooSmallError, InsufficientScoresError, ShapeError

from conftest import oracle_pairwise, rng


def graph64():
    return ad.Graph(np.float64)


class TestMatmul:
    def test_identity(self):
        g = graph64()
        out = ad.matmul(g.tensor(np.eye(2)), g.tensor([[1.0, 2.0], [3.0, 4.0]]))
        assert_allclose(out.values, [[1, 2], [3, 4]])

    def test_unit_row_selection(self):
        g = graph64()
        out = ad.matmul(g.tensor([[1.0, 0.0]]), g.tensor([[2.0], [5.0]]))
        assert_allclose(out.values, [[2.0]])

    def test_shape_mismatch_names_both(self):
        g = graph64()
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(g.tensor(np.zeros((2, 3))), g.tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        a = rng(0).normal(size=(3, 4))
        b = rng(1).normal(size=(4, 2))
        err = ad.finite_difference_check(
            lambda ta, tb: ad.tensor_sum(ad.mul(ad.matmul(ta, tb), ad.matmul(ta, tb))),
            [a, b], 1e-5)
        assert err < 1e-4


class TestRelu:
    def test_basic(self):
        g = graph64()
        assert_allclose(ad.relu(g.tensor([-1.0, 0.0, 2.0])).values, [0, 0, 2])

    def test_all_negative_zero_output_and_gradient(self):
        g = graph64()
        x = g.tensor([-3.0, -1.0, -0.5], requires_grad=True)
        out = ad.relu(x)
        assert_allclose(out.values, 0)
        grads = ad.backward(ad.tensor_sum(out))
        assert_allclose(grads[x.node_id], 0)

    def test_gradient_away_from_kink(self):
        x = rng(2).normal(size=(4, 3))
        x[np.abs(x) < 1e-3] = 0.5
        err = ad.finite_difference_check(
            lambda t: ad.tensor_sum(ad.relu(t)), [x], 1e-5)
        assert err < 1e-4


class TestL2NormalizeRows:
    def test_three_four_five(self):
        g = graph64()
        out = ad.l2_normalize_rows(g.tensor([[3.0, 4.0]]))
        assert_allclose(out.values, [[0.6, 0.8]])

    def test_zero_row_guard(self):
        g = graph64()
        out = ad.l2_normalize_rows(g.tensor([[0.0, 0.0, 0.0]]), eps=1e-12)
        assert_allclose(out.values, 0)
        assert np.isfinite(out.values).all()

    def test_random_rows_unit_norm_and_gradient(self):
        x = rng(3).normal(size=(5, 8))
        g = graph64()
        out = ad.l2_normalize_rows(g.tensor(x))
        norms = np.linalg.norm(out.values, axis=1)
        assert_allclose(norms, 1.0, atol=1e-6)
        err = ad.finite_difference_check(
            lambda t: ad.tensor_sum(ad.mul(ad.l2_normalize_rows(t), ad.l2_normalize_rows(t))),
            [x], 1e-5)
        assert err < 1e-4


class TestPairwiseDistances:
    def test_three_four_five_triangle(self):
        g = graph64()
        d = ad.pairwise_distances(g.tensor([[0.0, 0.0], [3.0, 4.0]]))
        assert abs(d.values[0, 1] - 5.0) < 1e-6
        assert abs(d.values[1, 0] - 5.0) < 1e-6

    def test_identical_rows_near_zero(self):
        g = graph64()
        d = ad.pairwise_distances(g.tensor(np.ones((4, 3)) * 0.7))
        assert d.values.max() <= 1e-7

    def test_diagonal_at_eps_floor(self):
        g = graph64()
        d = ad.pairwise_distances(g.tensor(rng(4).normal(size=(5, 3))))
        assert np.diag(d.values).max() <= math.sqrt(ad.DISTANCE_EPS) + 1e-15

    def test_matches_double_loop_oracle(self):
        e = rng(5).normal(size=(6, 4))
        g = graph64()
        d = ad.pairwise_distances(g.tensor(e))
        expected = oracle_pairwise(e)
        off = ~np.eye(6, dtype=bool)
        assert_allclose(d.values[off], expected[off], atol=1e-6)

    def test_symmetry_and_nonnegativity(self):
        for seed in range(5):
            e = rng(seed).normal(size=(7, 5))
            g = graph64()
            d = ad.pairwise_distances(g.tensor(e)).values
            assert np.abs(d - d.T).max() < 1e-9
            assert (d >= 0).all()

    def test_batch_too_small(self):
        g = graph64()
        with pytest.raises(BatchTooSmallError):
            ad.pairwise_distances(g.tensor([[1.0, 2.0]]))

    def test_gradient(self):
        e = rng(6).normal(size=(5, 3))
        err = ad.finite_difference_check(
            lambda t: ad.tensor_sum(ad.pairwise_distances(t)), [e], 1e-5)
        assert err < 1e-4


class TestMaskedMoments:
    def test_two_values(self):
        g = graph64()
        mean, var = ad.masked_moments(g.tensor([0.0, 2.0]))
        assert mean.item() == 1.0
        assert var.item() == 1.0

    def test_constant_values_zero_variance(self):
        g = graph64()
        _, var = ad.masked_moments(g.tensor([3.0, 3.0, 3.0]))
        assert var.item() == 0.0

    def test_matches_two_pass_oracle(self):
        values = rng(7).normal(size=50)
        mask = rng(8).random(50) < 0.5
        mask[:2] = True  # ensure >= 2 selected
        g = graph64()
        mean, var = ad.masked_moments(g.tensor(values), mask)
        sel = values[mask]
        mu = sum(sel) / len(sel)
        assert abs(mean.item() - mu) < 1e-9
        assert abs(var.item() - sum((x - mu) ** 2 for x in sel) / len(sel)) < 1e-9

    def test_duplication_preserves_moments_bitwise(self):
        values = rng(9).normal(size=17)
        g = graph64()
        mean1, var1 = ad.masked_moments(g.tensor(values))
        mean2, var2 = ad.masked_moments(g.tensor(np.concatenate([values, values])))
        assert mean1.item() == mean2.item()
        assert var1.item() == var2.item()

    def test_insufficient_selection_identifies_caller(self):
        g = graph64()
        with pytest.raises(InsufficientScoresError, match="genuine"):
            ad.masked_moments(g.tensor([1.0, 2.0, 3.0]),
                              np.array([True, False, False]), name="genuine")

    def test_gradients(self):
        values = rng(10).normal(size=12)
        mask = np.arange(12) % 3 != 0

        def mean_fn(t):
            mean, _ = ad.masked_moments(t, mask)
            return mean

        def var_fn(t):
            _, var = ad.masked_moments(t, mask)
            return var

        assert ad.finite_difference_check(mean_fn, [values], 1e-5) < 1e-4
        assert ad.finite_difference_check(var_fn, [values], 1e-5) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        g = graph64()
        w = g.tensor(rng(11).normal(size=(3, 4)), requires_grad=True)
        grads = ad.backward(ad.tensor_sum(w))
        assert_allclose(grads[w.node_id], 1.0)

    def test_half_squared_norm_gives_w(self):
        g = graph64()
        values = rng(12).normal(size=(4, 2))
        w = g.tensor(values, requires_grad=True)
        loss = ad.tensor_sum(ad.mul(w, w)) * 0.5
        grads = ad.backward(loss)
        assert np.array_equal(grads[w.node_id], values)

    def test_non_scalar_rejected(self):
        g = graph64()
        w = g.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ad.backward(w)

    def test_deterministic_bitwise(self):
        g = graph64()
        w = g.tensor(rng(13).normal(size=(6, 3)), requires_grad=True)
        d = ad.pairwise_distances(ad.l2_normalize_rows(w))
        mean, var = ad.masked_moments(ad.take(d, np.arange(36)))
        loss = ad.sqrt(var + 1e-12) + mean
        g1 = ad.backward(loss)
        g2 = ad.backward(loss)
        assert np.array_equal(g1[w.node_id], g2[w.node_id])

    def test_unreached_parameter_gets_zeros(self):
        g = graph64()
        used = g.tensor([1.0, 2.0], requires_grad=True)
        unused = g.tensor([5.0], requires_grad=True)
        grads = ad.backward(ad.tensor_sum(used))
        assert_allclose(grads[unused.node_id], 0.0)

    def test_composite_chain_matches_finite_differences(self):
        e = rng(14).normal(size=(8, 4))
        mask = np.arange(64) % 2 == 0

        def fn(t):
            d = ad.pairwise_distances(ad.l2_normalize_rows(t))
            mean, var = ad.masked_moments(ad.take(d, np.arange(64)), mask)
            other_mean, other_var = ad.masked_moments(ad.take(d, np.arange(64)), ~mask)
            spread = ad.sqrt((var + other_var) * 0.5 + 1e-24)
            return ad.absolute(other_mean - mean) / spread

        assert ad.finite_difference_check(fn, [e], 1e-5) < 1e-4


class TestFiniteDifferenceCheck:
    def test_quadratic_near_exact(self):
        err = ad.finite_difference_check(
            lambda t: ad.mul(t, t), [np.array(3.0)], 1e-5)
        assert err < 1e-9

    def test_abs_away_from_kink(self):
        err = ad.finite_difference_check(
            lambda t: ad.absolute(t), [np.array(1.0)], 1e-5)
        assert err < 1e-8

    def test_step_must_be_positive(self):
        with pytest.raises(ShapeError):
            ad.finite_difference_check(lambda t: t, [np.array(1.0)], 0.0)


class TestElementwiseOps:
    def test_scalar_and_bias_broadcast(self):
        g = graph64()
        m = g.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        bias = g.tensor([10.0, 20.0], requires_grad=True)
        out = m + bias
        assert_allclose(out.values, [[11, 22], [13, 24]])
        grads = ad.backward(ad.tensor_sum(out * 2.0))
        assert_allclose(grads[bias.node_id], [4.0, 4.0])
        assert_allclose(grads[m.node_id], 2.0)

    def test_rejected_broadcast(self):
        g = graph64()
        with pytest.raises(ShapeError):
            g.tensor(np.zeros((2, 3))) + g.tensor(np.zeros((3, 2)))

    def test_mixed_graph_rejected(self):
        a = graph64().tensor([1.0])
        b = graph64().tensor([1.0])
        with pytest.raises(ShapeError):
            ad.add(a, b)

    def test_exp_log_sqrt_div_gradients(self):
        x = np.abs(rng(15).normal(size=6)) + 0.5

        def fn(t):
            return ad.tensor_sum(ad.log(ad.exp(ad.sqrt(t)) / (t + 1.0)))

        assert ad.finite_difference_check(fn, [x], 1e-6) < 1e-4

    def test_sum_axis1(self):
        g = graph64()
        m = g.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], requires_grad=True)
        out = ad.tensor_sum(m, axis=1)
        assert_allclose(out.values, [6.0, 15.0])
        grads = ad.backward(ad.tensor_sum(out * out))
        assert_allclose(grads[m.node_id], [[12.0] * 3, [30.0] * 3])

    def test_take_gathers_and_scatters(self):
        g = graph64()
        m = g.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        out = ad.take(m, np.array([0, 3, 3]))
        assert_allclose(out.values, [1.0, 4.0, 4.0])
        grads = ad.backward(ad.tensor_sum(out))
        assert_allclose(grads[m.node_id], [[1.0, 0.0], [0.0, 2.0]])

    def test_forward_values_stay_finite(self):
        # zero rows, coincident rows and tiny values: the documented eps
        # rules keep every op's output finite
        g = graph64()
        x = g.tensor(np.zeros((3, 4)), requires_grad=True)
        d = ad.pairwise_distances(ad.l2_normalize_rows(x))
        assert np.isfinite(d.values).all()
