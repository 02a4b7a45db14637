import numpy as np
import pytest

from promptalign.ot import (DiscreteMeasure, SinkhornDivergence, SinkhornSettings,
                            exact_ot_uniform, ot_cost_gradient, sinkhorn,
                            sinkhorn_batched)

TIGHT = SinkhornSettings(lam=0.01, max_iterations=5000, tolerance=1e-12)


def uniform(n):
    return DiscreteMeasure.uniform(n)


class TestDiscreteMeasure:
    def test_uniform_weights_exact(self):
        m = DiscreteMeasure.uniform(4)
        np.testing.assert_array_equal(m.weights, np.full(4, 0.25))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="strictly positive"):
            DiscreteMeasure([0.0, 1.0])

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum"):
            DiscreteMeasure([0.5, 0.6])


class TestSinkhorn:
    def test_single_point(self):
        res = sinkhorn(uniform(1), uniform(1), [[0.3]])
        np.testing.assert_array_equal(res.plan.matrix, [[1.0]])
        assert res.transport_cost == 0.3
        assert res.objective == 0.3

    def test_zero_cost_independent_coupling(self):
        res = sinkhorn(uniform(2), uniform(2), np.zeros((2, 2)))
        np.testing.assert_allclose(res.plan.matrix, np.full((2, 2), 0.25), atol=1e-12)
        assert res.transport_cost == pytest.approx(0.0, abs=1e-12)

    def test_small_lam_recovers_permutation(self):
        res = sinkhorn(uniform(2), uniform(2), [[0.0, 1.0], [1.0, 0.0]], TIGHT)
        np.testing.assert_allclose(res.plan.matrix, [[0.5, 0.0], [0.0, 0.5]], atol=1e-6)
        assert res.transport_cost == pytest.approx(0.0, abs=1e-6)

    def test_large_lam_maximal_entropy(self):
        s = SinkhornSettings(lam=1e6, max_iterations=1000, tolerance=1e-12)
        res = sinkhorn(uniform(2), uniform(2), [[0.0, 1.0], [1.0, 0.0]], s)
        np.testing.assert_allclose(res.plan.matrix, np.full((2, 2), 0.25), atol=1e-6)
        assert res.transport_cost == pytest.approx(0.5, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            sinkhorn(uniform(2), uniform(3), np.zeros((2, 2)))

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            sinkhorn(uniform(2), uniform(2), [[-0.1, 0.0], [0.0, 0.0]])

    def test_nonuniform_marginals(self):
        a = DiscreteMeasure([0.7, 0.3])
        b = DiscreteMeasure([0.2, 0.8])
        res = sinkhorn(a, b, [[0.1, 0.9], [0.4, 0.2]],
                       SinkhornSettings(lam=0.05, max_iterations=2000, tolerance=1e-10))
        assert res.plan.converged
        np.testing.assert_allclose(res.plan.matrix.sum(axis=1), a.weights, atol=1e-9)
        np.testing.assert_allclose(res.plan.matrix.sum(axis=0), b.weights, atol=1e-9)

    def test_cost_symmetry(self):
        rng = np.random.default_rng(7)
        c = rng.uniform(0, 2, (4, 5))
        s = SinkhornSettings(lam=0.1, max_iterations=3000, tolerance=1e-12)
        fwd = sinkhorn(uniform(4), uniform(5), c, s)
        bwd = sinkhorn(uniform(5), uniform(4), c.T, s)
        assert fwd.transport_cost == pytest.approx(bwd.transport_cost, abs=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_shift_covariance(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0, 2, (3, 4))
        s = SinkhornSettings(lam=0.1, max_iterations=5000, tolerance=1e-12)
        base = sinkhorn(uniform(3), uniform(4), c, s)
        shifted = sinkhorn(uniform(3), uniform(4), c + 0.7, s)
        assert shifted.transport_cost - base.transport_cost == pytest.approx(0.7, abs=1e-9)
        np.testing.assert_allclose(shifted.plan.matrix, base.plan.matrix, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_violation_decay(self, seed):
        rng = np.random.default_rng(100 + seed)
        c = rng.uniform(0, 2, (4, 4))
        tiny_tol = SinkhornSettings(lam=0.1, max_iterations=1, tolerance=1e-300)
        for k in (1, 2, 4, 8, 16):
            v_k = sinkhorn(uniform(4), uniform(4), c,
                           SinkhornSettings(0.1, k, 1e-300)).plan.marginal_violation
            v_2k = sinkhorn(uniform(4), uniform(4), c,
                            SinkhornSettings(0.1, 2 * k, 1e-300)).plan.marginal_violation
            assert v_2k <= v_k + 1e-15

    def test_unconverged_plan_returned_with_violation(self):
        rng = np.random.default_rng(5)
        c = rng.uniform(0, 2, (4, 4))
        res = sinkhorn(uniform(4), uniform(4), c, SinkhornSettings(0.1, 2, 1e-14))
        assert not res.plan.converged
        assert res.plan.iterations_used == 2
        assert res.plan.marginal_violation > 1e-14

    def test_batched_matches_solo(self):
        rng = np.random.default_rng(11)
        costs = rng.uniform(0, 2, (6, 3, 4))
        s = SinkhornSettings(lam=0.1, max_iterations=2000, tolerance=1e-10)
        batch = sinkhorn_batched(uniform(3), uniform(4), costs, s)
        for i, res in enumerate(batch):
            solo = sinkhorn(uniform(3), uniform(4), costs[i], s)
            np.testing.assert_array_equal(res.plan.matrix, solo.plan.matrix)
            assert res.transport_cost == solo.transport_cost
            assert res.plan.iterations_used == solo.plan.iterations_used


class TestExactOracle:
    def test_identity_permutation(self):
        plan, cost = exact_ot_uniform(1.0 - np.eye(3))
        assert cost == 0.0
        np.testing.assert_array_equal(plan, np.eye(3) / 3)

    def test_swap(self):
        _, cost = exact_ot_uniform([[0.0, 1.0], [1.0, 0.0]])
        assert cost == 0.0

    def test_matches_full_enumeration(self):
        import itertools
        rng = np.random.default_rng(42)
        c = rng.uniform(0, 2, (4, 4))
        _, cost = exact_ot_uniform(c)
        rows = np.arange(4)
        expected = min(c[rows, list(p)].sum() / 4
                       for p in itertools.permutations(range(4)))
        assert cost == pytest.approx(expected, abs=1e-15)

    def test_limit_enforced(self):
        with pytest.raises(ValueError, match="oracle limit"):
            exact_ot_uniform(np.zeros((9, 9)))

    def test_square_only(self):
        with pytest.raises(ValueError, match="square"):
            exact_ot_uniform(np.zeros((2, 3)))

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_sinkhorn_consistency(self, n):
        rng = np.random.default_rng(n)
        for _ in range(5):
            c = rng.uniform(0, 2, (n, n))
            _, exact = exact_ot_uniform(c)
            loose = sinkhorn(uniform(n), uniform(n), c,
                             SinkhornSettings(1e-3, 100000, 1e-8)).transport_cost
            tight = sinkhorn(uniform(n), uniform(n), c,
                             SinkhornSettings(1e-4, 100000, 1e-8)).transport_cost
            assert abs(loose - exact) <= 1e-2
            assert abs(tight - exact) <= 1e-3


class TestGradient:
    def test_zero_cost_uniform(self):
        res = sinkhorn(uniform(2), uniform(2), np.zeros((2, 2)))
        np.testing.assert_allclose(ot_cost_gradient(res.plan),
                                   np.full((2, 2), 0.25), atol=1e-12)

    def test_single_point(self):
        res = sinkhorn(uniform(1), uniform(1), [[0.4]])
        np.testing.assert_array_equal(ot_cost_gradient(res.plan), [[1.0]])

    def test_requires_convergence(self):
        rng = np.random.default_rng(2)
        res = sinkhorn(uniform(3), uniform(3), rng.uniform(0, 2, (3, 3)),
                       SinkhornSettings(0.1, 1, 1e-14))
        with pytest.raises(ValueError, match="converged"):
            ot_cost_gradient(res.plan)

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0, 2, (3, 3))
        s = SinkhornSettings(lam=0.1, max_iterations=20000, tolerance=1e-12)
        a, b = uniform(3), uniform(3)
        grad = ot_cost_gradient(sinkhorn(a, b, c, s).plan)
        step = 1e-5
        fd = np.zeros_like(c)
        for i in range(3):
            for j in range(3):
                cp, cm = c.copy(), c.copy()
                cp[i, j] += step
                cm[i, j] -= step
                fd[i, j] = (sinkhorn(a, b, cp, s).objective
                            - sinkhorn(a, b, cm, s).objective) / (2 * step)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-4
