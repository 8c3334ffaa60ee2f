import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from pvmc.metrics import (
    WeightedSample,
    effective_sample_size,
    gaussian_w2,
    ksd,
    median_heuristic_bandwidth,
    posterior_mean_error,
    spd_sqrt,
)


def _uniform(points):
    points = np.atleast_2d(points)
    return WeightedSample(points, np.full(points.shape[0], -math.log(points.shape[0])))


def _std_score(X):
    return -X


class TestMeanError:
    def test_zero(self, rng):
        m = rng.standard_normal((4, 3))
        assert posterior_mean_error(m, m) == 0.0

    def test_constant_offset(self):
        exact = np.zeros((6, 5))
        assert posterior_mean_error(exact + 0.3, exact) == pytest.approx(0.3 * math.sqrt(5), rel=1e-14)
        assert posterior_mean_error(exact + 0.3, exact, squared=True) == pytest.approx(0.45, rel=1e-14)

    def test_averages_over_time(self):
        exact = np.zeros((2, 1))
        assert posterior_mean_error([[1.0], [3.0]], exact) == pytest.approx(2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            posterior_mean_error(np.zeros((3, 2)), np.zeros((3, 3)))


class TestW2:
    def test_identical(self, rng):
        L = rng.standard_normal((3, 3))
        S = L @ L.T + np.eye(3)
        assert gaussian_w2(np.ones(3), S, np.ones(3), S) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift(self):
        assert gaussian_w2([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-14)

    def test_scalar_scale(self):
        assert gaussian_w2([0.0], [[4.0]], [0.0], [[1.0]]) == pytest.approx(1.0, abs=1e-14)

    def test_commuting_covariances(self):
        want = (math.sqrt(2) - 1) ** 2 + (math.sqrt(3) - math.sqrt(5)) ** 2
        assert gaussian_w2(np.zeros(2), np.diag([2.0, 3.0]), np.zeros(2), np.diag([1.0, 5.0])) == pytest.approx(want, abs=1e-13)

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            gaussian_w2([0.0], [[-1.0]], [0.0], [[1.0]])

    def test_empirical_transport(self):
        rng = np.random.default_rng(0)
        m1, S1 = np.array([0.0, 1.0]), np.array([[1.0, 0.6], [0.6, 2.0]])
        m2, S2 = np.array([0.5, 0.0]), np.array([[0.5, -0.2], [-0.2, 1.0]])
        n = 2000
        # couple each sample through its whitened version so the assignment is sharp
        z = rng.standard_normal((n, 2))
        a = m1 + z @ np.linalg.cholesky(S1).T
        b = m2 + rng.standard_normal((n, 2)) @ np.linalg.cholesky(S2).T
        cost = cdist(a, b, "sqeuclidean")
        rows, cols = linear_sum_assignment(cost)
        assert cost[rows, cols].mean() == pytest.approx(gaussian_w2(m1, S1, m2, S2), rel=0.05)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetric_and_triangle(self, seed):
        rng = np.random.default_rng(seed)
        gs = []
        for _ in range(3):
            L = rng.standard_normal((2, 2))
            gs.append((rng.standard_normal(2), L @ L.T + 0.1 * np.eye(2)))
        d = lambda i, j: math.sqrt(max(gaussian_w2(*gs[i], *gs[j]), 0.0))
        assert gaussian_w2(*gs[0], *gs[1]) == pytest.approx(gaussian_w2(*gs[1], *gs[0]), abs=1e-9)
        assert d(0, 2) <= d(0, 1) + d(1, 2) + 1e-9

    def test_sqrt(self, rng):
        L = rng.standard_normal((3, 3))
        S = L @ L.T + np.eye(3)
        root = spd_sqrt(S)
        np.testing.assert_allclose(root @ root, S, atol=1e-12)


class TestKSD:
    def test_single_point_at_mode(self):
        assert ksd(_uniform([[0.0, 0.0, 0.0]]), _std_score, 1.5) == pytest.approx(3 / 1.5**2, abs=1e-14)

    def test_non_negative(self, rng):
        for _ in range(20):
            sample = WeightedSample(rng.standard_normal((10, 2)), np.log(rng.dirichlet(np.ones(10))))
            assert ksd(sample, _std_score, 1.0) >= 0.0

    def test_permutation_invariant(self, rng):
        pts = rng.standard_normal((12, 2))
        log_w = np.log(rng.dirichlet(np.ones(12)))
        perm = rng.permutation(12)
        a = ksd(WeightedSample(pts, log_w), _std_score, 0.8)
        b = ksd(WeightedSample(pts[perm], log_w[perm]), _std_score, 0.8)
        assert a == pytest.approx(b, rel=1e-12)

    def test_prefers_the_target(self):
        rng = np.random.default_rng(3)
        good = _uniform(rng.standard_normal((400, 2)))
        bad = _uniform(rng.standard_normal((400, 2)) + 1.0)
        assert ksd(good, _std_score, 1.0) < ksd(bad, _std_score, 1.0)

    def test_shrinks_with_sample_size(self):
        rng = np.random.default_rng(4)
        small = np.mean([ksd(_uniform(rng.standard_normal((20, 1))), _std_score, 1.0) for _ in range(30)])
        large = np.mean([ksd(_uniform(rng.standard_normal((500, 1))), _std_score, 1.0) for _ in range(30)])
        assert large < small

    def test_bad_bandwidth(self):
        with pytest.raises(ValueError):
            ksd(_uniform([[0.0]]), _std_score, 0.0)

    def test_unnormalised_weights(self):
        with pytest.raises(ValueError):
            WeightedSample(np.zeros((2, 1)), np.zeros(2))


class TestBandwidth:
    def test_three_points_on_a_line(self):
        assert median_heuristic_bandwidth([np.array([[0.0], [1.0], [3.0]])]) == pytest.approx(2.0)

    def test_pools_sets(self):
        a = np.array([[0.0], [1.0]])
        b = np.array([[0.0], [3.0]])
        assert median_heuristic_bandwidth([a, b]) == pytest.approx(math.sqrt(5.0))

    def test_degenerate(self):
        with pytest.raises(ValueError):
            median_heuristic_bandwidth([np.zeros((3, 2))])
        with pytest.raises(ValueError):
            median_heuristic_bandwidth([np.zeros((1, 2))])


class TestESS:
    def test_uniform(self):
        assert effective_sample_size(np.full(8, -math.log(8))) == pytest.approx(8.0)

    def test_one_hot(self):
        assert effective_sample_size([0.0, -np.inf, -np.inf]) == pytest.approx(1.0)

    def test_uneven(self):
        assert effective_sample_size(np.log([0.5, 0.25, 0.25])) == pytest.approx(8.0 / 3.0)
