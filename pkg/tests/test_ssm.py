import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from pvmc.ssm import (
    DiagonalGaussianProposal,
    GaussianProposal,
    LinearGaussianSSM,
    MarkovProposal,
    SSMSpec,
    lg_as_ssm,
    lg_build,
    prior_proposal,
    read_sequence_csv,
    sample_proposal,
    simulate,
    write_sequence_csv,
)


class TestLgBuild:
    def test_scalar(self):
        lg = lg_build(1, 1)
        assert lg.A.tolist() == [[0.38]]
        assert lg.H.tolist() == [[1.0]]

    def test_two_dims(self):
        np.testing.assert_allclose(lg_build(2, 2).A, [[0.38, 0.1444], [0.1444, 0.38]], rtol=1e-15)

    def test_benchmark_first_row(self):
        lg = lg_build(5, 5)
        np.testing.assert_allclose(lg.A[0], [0.38, 0.1444, 0.054872, 0.02085136, 0.0079235168], rtol=1e-14)
        np.testing.assert_array_equal(lg.A, lg.A.T)
        for k in range(5):
            assert np.all(np.diag(lg.A, k) == lg.A[0, k])

    def test_benchmark_noise_and_prior(self):
        lg = lg_build(5, 3)
        np.testing.assert_array_equal(lg.H, np.eye(3, 5))
        np.testing.assert_array_equal(lg.Q, np.eye(5))
        np.testing.assert_array_equal(lg.R, np.eye(3))
        np.testing.assert_array_equal(lg.prior_mean, np.zeros(5))

    def test_rejects_wide_observation(self):
        with pytest.raises(ValueError):
            lg_build(2, 3)

    def test_rejects_non_spd_noise(self):
        lg = lg_build(2, 2)
        with pytest.raises(ValueError):
            LinearGaussianSSM(lg.A, lg.H, -np.eye(2), lg.R, lg.prior_mean, lg.prior_cov)

    def test_params_round_trip(self, rng):
        lg = lg_build(3, 2)
        theta = rng.standard_normal(lg.params.size)
        np.testing.assert_array_equal(lg.with_params(theta).params, theta)


class TestDensities:
    def test_zero_residual_transition(self):
        ssm = lg_as_ssm(lg_build(1, 1))
        x_prev = np.array([1.7])
        assert ssm.transition_logpdf(1, 0.38 * x_prev, x_prev) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_prior_mode(self):
        ssm = lg_as_ssm(lg_build(2, 2))
        assert ssm.prior_logpdf(np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)

    def test_normalisation_by_quadrature(self):
        lg = lg_build(1, 1)
        lg = LinearGaussianSSM(lg.A, lg.H, [[0.7]], [[1.3]], [0.2], [[2.0]])
        ssm = lg_as_ssm(lg)
        grid = np.linspace(-15, 15, 20001)[:, None]
        dx = grid[1, 0] - grid[0, 0]
        assert np.exp(ssm.transition_logpdf(1, grid, np.array([0.9]))).sum() * dx == pytest.approx(1.0, abs=1e-6)
        assert np.exp(ssm.prior_logpdf(grid)).sum() * dx == pytest.approx(1.0, abs=1e-6)

    def test_against_dense_mvn(self, rng):
        lg = lg_build(3, 2)
        lg = lg.with_params(lg.params + 0.2 * rng.standard_normal(lg.params.size))
        L = rng.standard_normal((3, 3))
        Q = L @ L.T + np.eye(3)
        lg = LinearGaussianSSM(lg.A, lg.H, Q, [[2.0, 0.3], [0.3, 1.0]], lg.prior_mean, lg.prior_cov)
        ssm = lg_as_ssm(lg)
        x_prev, x, y = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(2)
        want = multivariate_normal(lg.A @ x_prev, Q).logpdf(x)
        assert ssm.transition_logpdf(1, x, x_prev) == pytest.approx(want, abs=1e-10)
        want = multivariate_normal(lg.H @ x, lg.R).logpdf(y)
        assert ssm.observation_logpdf(1, y, x) == pytest.approx(want, abs=1e-10)

    def test_transition_table_layout(self, rng):
        ssm = lg_as_ssm(lg_build(2, 2))
        X_prev, X = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
        table = ssm.transition_logpdf(1, X[None, :, :], X_prev[:, None, :])
        assert table[2, 0] == pytest.approx(ssm.transition_logpdf(1, X[0], X_prev[2]), abs=1e-14)


class TestSimulate:
    def test_degenerate_horizon(self, rng):
        xs, ys = simulate(lg_build(2, 1), 0, rng)
        assert xs.shape == (1, 2) and ys.shape == (1, 1)

    def test_noise_free_limit(self, rng):
        lg = lg_build(1, 1)
        lg = LinearGaussianSSM(lg.A, lg.H, [[1e-12]], [[1e-12]], [0.0], [[1.0]])
        xs, ys = simulate(lg, 6, rng)
        np.testing.assert_allclose(ys[:, 0], 0.38 ** np.arange(7) * xs[0, 0], atol=1e-5)

    def test_first_step_mean(self):
        lg = lg_build(1, 1)
        draws = np.array([simulate(lg, 1, np.random.default_rng(s))[0][1, 0] for s in range(20000)])
        assert abs(draws.mean()) < 3 * draws.std() / math.sqrt(len(draws))

    def test_deterministic(self):
        a = simulate(lg_build(2, 2), 5, np.random.default_rng(3))
        b = simulate(lg_build(2, 2), 5, np.random.default_rng(3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_missing_sampler(self, rng):
        ssm = lg_as_ssm(lg_build(1, 1))
        bare = SSMSpec(1, 1, ssm.prior_logpdf, ssm.transition_logpdf, ssm.observation_logpdf)
        with pytest.raises(ValueError):
            simulate(bare, 3, rng)


class TestProposals:
    def test_zero_variance_limit(self, rng):
        means = rng.standard_normal((4, 2))
        prop = DiagonalGaussianProposal.constant(means, -20.0)
        grid = sample_proposal(prop, np.zeros((4, 1)), 1, rng)
        np.testing.assert_allclose(grid.states[:, 0, :], means, atol=1e-7)

    def test_log_std_is_clamped(self, rng):
        prop = DiagonalGaussianProposal.constant(np.zeros((2, 1)), -50.0)
        _, stds = prop.marginals(np.zeros((2, 1)))
        assert np.all(stds == math.exp(-20.0))

    def test_monte_carlo_mean(self):
        means = np.array([[0.5, -1.0], [2.0, 0.0]])
        prop = DiagonalGaussianProposal.constant(means, [[0.0, 0.5], [-0.5, 0.0]])
        grid = sample_proposal(prop, np.zeros((2, 1)), 100000, np.random.default_rng(0))
        se = grid.states.std(axis=1) / math.sqrt(100000)
        assert np.all(np.abs(grid.states.mean(axis=1) - means) < 3 * se)

    def test_same_seed_same_grid(self):
        prop = DiagonalGaussianProposal.constant(np.zeros((3, 2)), 0.0)
        a = sample_proposal(prop, np.zeros((3, 1)), 5, np.random.default_rng(9))
        b = sample_proposal(prop, np.zeros((3, 1)), 5, np.random.default_rng(9))
        np.testing.assert_array_equal(a.states, b.states)

    def test_horizon_mismatch(self, rng):
        prop = DiagonalGaussianProposal.constant(np.zeros((3, 2)), 0.0)
        with pytest.raises(ValueError):
            sample_proposal(prop, np.zeros((4, 1)), 2, rng)

    def test_factorisation(self, rng):
        obs = rng.standard_normal((5, 2))
        prop = DiagonalGaussianProposal.affine(rng.standard_normal((3, 2)), rng.standard_normal(3), [0.1, -0.2, 0.3])
        grid = sample_proposal(prop, obs, 4, rng)
        means, stds = prop.marginals(obs)
        joint = sum(
            multivariate_normal(means[t], np.diag(stds[t] ** 2)).logpdf(grid.states[t, n]) for t in range(5) for n in range(4)
        )
        assert grid.proposal_logpdf.sum() == pytest.approx(joint, abs=1e-10)

    def test_affine_params_round_trip(self, rng):
        prop = DiagonalGaussianProposal.affine(rng.standard_normal((2, 3)), rng.standard_normal(2), [0.0, 1.0])
        phi = rng.standard_normal(prop.params.size)
        np.testing.assert_array_equal(prop.with_params(phi).params, phi)

    def test_full_covariance_proposal(self, rng):
        covs = np.stack([np.array([[1.0, 0.5], [0.5, 2.0]])] * 3)
        prop = GaussianProposal(rng.standard_normal((3, 2)), covs)
        grid = prop.sample(np.zeros((3, 1)), 4, rng)
        want = multivariate_normal(prop.means[1], covs[1]).logpdf(grid.states[1])
        np.testing.assert_allclose(grid.proposal_logpdf[1], want, atol=1e-12)

    def test_prior_proposal_matches_marginals(self):
        lg = lg_build(2, 2)
        prop = prior_proposal(lg, 3)
        _, covs = lg.prior_marginals(3)
        _, stds = prop.marginals(np.zeros((4, 2)))
        np.testing.assert_allclose(stds**2, np.diagonal(covs, axis1=1, axis2=2), rtol=1e-14)

    def test_markov_proposal_conditional(self, rng):
        obs = rng.standard_normal((4, 1))
        mprop = MarkovProposal([0.0], [0.0], [[0.5]], [[1.0]], [0.1], [-0.3])
        grid = mprop.sample(obs, 3, rng)
        for t in range(1, 4):
            mean = obs[t] + 0.1 + 0.5 * grid.states[t - 1]
            want = multivariate_normal(0.0, math.exp(-0.6)).logpdf((grid.states[t] - mean)[:, 0])
            np.testing.assert_allclose(grid.proposal_logpdf[t], want, atol=1e-12)


def test_sequence_csv_round_trip(tmp_path, rng):
    values = rng.standard_normal((6, 3))
    path = tmp_path / "obs.csv"
    write_sequence_csv(path, values)
    assert path.read_text().splitlines()[0] == "y0,y1,y2"
    np.testing.assert_array_equal(read_sequence_csv(path), values)
