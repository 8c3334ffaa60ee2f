"""Self-checks run by ``pvmc validate``: oracle agreement and structural invariants."""

from __future__ import annotations

import math
import operator
import re

import numpy as np
from scipy.stats import multivariate_normal

from .baselines import kalman_filter, rts_smooth
from .elbo import elbo_estimates, elbo_value_and_gradient
from .logspace import log_matmul, log_sum_exp
from .oracle import brute_force_marginals, enumerate_trajectory_weights
from .scan import prefix_suffix_scan
from .smoother import (
    KernelTensor,
    ScanElement,
    compute_kernels,
    log_likelihood,
    log_likelihood_from_kernels,
    markovian_kernels,
    multiplicative_expectation,
    normalise_columns,
    pvmc_weights,
)
from .ssm import DiagonalGaussianProposal, LinearGaussianSSM, MarkovProposal, lg_build, simulate


def parse_grid(spec: str):
    """Parse ``"N=1..4,T=0..5"`` into the list of ``(N, T)`` pairs."""
    m = re.fullmatch(r"\s*N=(\d+)\.\.(\d+)\s*,\s*T=(\d+)\.\.(\d+)\s*", spec)
    if not m:
        raise ValueError(f"grid must look like 'N=1..4,T=0..5', got {spec!r}")
    n_lo, n_hi, t_lo, t_hi = map(int, m.groups())
    if n_lo < 1 or n_lo > n_hi or t_lo > t_hi:
        raise ValueError(f"empty or invalid grid {spec!r}")
    return [(N, T) for N in range(n_lo, n_hi + 1) for T in range(t_lo, t_hi + 1)]


def random_lg(rng, d_x=None, d_y=None) -> LinearGaussianSSM:
    """A perturbed benchmark model with random dimensions up to 2."""
    d_x = d_x or int(rng.integers(1, 3))
    d_y = d_y or int(rng.integers(1, d_x + 1))
    base = lg_build(d_x, d_y)
    return base.with_params(base.params + 0.3 * rng.standard_normal(base.params.size))


def random_kernels(rng, N: int, T: int) -> KernelTensor:
    """Kernels of a random linear-Gaussian instance under a random diagonal proposal."""
    lg = random_lg(rng)
    _, obs = simulate(lg, T, rng)
    prop = DiagonalGaussianProposal.constant(
        rng.standard_normal((T + 1, lg.state_dim)), 0.3 * rng.standard_normal((T + 1, lg.state_dim))
    )
    return compute_kernels(lg, prop.sample(obs, N, rng), obs)


def dense_joint_gaussian(lg: LinearGaussianSSM, T: int):
    """Mean and covariance of the stacked vector ``(x_0..x_T, y_0..y_T)``."""
    d = lg.state_dim
    means, covs = lg.prior_marginals(T)
    Sxx = np.zeros(((T + 1) * d, (T + 1) * d))
    for s in range(T + 1):
        block = covs[s]
        for t in range(s, T + 1):
            Sxx[t * d : (t + 1) * d, s * d : (s + 1) * d] = block
            Sxx[s * d : (s + 1) * d, t * d : (t + 1) * d] = block.T
            block = lg.A @ block
    Hbig = np.kron(np.eye(T + 1), lg.H_eff)
    Rbig = np.kron(np.eye(T + 1), lg.R)
    mean = np.concatenate([means.ravel(), (means @ lg.H_eff.T).ravel()])
    cov = np.block([[Sxx, Sxx @ Hbig.T], [Hbig @ Sxx, Hbig @ Sxx @ Hbig.T + Rbig]])
    return mean, cov, (T + 1) * d


def dense_log_likelihood(lg: LinearGaussianSSM, obs) -> float:
    obs = np.atleast_2d(obs)
    mean, cov, nx = dense_joint_gaussian(lg, obs.shape[0] - 1)
    return float(multivariate_normal(mean[nx:], cov[nx:, nx:]).logpdf(obs.ravel()))


def dense_smoothing_means(lg: LinearGaussianSSM, obs) -> np.ndarray:
    obs = np.atleast_2d(obs)
    T = obs.shape[0] - 1
    mean, cov, nx = dense_joint_gaussian(lg, T)
    gain = np.linalg.solve(cov[nx:, nx:], cov[nx:, :nx]).T
    return (mean[:nx] + gain @ (obs.ravel() - mean[nx:])).reshape(T + 1, lg.state_dim)


def corrupt_combine(x: ScanElement, y: ScanElement) -> ScanElement:
    """Deliberately wrong operator (right factors multiplied in reverse order)."""
    return ScanElement(x.first, log_matmul(log_matmul(x.second, y.second), y.first))


def _check(name, passed, detail):
    return {"name": name, "passed": bool(passed), "detail": detail}


def run_checks(grid, instances: int, seed: int, corrupt_scan: bool = False):
    """Run every check; returns ``(checks, per-grid-point records)``."""
    rng = np.random.default_rng(seed)
    combine_kw = {"combine": corrupt_combine} if corrupt_scan else {}
    checks, records = [], []

    worst = worst_even = worst_cols = worst_paths = worst_perm = 0.0
    for N, T in grid:
        point_err = 0.0
        for _ in range(instances):
            kernels = random_kernels(rng, N, T)
            W, log_L = pvmc_weights(kernels, **combine_kw)
            Wb, log_Lb = brute_force_marginals(enumerate_trajectory_weights(kernels))
            err = max(float(np.max(np.abs(W - Wb))), abs(log_L - log_Lb))
            point_err = max(point_err, err)
            totals = log_sum_exp(W, axis=1)
            worst_cols = max(worst_cols, float(np.ptp(totals)))
            worst_paths = max(worst_paths, abs(log_likelihood_from_kernels(kernels) - (log_L - (T + 1) * math.log(N))))
            # relabel the particles of one step
            t = int(rng.integers(0, T + 1))
            perm = rng.permutation(N)
            logK = kernels.logK.copy()
            logK[t] = logK[t][:, perm]
            if t < T:
                logK[t + 1] = logK[t + 1][perm, :]
            W2, log_L2 = pvmc_weights(KernelTensor(logK), **combine_kw)
            worst_perm = max(worst_perm, float(np.max(np.abs(W2[t] - W[t][perm]))), abs(log_L2 - log_L))
        worst = max(worst, point_err)
        if T >= 2 and T % 2 == 0:
            worst_even = max(worst_even, point_err)
        records.append({"N": N, "T": T, "instances": instances, "max_abs_error": point_err, "passed": point_err <= 1e-9})

    checks.append(_check("oracle_equivalence", worst <= 1e-9, f"max abs log error {worst:.3g} over {len(grid)} grid points"))
    checks.append(_check("even_horizon_pad", worst_even <= 1e-9, f"max abs log error {worst_even:.3g} on even T >= 2"))
    checks.append(_check("column_consistency", worst_cols <= 1e-8, f"max spread of column totals {worst_cols:.3g}"))
    checks.append(_check("likelihood_paths_agree", worst_paths <= 1e-8, f"reduce vs scan {worst_paths:.3g}"))
    checks.append(_check("permutation_equivariance", worst_perm <= 1e-9, f"max deviation {worst_perm:.3g}"))

    # N = 1 collapse
    collapse = 0.0
    for T in range(6):
        kernels = random_kernels(rng, 1, T)
        est = elbo_estimates(kernels)
        vals = np.array([est.pvmc, est.iwae, est.pvae, est.vae])
        collapse = max(collapse, float(np.ptp(vals)))
        W, _ = pvmc_weights(kernels)
        collapse = max(collapse, float(np.max(np.abs(normalise_columns(W)))))
    checks.append(_check("n1_collapse", collapse <= 1e-10, f"max spread {collapse:.3g}"))

    # multiplicative functional with an indicator recovers a marginal weight
    kernels = random_kernels(rng, 3, 4)
    W, _ = pvmc_weights(kernels)
    ind_err = 0.0
    for t in range(kernels.T_plus_1):
        for i in range(kernels.N):
            logf = np.zeros_like(kernels.logK)
            logf[t][:, np.arange(kernels.N) != i] = -np.inf
            val = multiplicative_expectation(kernels, logf) + kernels.T_plus_1 * math.log(kernels.N)
            ind_err = max(ind_err, abs(val - W[t, i]))
    checks.append(_check("multiplicative_indicator", ind_err <= 1e-8, f"max error {ind_err:.3g}"))

    # analytic gradient against central differences
    grad_err = 0.0
    for _ in range(5):
        lg = random_lg(rng)
        T, N = int(rng.integers(0, 5)), int(rng.integers(1, 5))
        _, obs = simulate(lg, T, rng)
        prop = DiagonalGaussianProposal.affine(
            rng.standard_normal((lg.state_dim, lg.obs_dim)), rng.standard_normal(lg.state_dim), 0.3 * rng.standard_normal(lg.state_dim)
        )
        grad_err = max(grad_err, gradient_fd_error(lg, prop, obs, N, int(rng.integers(2**31))))
    checks.append(_check("gradient_fd", grad_err <= 1e-4, f"max relative error {grad_err:.3g}"))

    lg = lg_build(2, 2)
    mask = np.ones((2, 2))
    mask[0, 1] = 0.0
    lg = LinearGaussianSSM(lg.A, lg.H, lg.Q, lg.R, lg.prior_mean, lg.prior_cov, H_mask=mask)
    _, obs = simulate(lg, 3, rng)
    prop = DiagonalGaussianProposal.constant(np.zeros((4, 2)), np.zeros((4, 2)))
    _, g = elbo_value_and_gradient(lg, prop, obs, 3, np.random.default_rng(1))
    dead = g[4 + 1]
    checks.append(_check("dead_parameter_gradient", dead == 0.0, f"masked entry gradient {float(dead)}"))

    # Markov proposal that ignores the previous state
    lg = random_lg(rng)
    T = 4
    _, obs = simulate(lg, T, rng)
    d_x, d_y = lg.state_dim, lg.obs_dim
    G, c, ls = rng.standard_normal((d_x, d_y)), rng.standard_normal(d_x), 0.2 * rng.standard_normal(d_x)
    fact = DiagonalGaussianProposal.affine(G, c, ls)
    mprop = MarkovProposal(mean0=obs[0] @ G.T + c, log_std0=ls, F=np.zeros((d_x, d_x)), G=G, c=c, log_std=ls)
    grid = fact.sample(obs, 4, rng)
    same = np.array_equal(markovian_kernels(lg, mprop, grid, obs).logK, compute_kernels(lg, grid, obs).logK)
    checks.append(_check("markov_factorised_bitmatch", same, "identical kernels" if same else "kernels differ"))

    # scan against sequential recursions on integers
    scan_ok, depth_ok = True, True
    for T in range(1, 1026):
        a = list(range(1, T + 1))
        prefix, suffix, plan = prefix_suffix_scan(a, operator.add, 0)
        if T <= 33:
            scan_ok &= prefix == list(np.cumsum(a)) and suffix == list(np.cumsum(a[::-1])[::-1])
        depth_ok &= plan.depth <= plan.depth_bound()
    checks.append(_check("scan_integer_oracle", scan_ok, "lengths 1..33"))
    checks.append(_check("scan_depth_bound", depth_ok, "lengths 1..1025"))

    # baselines against dense joint Gaussians
    kf_err = rts_err = 0.0
    for _ in range(5):
        lg = random_lg(rng)
        T = int(rng.integers(0, 5))
        _, obs = simulate(lg, T, rng)
        fo = kalman_filter(lg, obs)
        kf_err = max(kf_err, abs(fo.log_likelihood - dense_log_likelihood(lg, obs)))
        means = np.stack([b.mean for b in rts_smooth(lg, fo)])
        rts_err = max(rts_err, float(np.max(np.abs(means - dense_smoothing_means(lg, obs)))))
    checks.append(_check("kalman_dense_oracle", kf_err <= 1e-8, f"max log-likelihood error {kf_err:.3g}"))
    checks.append(_check("rts_dense_oracle", rts_err <= 1e-8, f"max mean error {rts_err:.3g}"))
    return checks, records


def gradient_fd_error(lg, prop, obs, N: int, seed: int, step: float = 1e-5) -> float:
    """Max relative error of the analytic gradient against central differences."""
    _, g = elbo_value_and_gradient(lg, prop, obs, N, np.random.default_rng(seed))
    n_theta = lg.params.size
    z = np.concatenate([lg.params, prop.params])

    def f(v):
        return log_likelihood(lg.with_params(v[:n_theta]), prop.with_params(v[n_theta:]), obs, N, np.random.default_rng(seed))

    worst = 0.0
    for k in range(z.size):
        if abs(g[k]) <= 1e-6:
            continue
        up, down = z.copy(), z.copy()
        up[k] += step
        down[k] -= step
        fd = (f(up) - f(down)) / (2 * step)
        worst = max(worst, abs(g[k] - fd) / abs(g[k]))
    return worst
