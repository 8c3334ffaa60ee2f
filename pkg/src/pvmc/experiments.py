"""Experiment drivers shared by the command line and the acceptance tests."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .baselines import bootstrap_pf, kalman_filter, kalman_proposal, rts_smooth, stack_beliefs
from .elbo import elbo_estimates, fit_proposal
from .metrics import WeightedSample, gaussian_w2, ksd, median_heuristic_bandwidth, posterior_mean_error
from .smoother import compute_kernels, posterior_moments, pvmc_smooth, pvmc_weights
from .ssm import DiagonalGaussianProposal, ParticleGrid, lg_build, prior_proposal, simulate


def replication_seed(seed: int, replication: int) -> int:
    """Independent per-replication seed derived by spawning from ``seed``."""
    return int(np.random.SeedSequence(seed, spawn_key=(replication,)).generate_state(1)[0])


def build_proposal(kind: str, lg, obs, N: int, rng, fit_steps: int = 200, fit_step_size: float = 0.01):
    T = np.atleast_2d(obs).shape[0] - 1
    if kind == "kalman":
        return kalman_proposal(lg, obs)
    if kind == "prior":
        return prior_proposal(lg, T)
    if kind == "learned":
        d_x, d_y = lg.state_dim, lg.obs_dim
        init = DiagonalGaussianProposal.affine(np.zeros((d_x, d_y)), np.zeros(d_x), np.zeros(d_x))
        prop, _ = fit_proposal(lg, obs, init, fit_steps, fit_step_size, N, rng)
        return prop
    raise ValueError(f"unknown proposal kind {kind!r}")


# --- linear-Gaussian experiment -------------------------------------------


@dataclass
class LGReplication:
    method: str
    seed: int
    e_x: float
    w2: float
    wall_time_seconds: float
    ksd_points: np.ndarray  # points at the KSD time step
    ksd_log_w: np.ndarray
    exact_mean: np.ndarray  # smoothing posterior at the KSD time step
    exact_cov: np.ndarray
    reference_points: np.ndarray  # exact posterior draws for the bandwidth heuristic


def _weighted_moments(points, log_w):
    w = np.exp(log_w)
    means = np.einsum("tn,tnd->td", w, points)
    c = points - means[:, None, :]
    return means, np.einsum("tn,tnd,tne->tde", w, c, c)


def run_lg_replication(config, replication: int) -> LGReplication:
    seed = replication_seed(config.seed, replication)
    rng = np.random.default_rng(seed)
    lg = lg_build(config.d_x, config.d_y)
    _, obs = simulate(lg, config.T, rng)
    fo = kalman_filter(lg, obs)
    exact = rts_smooth(lg, fo)
    exact_means, exact_covs = stack_beliefs(exact)
    t_ksd = min(config.ksd_time, config.T)
    n_ref = 64

    start = time.monotonic()
    if config.method == "pvmc":
        prop = build_proposal(config.proposal_kind, lg, obs, config.N, rng, config.fit_steps, config.fit_step_size)
        res = pvmc_smooth(lg, prop, obs, config.N, rng)
        means, covs = posterior_moments(res)
        points, log_w = res.particles.states[t_ksd], res.log_w[t_ksd]
    elif config.method == "bootstrap":
        pf = bootstrap_pf(lg, obs, config.N, rng)
        means, covs = _weighted_moments(pf.particles, pf.log_w)
        points, log_w = pf.particles[t_ksd], pf.log_w[t_ksd]
    elif config.method in ("kalman", "rts"):
        beliefs = fo.beliefs if config.method == "kalman" else exact
        means, covs = stack_beliefs(beliefs)
        b = beliefs[t_ksd]
        points = rng.multivariate_normal(b.mean, b.cov, size=n_ref)
        log_w = np.full(n_ref, -math.log(n_ref))
    else:
        raise ValueError(f"unknown method {config.method!r}")
    elapsed = time.monotonic() - start

    w2 = float(np.mean([gaussian_w2(means[t], covs[t], exact_means[t], exact_covs[t]) for t in range(config.T + 1)]))
    b = exact[t_ksd]
    return LGReplication(
        method=config.method,
        seed=seed,
        e_x=posterior_mean_error(means, exact_means, squared=True),
        w2=w2,
        wall_time_seconds=elapsed,
        ksd_points=points,
        ksd_log_w=log_w,
        exact_mean=b.mean,
        exact_cov=b.cov,
        reference_points=rng.multivariate_normal(b.mean, b.cov, size=n_ref),
    )


def _lg_task(args):
    config, r = args
    return run_lg_replication(config, r)


def run_lg_experiment(config):
    """All replications plus KSD values under the pooled median-heuristic bandwidth.

    Returns a list of row dictionaries and the bandwidth.
    """
    tasks = [(config, r) for r in range(config.replications)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            reps = list(pool.map(_lg_task, tasks))
    else:
        reps = [_lg_task(t) for t in tasks]
    bandwidth = median_heuristic_bandwidth([r.reference_points for r in reps])
    rows = []
    for r in reps:
        precision = np.linalg.inv(r.exact_cov)
        score = lambda X, m=r.exact_mean, P=precision: -(X - m) @ P
        value = ksd(WeightedSample(r.ksd_points, r.ksd_log_w), score, bandwidth)
        rows.append(
            {
                "method": r.method,
                "e_x": r.e_x,
                "ksd": value,
                "w2": r.w2,
                "wall_time_seconds": r.wall_time_seconds,
                "seed": r.seed,
            }
        )
    return rows, bandwidth


# --- ELBO hierarchy --------------------------------------------------------

HIERARCHY_SIZES = (1, 2, 4, 8)


def elbo_samples(config):
    """Per-replication ELBO estimates for ``N`` in 1, 2, 4, 8 on nested particle grids.

    Every replication draws one grid of 8 particles per step; the smaller
    particle counts use its leading columns.
    """
    lg = lg_build(config.d_x, config.d_y)
    _, obs = simulate(lg, config.T, np.random.default_rng(config.seed))
    log_py = kalman_filter(lg, obs).log_likelihood
    prop = build_proposal(config.proposal_kind, lg, obs, max(HIERARCHY_SIZES), np.random.default_rng(config.seed))
    n_max = max(HIERARCHY_SIZES)
    out = {name: np.empty((config.replications, len(HIERARCHY_SIZES))) for name in ("pvmc", "iwae", "pvae", "vae")}
    for r in range(config.replications):
        grid = prop.sample(obs, n_max, np.random.default_rng(replication_seed(config.seed, r)))
        for k, N in enumerate(HIERARCHY_SIZES):
            sub = ParticleGrid(grid.states[:, :N], grid.proposal_logpdf[:, :N])
            est = elbo_estimates(compute_kernels(lg, sub, obs))
            for name in out:
                out[name][r, k] = getattr(est, name)
    return out, log_py


def hierarchy_report(samples, log_py, z: float = 2.0):
    """Means, standard errors and the ordering checks, each allowed ``z`` standard errors of slack."""
    R = samples["pvmc"].shape[0]
    col = {N: k for k, N in enumerate(HIERARCHY_SIZES)}

    def series(name, N):
        return samples[name][:, col[N]]

    def se(x):
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    means = {f"{name}_{N}": float(np.mean(series(name, N))) for name in samples for N in HIERARCHY_SIZES}
    ses = {f"{name}_{N}": se(series(name, N)) for name in samples for N in HIERARCHY_SIZES}

    checks = []

    def greater(label, hi, lo):
        diff = hi - lo
        gap, err = float(np.mean(diff)), se(diff)
        checks.append({"inequality": label, "gap": gap, "se": err, "holds": bool(gap >= -z * err)})

    vae = series("vae", 8)
    greater("log_p_y >= pvmc_8", np.full(R, log_py), series("pvmc", 8))
    greater("pvmc_8 >= pvmc_4", series("pvmc", 8), series("pvmc", 4))
    greater("pvmc_4 >= iwae_8", series("pvmc", 4), series("iwae", 8))
    greater("iwae_8 >= iwae_2", series("iwae", 8), series("iwae", 2))
    greater("iwae_2 >= vae", series("iwae", 2), vae)
    for N in HIERARCHY_SIZES:
        greater(f"pvmc_{N} >= vae", series("pvmc", N), vae)

    collapse = max(
        float(np.max(np.abs(series(name, 1) - series("pvmc", 1)))) for name in ("iwae", "pvae", "vae")
    )
    return {
        "replications": R,
        "log_p_y": log_py,
        "means": means,
        "standard_errors": ses,
        "inequalities": checks,
        "n1_collapse_max_abs_diff": collapse,
        "n1_collapse_holds": bool(collapse <= 1e-10),
        "all_hold": bool(all(c["holds"] for c in checks) and collapse <= 1e-10),
    }


# --- scan benchmark ---------------------------------------------------------


def bench_row(steps: int, N: int, seed: int):
    """Time the weight scan on ``steps`` time steps of a 1-D linear-Gaussian model."""
    lg = lg_build(1, 1)
    rng = np.random.default_rng(seed)
    _, obs = simulate(lg, steps - 1, rng)
    grid = prior_proposal(lg, steps - 1).sample(obs, N, rng)
    kernels = compute_kernels(lg, grid, obs)
    start = time.monotonic()
    _, _, plan = pvmc_weights(kernels, with_plan=True)
    elapsed = time.monotonic() - start
    return {
        "T": steps,
        "N": N,
        "scan_elements": plan.element_count,
        "depth": plan.depth,
        "depth_bound": plan.depth_bound(),
        "combine_invocations": plan.combine_invocations,
        "combine_bound": 4 * plan.element_count,
        "wall_time_seconds": elapsed,
    }
