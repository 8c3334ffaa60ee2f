"""Parallel-in-time importance smoothing over a grid of independent particles.

Particles ``X[t, n]`` are drawn independently at every time step. The
importance weight of a trajectory that picks particle ``n_t`` at each
step factorises into kernels

    K_0(n_0)        = P(X_0) H_0(y_0 | X_0) / V_0(X_0)
    K_t(n_{t-1}, n_t) = M_t(X_t | X_{t-1}) H_t(y_t | X_t) / V_t(X_t),

so summing over all ``N ** (T + 1)`` trajectories is a chain of matrix
products. The marginal weight of particle ``i`` at step ``t`` sums every
trajectory through it; all of them come out of one prefix/suffix scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .logspace import log_identity, log_matmul, log_mean_exp, log_sum_exp
from .scan import ScanPlan, parallel_reduce, prefix_suffix_scan
from .ssm import MarkovProposal, ParticleGrid, as_ssm, sample_proposal

SCHEMA_VERSION = 1


class IllPosedWeightsError(ValueError):
    """A proposal density vanished where the importance ratio needs it positive."""


@dataclass(frozen=True)
class KernelTensor:
    """Log-kernels ``logK[t, i, j]`` between particle ``i`` at ``t - 1`` and ``j`` at ``t``.

    Slab 0 depends only on ``j``; all of its rows are equal.
    """

    logK: np.ndarray  # (T+1, N, N)
    grid: Optional[ParticleGrid] = None

    def __post_init__(self):
        logK = np.asarray(self.logK, dtype=float)
        if logK.ndim != 3 or logK.shape[1] != logK.shape[2]:
            raise ValueError(f"kernel tensor must be (T+1, N, N), got {logK.shape}")
        if np.any(np.isnan(logK)) or np.any(logK == np.inf):
            raise ValueError("kernel tensor contains NaN or +inf")
        if not np.array_equal(logK[0], np.broadcast_to(logK[0, :1], logK[0].shape)):
            raise ValueError("rows of the first kernel slab must be identical")
        object.__setattr__(self, "logK", logK)

    @property
    def T_plus_1(self) -> int:
        return self.logK.shape[0]

    @property
    def N(self) -> int:
        return self.logK.shape[1]


@dataclass(frozen=True)
class ScanElement:
    """A pair of ``N x N`` log-matrices."""

    first: np.ndarray
    second: np.ndarray


def combine_elements(x: ScanElement, y: ScanElement) -> ScanElement:
    """``(C1, C2) + (D1, D2) = (C1, C2 D1 D2)`` with log-domain products."""
    return ScanElement(x.first, log_matmul(log_matmul(x.second, y.first), y.second))


def identity_element(N: int) -> ScanElement:
    """Right identity of :func:`combine_elements`."""
    eye = log_identity(N)
    return ScanElement(eye, eye)


def elements_equal(x: ScanElement, y: ScanElement, atol: float = 1e-9) -> bool:
    def close(a, b):
        same_inf = np.isneginf(a) == np.isneginf(b)
        finite = np.isfinite(a) & np.isfinite(b)
        return bool(np.all(same_inf) and np.all(np.abs(a[finite] - b[finite]) <= atol))

    return close(x.first, y.first) and close(x.second, y.second)


@dataclass(frozen=True)
class SmoothingResult:
    particles: ParticleGrid
    log_w: np.ndarray  # (T+1, N), each row log-sum-exps to zero
    log_L_hat: float
    seed: Optional[int] = None

    def write(self, directory) -> Path:
        """Write ``weights.csv``, ``particles.csv`` and ``summary.json`` into ``directory``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        Tp1, N, d = self.particles.states.shape
        np.savetxt(
            out / "weights.csv",
            np.exp(self.log_w),
            delimiter=",",
            header=",".join(f"n{n}" for n in range(N)),
            comments="",
            fmt="%.17g",
        )
        t_idx, n_idx = np.meshgrid(np.arange(Tp1), np.arange(N), indexing="ij")
        rows = np.column_stack([t_idx.ravel(), n_idx.ravel(), self.particles.states.reshape(-1, d)])
        np.savetxt(
            out / "particles.csv",
            rows,
            delimiter=",",
            header=",".join(["t", "n"] + [f"x{k}" for k in range(d)]),
            comments="",
            fmt=["%d", "%d"] + ["%.17g"] * d,
        )
        summary = {
            "schema_version": SCHEMA_VERSION,
            "log_L_hat": self.log_L_hat,
            "N": N,
            "T": Tp1 - 1,
            "seed": self.seed,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return out


# --- kernels ---------------------------------------------------------------


def _check_horizon(grid: ParticleGrid, obs) -> np.ndarray:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if grid.states.shape[0] != obs.shape[0]:
        raise ValueError(f"grid has {grid.states.shape[0]} steps but observations have {obs.shape[0]}")
    return obs


def _model_terms(ssm, grid: ParticleGrid, obs):
    """Unnormalised target log-densities, one (N, N) slab per step (slab 0 broadcast)."""
    X = grid.states
    Tp1, N, _ = X.shape
    out = np.empty((Tp1, N, N))
    out[0] = (ssm.prior_logpdf(X[0]) + ssm.observation_logpdf(0, obs[0], X[0]))[None, :]
    for t in range(1, Tp1):
        trans = ssm.transition_logpdf(t, X[t][None, :, :], X[t - 1][:, None, :])
        out[t] = trans + ssm.observation_logpdf(t, obs[t], X[t])[None, :]
    return out


def compute_kernels(ssm, grid: ParticleGrid, obs) -> KernelTensor:
    """Log-kernels for a grid sampled from a factorised proposal."""
    ssm = as_ssm(ssm)
    obs = _check_horizon(grid, obs)
    logq = np.asarray(grid.proposal_logpdf, dtype=float)
    if not np.all(np.isfinite(logq)):
        raise IllPosedWeightsError("proposal log-density is not finite at some particle")
    logK = _model_terms(ssm, grid, obs) - logq[:, None, :]
    return KernelTensor(logK, grid)


def markovian_kernels(ssm, mprop: MarkovProposal, grid: ParticleGrid, obs) -> KernelTensor:
    """Log-kernels for a grid drawn ancestrally from a Markov proposal.

    Each particle at ``t`` is treated as a draw from the equally weighted
    mixture of ``V_t(. | X[t-1, k])`` over all ``k``, so the denominator
    only depends on the particle itself and the scan applies unchanged.
    """
    ssm = as_ssm(ssm)
    obs = _check_horizon(grid, obs)
    X = grid.states
    Tp1, N, _ = X.shape
    log_denom = np.empty((Tp1, N))
    log_denom[0] = mprop.initial_logpdf(X[0])
    for t in range(1, Tp1):
        table = mprop.conditional_logpdf(obs, t, X[t][None, :, :], X[t - 1][:, None, :])
        log_denom[t] = log_mean_exp(table, axis=0)
    if not np.all(np.isfinite(log_denom)):
        raise IllPosedWeightsError("mixture proposal density is not finite at some particle")
    logK = _model_terms(ssm, grid, obs) - log_denom[:, None, :]
    return KernelTensor(logK, grid)


# --- weights ---------------------------------------------------------------


def _odd_horizon_weights(K: np.ndarray, executor=None, combine=combine_elements):
    """Unnormalised log marginal weights for an odd horizon ``T >= 3``.

    Uses the first row of slab 0 as the initial vector, so the weights
    carry no extra factor from the repeated rows.
    """
    Tp1, N, _ = K.shape
    T = Tp1 - 1
    S = (T - 1) // 2
    elements = [ScanElement(K[2 * s], K[2 * s + 1]) for s in range(S + 1)]
    prefix, suffix, plan = prefix_suffix_scan(elements, combine, identity_element(N), executor=executor)

    k0 = K[0, 0]
    W = np.empty((Tp1, N))
    # forward messages after steps 1, 3, ..., T-2 and backward messages before steps 2, 4, ..., T-1
    fwd = np.stack([prefix[s].second for s in range(S)])
    bwd = np.stack([suffix[s + 1].second for s in range(S)])
    left = log_sum_exp(k0[None, :, None] + fwd, axis=1)
    right = log_sum_exp(bwd, axis=2)
    middle = K[2 : 2 * S + 1 : 2]
    c = left[:, :, None] + middle + right[:, None, :]
    W[1 : T : 2] = log_sum_exp(c, axis=2)
    W[2 : T : 2] = log_sum_exp(c, axis=1)
    W[0] = k0 + log_sum_exp(suffix[0].second, axis=1)
    W[T] = log_sum_exp(k0[:, None] + prefix[S].second, axis=0)
    return W, plan


def marginal_log_weights(logK: np.ndarray, executor=None, combine=combine_elements):
    """Unnormalised log marginal weights ``(T+1, N)`` and the scan instrumentation.

    ``combine`` replaces the scan operator; only fault-injection checks set it.
    """
    Tp1, N, _ = logK.shape
    T = Tp1 - 1
    if T == 0:
        return logK[0, :1].copy(), ScanPlan(element_count=0)
    if T == 1:
        k0, k1 = logK[0, 0], logK[1]
        W = np.stack([k0 + log_sum_exp(k1, axis=1), log_sum_exp(k0[:, None] + k1, axis=0)])
        return W, ScanPlan(element_count=0)
    if T % 2:
        return _odd_horizon_weights(logK, executor, combine)
    padded = np.concatenate([np.zeros((1, N, N)), logK])
    W, plan = _odd_horizon_weights(padded, executor, combine)
    # every trajectory of the padded problem is counted once per row of the pad
    return W[1:] - math.log(N), plan


def pvmc_weights(kernels: KernelTensor, executor=None, with_plan: bool = False, combine=combine_elements):
    """Unnormalised log marginal weights and ``log`` of their (common) column total.

    Returns ``(log_W, log_L_hat_raw)``, plus the :class:`ScanPlan` when
    ``with_plan`` is set. ``log_L_hat_raw`` is read from column 0.
    """
    W, plan = marginal_log_weights(kernels.logK, executor, combine)
    log_L_raw = log_sum_exp(W[0])
    if with_plan:
        return W, log_L_raw, plan
    return W, log_L_raw


def normalise_columns(log_W: np.ndarray) -> np.ndarray:
    return log_W - log_sum_exp(log_W, axis=1)[:, None]


def pvmc_from_grid(ssm, grid: ParticleGrid, obs, executor=None, seed=None) -> SmoothingResult:
    kernels = compute_kernels(ssm, grid, obs)
    W, log_L_raw = pvmc_weights(kernels, executor)
    Tp1, N = W.shape
    return SmoothingResult(
        particles=grid,
        log_w=normalise_columns(W),
        log_L_hat=log_L_raw - Tp1 * math.log(N),
        seed=seed,
    )


def pvmc_smooth(ssm, prop, obs, N: int, rng: np.random.Generator, executor=None, seed=None) -> SmoothingResult:
    """Sample a particle grid from ``prop`` and compute smoothing weights and ``log L_hat``."""
    grid = sample_proposal(prop, obs, N, rng)
    return pvmc_from_grid(ssm, grid, obs, executor, seed)


def _reduce_chain(logK: np.ndarray, executor=None) -> float:
    Tp1, N, _ = logK.shape
    chain = [logK[0, :1]] + list(logK[1:]) + [np.zeros((N, 1))]
    total = parallel_reduce(chain, log_matmul, executor=executor)
    return float(total[0, 0]) - Tp1 * math.log(N)


def log_likelihood_from_kernels(kernels: KernelTensor, executor=None) -> float:
    """``log L_hat`` by a plain tree reduction of the kernel chain.

    Slab 0 enters as its single distinct row and a ones column closes the
    chain, giving ``sum over trajectories / N ** (T + 1)``.
    """
    return _reduce_chain(kernels.logK, executor)


def log_likelihood(ssm, prop, obs, N: int, rng: np.random.Generator, executor=None) -> float:
    grid = sample_proposal(prop, obs, N, rng)
    return log_likelihood_from_kernels(compute_kernels(ssm, grid, obs), executor)


def multiplicative_expectation(kernels: KernelTensor, factors, executor=None) -> float:
    """``log`` of the trajectory average of ``prod_t K_t f_t``.

    ``factors`` is either a ``(T+1, N, N)`` array of log-factors laid out
    like the kernels, or a sequence of callbacks ``f_0(x_0)`` and
    ``f_t(x_t, x_prev)`` returning log-factors and broadcasting like the
    model densities. Callbacks need the kernels to carry their grid.
    """
    logK = kernels.logK
    if isinstance(factors, (list, tuple)) and factors and callable(factors[0]):
        if kernels.grid is None:
            raise ValueError("factor callbacks need kernels computed from a particle grid")
        if len(factors) != kernels.T_plus_1:
            raise ValueError("need one factor per time step")
        X = kernels.grid.states
        logf = np.empty_like(logK)
        logf[0] = np.asarray(factors[0](X[0]), dtype=float)[None, :]
        for t in range(1, kernels.T_plus_1):
            logf[t] = factors[t](X[t][None, :, :], X[t - 1][:, None, :])
    else:
        logf = np.broadcast_to(np.asarray(factors, dtype=float), logK.shape)
    if np.any(np.isnan(logf)) or np.any(logf == np.inf):
        raise ValueError("log-factors must be finite or -inf")
    if not np.array_equal(logf[0], np.broadcast_to(logf[0, :1], logf[0].shape)):
        raise ValueError("the first factor may depend on x_0 only")
    return _reduce_chain(logK + logf, executor)


def posterior_expectation(result: SmoothingResult, f: Callable, t: int) -> np.ndarray:
    """Weighted average of ``f(X[t, n])`` under the smoothing weights of step ``t``."""
    Tp1 = result.log_w.shape[0]
    if not 0 <= t < Tp1:
        raise IndexError(f"time index {t} outside 0..{Tp1 - 1}")
    values = np.array([np.atleast_1d(f(x)) for x in result.particles.states[t]], dtype=float)
    return np.exp(result.log_w[t]) @ values


def posterior_moments(result: SmoothingResult):
    """Weighted means ``(T+1, d)`` and covariances ``(T+1, d, d)`` of every step."""
    w = np.exp(result.log_w)
    X = result.particles.states
    means = np.einsum("tn,tnd->td", w, X)
    centred = X - means[:, None, :]
    covs = np.einsum("tn,tnd,tne->tde", w, centred, centred)
    return means, covs
