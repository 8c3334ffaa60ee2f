"""Exact Kalman filtering and RTS smoothing, and a bootstrap particle filter."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List

import numpy as np

from .logspace import log_sum_exp
from .metrics import effective_sample_size
from .ssm import GaussianProposal, LinearGaussianSSM, as_ssm


class NumericalError(ArithmeticError):
    pass


class DegenerateWeightsError(RuntimeError):
    pass


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class FilterOutput:
    beliefs: List[GaussianBelief]  # filtering, p(x_t | y_{0:t})
    predicted: List[GaussianBelief]  # p(x_t | y_{0:t-1}); the prior at t = 0
    log_likelihood: float


def _gauss_logpdf(x, mean, chol):
    z = np.linalg.solve(chol, x - mean)
    return -0.5 * z @ z - np.sum(np.log(np.diag(chol))) - 0.5 * len(x) * math.log(2 * math.pi)


def kalman_filter(lg: LinearGaussianSSM, obs) -> FilterOutput:
    """Predict/update recursion with a Joseph-form covariance update."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[1] != lg.obs_dim:
        raise ValueError(f"observations have dimension {obs.shape[1]}, model expects {lg.obs_dim}")
    A, H, Q, R = lg.A, lg.H_eff, lg.Q, lg.R
    I = np.eye(lg.state_dim)
    m, P = lg.prior_mean, lg.prior_cov
    beliefs, predicted = [], []
    log_lik = 0.0
    for t, y in enumerate(obs):
        if t > 0:
            m = A @ m
            P = A @ P @ A.T + Q
            P = 0.5 * (P + P.T)
        predicted.append(GaussianBelief(m, P))
        S = H @ P @ H.T + R
        S = 0.5 * (S + S.T)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance not positive definite at t={t}") from exc
        log_lik += _gauss_logpdf(y, H @ m, L)
        K = np.linalg.solve(S, H @ P).T
        m = m + K @ (y - H @ m)
        IKH = I - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
        beliefs.append(GaussianBelief(m, P))
    return FilterOutput(beliefs=beliefs, predicted=predicted, log_likelihood=float(log_lik))


def rts_smooth(lg: LinearGaussianSSM, filter_out: FilterOutput) -> List[GaussianBelief]:
    """Backward pass with gain ``G_t = P_{t|t} A^T P_{t+1|t}^{-1}``."""
    A = lg.A
    beliefs = filter_out.beliefs
    out = [None] * len(beliefs)
    out[-1] = beliefs[-1]
    for t in range(len(beliefs) - 2, -1, -1):
        f, pred, nxt = beliefs[t], filter_out.predicted[t + 1], out[t + 1]
        try:
            G = np.linalg.solve(pred.cov, A @ f.cov).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"predicted covariance singular at t={t + 1}") from exc
        mean = f.mean + G @ (nxt.mean - pred.mean)
        cov = f.cov + G @ (nxt.cov - pred.cov) @ G.T
        out[t] = GaussianBelief(mean, 0.5 * (cov + cov.T))
    return out


def kalman_proposal(lg: LinearGaussianSSM, obs) -> GaussianProposal:
    """Independent proposals equal to the filtering posteriors ``N(m_{t|t}, P_{t|t})``."""
    beliefs = kalman_filter(lg, obs).beliefs
    return GaussianProposal(
        means=np.stack([b.mean for b in beliefs]),
        covs=np.stack([b.cov for b in beliefs]),
    )


def stack_beliefs(beliefs):
    return np.stack([b.mean for b in beliefs]), np.stack([b.cov for b in beliefs])


def write_beliefs_csv(path, beliefs) -> Path:
    """One row per step: ``t``, mean columns, then the row-major flattened covariance."""
    means, covs = stack_beliefs(beliefs)
    d = means.shape[1]
    header = ["t"] + [f"mean{i}" for i in range(d)] + [f"cov{i}_{j}" for i in range(d) for j in range(d)]
    rows = np.column_stack([np.arange(len(beliefs)), means, covs.reshape(len(beliefs), -1)])
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=["%d"] + ["%.17g"] * (len(header) - 1))
    return Path(path)


@dataclass(frozen=True)
class ParticleFilterOutput:
    particles: np.ndarray  # (T+1, N, d_x), before resampling at each step
    log_w: np.ndarray  # (T+1, N), normalised
    log_likelihood: float


def bootstrap_pf(ssm, obs, N: int, rng: np.random.Generator, resample_threshold: float = 0.5) -> ParticleFilterOutput:
    """Bootstrap filter with multinomial resampling when ``ESS / N`` drops below the threshold."""
    if N < 1:
        raise ValueError("N must be at least 1")
    if not 0.0 <= resample_threshold <= 1.0:
        raise ValueError("resample_threshold must lie in [0, 1]")
    ssm = as_ssm(ssm)
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    Tp1 = obs.shape[0]
    particles = np.empty((Tp1, N, ssm.state_dim))
    log_w_out = np.empty((Tp1, N))
    log_w = np.full(N, -math.log(N))
    log_lik = 0.0
    x = None
    for t in range(Tp1):
        x = ssm.prior_sample(rng, N) if t == 0 else ssm.transition_sample(t, x, rng)
        inc = np.asarray(ssm.observation_logpdf(t, obs[t], x), dtype=float)
        joint = log_w + inc
        step = log_sum_exp(joint)
        if step == -np.inf:
            raise DegenerateWeightsError(f"all particle weights vanished at t={t}")
        log_lik += step
        log_w = joint - step
        particles[t], log_w_out[t] = x, log_w
        if effective_sample_size(log_w) < resample_threshold * N:
            idx = rng.choice(N, size=N, p=np.exp(log_w - log_sum_exp(log_w)))
            x = x[idx]
            log_w = np.full(N, -math.log(N))
    return ParticleFilterOutput(particles=particles, log_w=log_w_out, log_likelihood=float(log_lik))

