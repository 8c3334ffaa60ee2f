"""Evidence lower bounds, their reparameterised gradient, and proposal fitting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .logspace import log_sum_exp
from .smoother import KernelTensor, compute_kernels, pvmc_weights
from .ssm import DiagonalGaussianProposal, LinearGaussianSSM


class UnsupportedModelError(TypeError):
    """The model or proposal does not expose the derivatives the gradient needs."""


class TrainingFailure(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"ELBO diverged at step {step} (value {value})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class ELBOEstimates:
    pvmc: float
    iwae: float
    pvae: float
    vae: float


def elbo_estimates(kernels: KernelTensor) -> ELBOEstimates:
    """Single-realisation values of the four bounds, all from one particle grid.

    ``iwae`` and ``vae`` only use the diagonal trajectories ``n_t = n``;
    ``pvae`` averages the log-weight over every trajectory, which reduces
    to the sum of the slab means.
    """
    logK = kernels.logK
    Tp1, N, _ = logK.shape
    _, log_L_raw = pvmc_weights(kernels)
    diagonal = np.diagonal(logK, axis1=1, axis2=2).sum(axis=0)
    return ELBOEstimates(
        pvmc=log_L_raw - Tp1 * math.log(N),
        iwae=log_sum_exp(diagonal) - math.log(N),
        pvae=float(np.sum(logK.mean(axis=(1, 2)))),
        vae=float(np.mean(diagonal)),
    )


def _messages(logK: np.ndarray):
    """Forward and backward log-messages of the kernel chain."""
    Tp1, N, _ = logK.shape
    fwd = np.empty((Tp1, N))
    bwd = np.zeros((Tp1, N))
    fwd[0] = logK[0, 0]
    for t in range(1, Tp1):
        fwd[t] = log_sum_exp(fwd[t - 1][:, None] + logK[t], axis=0)
    for t in range(Tp1 - 2, -1, -1):
        bwd[t] = log_sum_exp(logK[t + 1] + bwd[t + 1][None, :], axis=1)
    return fwd, bwd


def kernel_sensitivities(logK: np.ndarray):
    """Derivatives of ``log L_hat`` with respect to every kernel entry.

    Returns the marginal weights ``(T+1, N)`` (the derivative for slab 0,
    whose rows share one value) and the pairwise weights ``(T+1, N, N)``
    for slabs ``t >= 1`` (entry 0 unused), followed by the log of the
    unnormalised trajectory sum.
    """
    fwd, bwd = _messages(logK)
    log_L = log_sum_exp(fwd[-1])
    marg = np.exp(fwd + bwd - log_L)
    pair = np.zeros_like(logK)
    pair[1:] = np.exp(fwd[:-1, :, None] + logK[1:] + bwd[1:, None, :] - log_L)
    return marg, pair, log_L


def _lg_state_and_param_grads(lg: LinearGaussianSSM, X, obs, marg, pair):
    A, H = lg.A, lg.H_eff
    Qi = np.linalg.inv(lg.Q)
    Ri = np.linalg.inv(lg.R)
    P0i = np.linalg.inv(lg.prior_cov)
    Tp1, N, d = X.shape
    gX = np.zeros_like(X)
    gA = np.zeros_like(A)
    gH = np.zeros_like(H)

    # observations: e = y - H x
    e = obs[:, None, :] - X @ H.T
    Re = e @ Ri.T
    gX += marg[:, :, None] * (Re @ H)
    gH += np.einsum("tn,tni,tnj->ij", marg, Re, X)

    # prior
    dev = X[0] - lg.prior_mean
    P0dev = dev @ P0i.T
    gX[0] -= marg[0][:, None] * P0dev
    gm0 = marg[0] @ P0dev

    # transitions: r[i, j] = x_t^j - A x_{t-1}^i
    for t in range(1, Tp1):
        r = X[t][None, :, :] - (X[t - 1] @ A.T)[:, None, :]
        Qr = r @ Qi.T
        wQr = pair[t][:, :, None] * Qr
        gX[t] -= wQr.sum(axis=0)
        gX[t - 1] += wQr.sum(axis=1) @ A
        gA += np.einsum("ijk,il->kl", wQr, X[t - 1])

    if lg.H_mask is not None:
        gH = gH * lg.H_mask
    return gX, np.concatenate([gA.ravel(), gH.ravel(), gm0])


def _value_and_grad(lg: LinearGaussianSSM, prop: DiagonalGaussianProposal, obs, eps):
    grid = prop.grid_from_noise(obs, eps)
    kernels = compute_kernels(lg, grid, obs)
    logK = kernels.logK
    Tp1, N, _ = logK.shape
    marg, pair, log_L_raw = kernel_sensitivities(logK)
    value = log_L_raw - Tp1 * math.log(N)

    gX, g_theta = _lg_state_and_param_grads(lg, grid.states, obs, marg, pair)
    _, stds = prop.marginals(obs)
    g_mean = gX.sum(axis=1)
    # x = mean + std * eps, and -log V contributes +1 per coordinate of log std
    g_log_std = np.einsum("tnd,tnd->td", gX, stds[:, None, :] * eps) + 1.0
    g_phi = prop.param_vjp(obs, eps, g_mean, g_log_std)
    return value, g_theta, g_phi


def _check_supported(ssm, prop):
    if not isinstance(ssm, LinearGaussianSSM):
        raise UnsupportedModelError("analytic gradients are available for LinearGaussianSSM models only")
    if not isinstance(prop, DiagonalGaussianProposal):
        raise UnsupportedModelError("analytic gradients need a DiagonalGaussianProposal")


def _draw_noise(prop, obs, N, rng):
    means, _ = prop.marginals(obs)
    return rng.standard_normal((means.shape[0], N, means.shape[1]))


def elbo_value_and_gradient(ssm, prop, obs, N: int, rng: np.random.Generator):
    """``log L_hat`` and its gradient over ``(theta, phi)`` for one noise draw.

    The noise is drawn from ``rng`` exactly as :func:`pvmc.log_likelihood`
    draws it, so both see the same particles for the same seed.
    """
    _check_supported(ssm, prop)
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    eps = _draw_noise(prop, obs, N, rng)
    value, g_theta, g_phi = _value_and_grad(ssm, prop, obs, eps)
    return value, np.concatenate([g_theta, g_phi])


def elbo_gradient(ssm, prop, obs, N: int, rng: np.random.Generator) -> np.ndarray:
    """Gradient of ``log L_hat`` over ``(ssm.params, prop.params)`` with reparameterised particles."""
    return elbo_value_and_gradient(ssm, prop, obs, N, rng)[1]


def fit_proposal(ssm, obs, prop_init, steps: int, step_size: float, N: int, rng: np.random.Generator):
    """Gradient ascent on the proposal parameters, fresh noise every step.

    Returns the final proposal and the ELBO estimate seen at each step
    (evaluated before that step's update).
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    _check_supported(ssm, prop_init)
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    prop = prop_init
    phi = prop.params
    trace = np.empty(steps)
    for step in range(steps):
        eps = _draw_noise(prop, obs, N, rng)
        value, _, g_phi = _value_and_grad(ssm, prop, obs, eps)
        if not np.isfinite(value) or not np.all(np.isfinite(g_phi)):
            raise TrainingFailure(step, value)
        trace[step] = value
        phi = phi + step_size * g_phi
        prop = prop.with_params(phi)
    return prop, trace
