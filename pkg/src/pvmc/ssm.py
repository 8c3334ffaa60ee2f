"""State-space models, proposals and simulation.

Density callbacks are vectorised: they accept arrays whose last axis is
the state (or observation) dimension and broadcast over every leading
axis. ``transition_logpdf(t, x[None, :, :], x_prev[:, None, :])`` thus
returns the full ``N x N`` table of transition densities between two
particle sets in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_BOUNDS = (-20.0, 20.0)


def gaussian_logpdf(x, mean, chol_inv, log_det_chol):
    """Multivariate normal log-density from a precomputed inverse Cholesky factor."""
    z = (np.asarray(x) - mean) @ chol_inv.T
    d = chol_inv.shape[0]
    return -0.5 * np.sum(z * z, axis=-1) - log_det_chol - 0.5 * d * LOG_2PI


def diag_gaussian_logpdf(x, mean, std):
    z = (np.asarray(x) - mean) / std
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(np.log(std), axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def _chol(name, M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} is not symmetric")
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"{name} is not positive definite") from exc


@dataclass(frozen=True)
class SSMSpec:
    """Prior, transition and observation densities of a state-space model.

    Any sampler may be ``None`` when only evaluation is needed.
    """

    state_dim: int
    obs_dim: int
    prior_logpdf: Callable
    transition_logpdf: Callable
    observation_logpdf: Callable
    prior_sample: Optional[Callable] = None
    transition_sample: Optional[Callable] = None
    observation_sample: Optional[Callable] = None
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ValueError("state and observation dimensions must be at least 1")


@dataclass(frozen=True)
class LinearGaussianSSM:
    """``x_t = A x_{t-1} + q_t``, ``y_t = H x_t + r_t`` with Gaussian noise.

    ``H_mask`` multiplies ``H`` elementwise; a zero entry makes the
    corresponding ``H`` entry a structurally dead parameter.
    """

    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    H_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("A", "H", "Q", "R", "prior_mean", "prior_cov"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        d_x = self.A.shape[0]
        if self.A.shape != (d_x, d_x):
            raise ValueError("A must be square")
        if self.H.ndim != 2 or self.H.shape[1] != d_x:
            raise ValueError("H must have d_x columns")
        if self.prior_mean.shape != (d_x,):
            raise ValueError("prior_mean must have length d_x")
        if self.H_mask is not None:
            object.__setattr__(self, "H_mask", np.asarray(self.H_mask, dtype=float))
            if self.H_mask.shape != self.H.shape:
                raise ValueError("H_mask must match H")
        object.__setattr__(self, "_chol_Q", _chol("Q", self.Q))
        object.__setattr__(self, "_chol_R", _chol("R", self.R))
        object.__setattr__(self, "_chol_P0", _chol("prior_cov", self.prior_cov))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    @property
    def H_eff(self) -> np.ndarray:
        return self.H if self.H_mask is None else self.H * self.H_mask

    @property
    def params(self) -> np.ndarray:
        """Differentiable parameters: ``A``, ``H`` and ``prior_mean``, flattened."""
        return np.concatenate([self.A.ravel(), self.H.ravel(), self.prior_mean])

    def with_params(self, theta) -> "LinearGaussianSSM":
        theta = np.asarray(theta, dtype=float)
        d_x, d_y = self.state_dim, self.obs_dim
        nA, nH = d_x * d_x, d_y * d_x
        if theta.shape != (nA + nH + d_x,):
            raise ValueError("parameter vector has the wrong length")
        return replace(
            self,
            A=theta[:nA].reshape(d_x, d_x),
            H=theta[nA : nA + nH].reshape(d_y, d_x),
            prior_mean=theta[nA + nH :],
        )

    def prior_marginals(self, T: int):
        """Means and covariances of ``x_0 .. x_T`` under the prior."""
        means = np.empty((T + 1, self.state_dim))
        covs = np.empty((T + 1, self.state_dim, self.state_dim))
        m, P = self.prior_mean, self.prior_cov
        for t in range(T + 1):
            if t > 0:
                m = self.A @ m
                P = self.A @ P @ self.A.T + self.Q
            means[t], covs[t] = m, P
        return means, covs


def lg_build(d_x: int, d_y: int) -> LinearGaussianSSM:
    """Benchmark model with ``A[i, j] = 0.38 ** (|i - j| + 1)``, ``H = [I 0]``, unit noise.

    The prior on ``x_0`` is standard normal.
    """
    if d_x < 1 or d_y < 1:
        raise ValueError("dimensions must be at least 1")
    if d_y > d_x:
        raise ValueError("d_y may not exceed d_x")
    idx = np.arange(d_x)
    A = 0.38 ** (np.abs(idx[:, None] - idx[None, :]) + 1.0)
    H = np.eye(d_y, d_x)
    return LinearGaussianSSM(
        A=A,
        H=H,
        Q=np.eye(d_x),
        R=np.eye(d_y),
        prior_mean=np.zeros(d_x),
        prior_cov=np.eye(d_x),
    )


def lg_as_ssm(lg: LinearGaussianSSM) -> SSMSpec:
    """Wrap a linear-Gaussian model in the generic callback interface."""
    A, H = lg.A, lg.H_eff
    Lq, Lr, Lp = lg._chol_Q, lg._chol_R, lg._chol_P0
    Lq_inv, Lr_inv, Lp_inv = (np.linalg.inv(L) for L in (Lq, Lr, Lp))
    ld_q, ld_r, ld_p = (float(np.sum(np.log(np.diag(L)))) for L in (Lq, Lr, Lp))
    m0 = lg.prior_mean

    def prior_logpdf(x):
        return gaussian_logpdf(x, m0, Lp_inv, ld_p)

    def transition_logpdf(t, x, x_prev):
        return gaussian_logpdf(x, np.asarray(x_prev) @ A.T, Lq_inv, ld_q)

    def observation_logpdf(t, y, x):
        return gaussian_logpdf(y, np.asarray(x) @ H.T, Lr_inv, ld_r)

    def prior_sample(rng, n):
        return m0 + rng.standard_normal((n, lg.state_dim)) @ Lp.T

    def transition_sample(t, x_prev, rng):
        x_prev = np.atleast_2d(x_prev)
        return x_prev @ A.T + rng.standard_normal(x_prev.shape) @ Lq.T

    def observation_sample(t, x, rng):
        x = np.atleast_2d(x)
        return x @ H.T + rng.standard_normal((x.shape[0], lg.obs_dim)) @ Lr.T

    return SSMSpec(
        state_dim=lg.state_dim,
        obs_dim=lg.obs_dim,
        prior_logpdf=prior_logpdf,
        transition_logpdf=transition_logpdf,
        observation_logpdf=observation_logpdf,
        prior_sample=prior_sample,
        transition_sample=transition_sample,
        observation_sample=observation_sample,
        params=lg.params,
    )


def as_ssm(model) -> SSMSpec:
    return lg_as_ssm(model) if isinstance(model, LinearGaussianSSM) else model


def simulate(ssm, T: int, rng: np.random.Generator):
    """Draw a latent trajectory and its observations, ``x_{0:T}`` and ``y_{0:T}``."""
    ssm = as_ssm(ssm)
    if T < 0:
        raise ValueError("T must be non-negative")
    if ssm.prior_sample is None or ssm.transition_sample is None or ssm.observation_sample is None:
        raise ValueError("simulation needs prior, transition and observation samplers")
    xs = np.empty((T + 1, ssm.state_dim))
    ys = np.empty((T + 1, ssm.obs_dim))
    x = ssm.prior_sample(rng, 1)
    for t in range(T + 1):
        if t > 0:
            x = ssm.transition_sample(t, x, rng)
        xs[t] = x[0]
        ys[t] = ssm.observation_sample(t, x, rng)[0]
    return xs, ys


# --- proposals -------------------------------------------------------------


@dataclass(frozen=True)
class ParticleGrid:
    """Particles ``X[t, n]`` and their proposal log-densities ``log V_t(X[t, n])``."""

    states: np.ndarray  # (T+1, N, d_x)
    proposal_logpdf: np.ndarray  # (T+1, N)
    noise: Optional[np.ndarray] = None  # standard normal draws behind ``states``

    @property
    def T_plus_1(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1]


def _clamp_log_std(log_std):
    return np.clip(log_std, *LOG_STD_BOUNDS)


@dataclass(frozen=True)
class DiagonalGaussianProposal:
    """Independent diagonal Gaussians ``V_t = N(mean[t], diag(exp(2 log_std[t])))``.

    With ``W`` set the means are ``W y_t + b`` and one ``log_std`` vector
    is shared by every time step; otherwise ``mean`` and ``log_std`` hold
    one row per time step.
    """

    mean: Optional[np.ndarray] = None
    log_std: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    @classmethod
    def constant(cls, mean, log_std):
        mean = np.atleast_2d(np.asarray(mean, dtype=float))
        log_std = np.broadcast_to(np.asarray(log_std, dtype=float), mean.shape).copy()
        return cls(mean=mean, log_std=log_std)

    @classmethod
    def affine(cls, W, b, log_std):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return cls(
            W=W,
            b=np.asarray(b, dtype=float).reshape(W.shape[0]),
            log_std=np.asarray(log_std, dtype=float).reshape(W.shape[0]),
        )

    @property
    def is_affine(self) -> bool:
        return self.W is not None

    @property
    def params(self) -> np.ndarray:
        if self.is_affine:
            return np.concatenate([self.W.ravel(), self.b, self.log_std])
        return np.concatenate([self.mean.ravel(), self.log_std.ravel()])

    def with_params(self, phi) -> "DiagonalGaussianProposal":
        phi = np.asarray(phi, dtype=float)
        if phi.shape != self.params.shape:
            raise ValueError("parameter vector has the wrong length")
        if self.is_affine:
            d_x, d_y = self.W.shape
            return DiagonalGaussianProposal.affine(
                phi[: d_x * d_y].reshape(d_x, d_y), phi[d_x * d_y : d_x * d_y + d_x], phi[d_x * d_y + d_x :]
            )
        n = self.mean.size
        return DiagonalGaussianProposal(mean=phi[:n].reshape(self.mean.shape), log_std=phi[n:].reshape(self.mean.shape))

    def marginals(self, obs):
        """Per-step means and standard deviations, each ``(T+1, d_x)``."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.is_affine:
            means = obs @ self.W.T + self.b
            stds = np.broadcast_to(np.exp(_clamp_log_std(self.log_std)), means.shape)
            return means, stds
        if self.mean.shape[0] != obs.shape[0]:
            raise ValueError(f"proposal covers {self.mean.shape[0]} steps, observations have {obs.shape[0]}")
        return self.mean, np.exp(_clamp_log_std(self.log_std))

    def logpdf(self, obs, t, x):
        means, stds = self.marginals(obs)
        return diag_gaussian_logpdf(x, means[t], stds[t])

    def sample(self, obs, N: int, rng) -> ParticleGrid:
        means, stds = self.marginals(obs)
        eps = rng.standard_normal((means.shape[0], N, means.shape[1]))
        return self.grid_from_noise(obs, eps)

    def grid_from_noise(self, obs, eps) -> ParticleGrid:
        """Reparameterised particles ``mean + std * eps`` for fixed noise."""
        means, stds = self.marginals(obs)
        states = means[:, None, :] + stds[:, None, :] * eps
        logq = diag_gaussian_logpdf(states, means[:, None, :], stds[:, None, :])
        return ParticleGrid(states=states, proposal_logpdf=logq, noise=eps)

    def param_vjp(self, obs, eps, g_mean, g_log_std):
        """Pull back gradients on per-step means and log-stds onto the flat parameters.

        ``g_mean`` and ``g_log_std`` are ``(T+1, d_x)``; entries whose
        log-std sits outside the clamp receive zero gradient.
        """
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        if self.is_affine:
            live = (self.log_std > LOG_STD_BOUNDS[0]) & (self.log_std < LOG_STD_BOUNDS[1])
            gW = g_mean.T @ obs
            gb = g_mean.sum(axis=0)
            gs = g_log_std.sum(axis=0) * live
            return np.concatenate([gW.ravel(), gb, gs])
        live = (self.log_std > LOG_STD_BOUNDS[0]) & (self.log_std < LOG_STD_BOUNDS[1])
        return np.concatenate([g_mean.ravel(), (g_log_std * live).ravel()])


@dataclass(frozen=True)
class GaussianProposal:
    """Independent full-covariance Gaussians per time step (used for the Kalman proposal)."""

    means: np.ndarray  # (T+1, d)
    covs: np.ndarray  # (T+1, d, d)

    def __post_init__(self):
        chols = np.stack([_chol(f"proposal covariance at t={t}", C) for t, C in enumerate(self.covs)])
        object.__setattr__(self, "_chols", chols)
        object.__setattr__(self, "_chol_invs", np.linalg.inv(chols))
        object.__setattr__(self, "_log_dets", np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1))

    def _check(self, obs):
        if np.atleast_2d(obs).shape[0] != self.means.shape[0]:
            raise ValueError("proposal horizon does not match the observations")

    def logpdf(self, obs, t, x):
        return gaussian_logpdf(x, self.means[t], self._chol_invs[t], self._log_dets[t])

    def sample(self, obs, N: int, rng) -> ParticleGrid:
        self._check(obs)
        Tp1, d = self.means.shape
        eps = rng.standard_normal((Tp1, N, d))
        states = self.means[:, None, :] + np.einsum("tij,tnj->tni", self._chols, eps)
        logq = np.stack([self.logpdf(obs, t, states[t]) for t in range(Tp1)])
        return ParticleGrid(states=states, proposal_logpdf=logq, noise=eps)


def prior_proposal(lg: LinearGaussianSSM, T: int) -> DiagonalGaussianProposal:
    """Factorised proposal matching the prior marginal means and variances of each ``x_t``."""
    means, covs = lg.prior_marginals(T)
    log_std = 0.5 * np.log(np.diagonal(covs, axis1=1, axis2=2))
    return DiagonalGaussianProposal.constant(means, log_std)


def sample_proposal(prop, obs, N: int, rng) -> ParticleGrid:
    """Draw ``N`` i.i.d. particles per time step from a factorised proposal."""
    if N < 1:
        raise ValueError("N must be at least 1")
    return prop.sample(obs, N, rng)


@dataclass(frozen=True)
class MarkovProposal:
    """Proposal whose step ``t`` depends on a particle at ``t - 1``.

    ``V_0 = N(mean0, diag(exp(2 log_std0)))`` and
    ``V_t(. | x_prev) = N(G y_t + c + F x_prev, diag(exp(2 log_std)))``.
    """

    mean0: np.ndarray
    log_std0: np.ndarray
    F: np.ndarray
    G: np.ndarray
    c: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        for name in ("mean0", "log_std0", "F", "G", "c", "log_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def initial_logpdf(self, x):
        return diag_gaussian_logpdf(x, self.mean0, np.exp(_clamp_log_std(self.log_std0)))

    def conditional_logpdf(self, obs, t, x, x_prev):
        """``log V_t(x | x_prev)``, broadcasting over leading axes of both arguments."""
        # same expression as the affine factorised proposal, so F = 0 reproduces it bit for bit
        base = (np.atleast_2d(obs) @ self.G.T + self.c)[t]
        mean = base + np.asarray(x_prev) @ self.F.T
        return diag_gaussian_logpdf(x, mean, np.exp(_clamp_log_std(self.log_std)))

    def sample(self, obs, N: int, rng) -> ParticleGrid:
        """Ancestral sampling: particle ``n`` at ``t`` is drawn given particle ``n`` at ``t - 1``.

        The recorded ``proposal_logpdf`` holds the conditional densities
        along each particle's own chain.
        """
        obs = np.atleast_2d(obs)
        Tp1, d = obs.shape[0], self.mean0.shape[0]
        eps = rng.standard_normal((Tp1, N, d))
        states = np.empty((Tp1, N, d))
        logq = np.empty((Tp1, N))
        states[0] = self.mean0 + np.exp(_clamp_log_std(self.log_std0)) * eps[0]
        logq[0] = self.initial_logpdf(states[0])
        std = np.exp(_clamp_log_std(self.log_std))
        base = obs @ self.G.T + self.c
        for t in range(1, Tp1):
            mean = base[t] + states[t - 1] @ self.F.T
            states[t] = mean + std * eps[t]
            logq[t] = self.conditional_logpdf(obs, t, states[t], states[t - 1])
        return ParticleGrid(states=states, proposal_logpdf=logq, noise=eps)

    def factorised_equivalent(self) -> DiagonalGaussianProposal:
        """The factorised proposal this one reduces to when ``F`` is zero."""
        return DiagonalGaussianProposal.affine(self.G, self.c, self.log_std)


# --- CSV ---------------------------------------------------------------------


def write_sequence_csv(path, values, prefix: str = "y"):
    """One row per time step, one column per dimension, with a header row."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    header = ",".join(f"{prefix}{k}" for k in range(values.shape[1]))
    np.savetxt(path, values, delimiter=",", header=header, comments="", fmt="%.17g")


def read_sequence_csv(path) -> np.ndarray:
    values = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if values.size == 0:
        raise ValueError(f"{path} holds no rows")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{path} contains non-finite entries")
    return values
