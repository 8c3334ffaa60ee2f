"""Accuracy metrics for weighted particle approximations of Gaussian posteriors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .logspace import log_sum_exp


@dataclass(frozen=True)
class WeightedSample:
    points: np.ndarray  # (N, d)
    log_w: np.ndarray  # (N,), normalised

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        log_w = np.asarray(self.log_w, dtype=float)
        if log_w.shape != (points.shape[0],):
            raise ValueError("need one log-weight per point")
        if abs(log_sum_exp(log_w)) > 1e-8:
            raise ValueError("log-weights are not normalised")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "log_w", log_w)


def posterior_mean_error(estimate_means, exact_means, squared: bool = False) -> float:
    """Average over time steps of the Euclidean distance between mean estimates.

    With ``squared`` the per-step squared distances are averaged instead.
    """
    a = np.asarray(estimate_means, dtype=float)
    b = np.asarray(exact_means, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sq = np.sum((a - b) ** 2, axis=-1)
    return float(np.mean(sq if squared else np.sqrt(sq)))


def spd_sqrt(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, S.T, atol=1e-10):
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    if vals.min() <= 0:
        raise ValueError("matrix is not positive definite")
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_w2(m1, S1, m2, S2) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    m1, m2 = np.atleast_1d(m1).astype(float), np.atleast_1d(m2).astype(float)
    S1, S2 = np.atleast_2d(S1).astype(float), np.atleast_2d(S2).astype(float)
    spd_sqrt(S1)  # validates S1
    root2 = spd_sqrt(S2)
    cross = root2 @ S1 @ root2
    vals = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    # the cross term is PSD; tiny negative eigenvalues are roundoff
    trace_root = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    return float(np.sum((m1 - m2) ** 2) + np.trace(S1) + np.trace(S2) - 2.0 * trace_root)


def ksd(sample: WeightedSample, score: Callable, bandwidth: float) -> float:
    """Weighted V-statistic of the Langevin Stein kernel built on an RBF base kernel.

    ``score`` maps an ``(N, d)`` array to the target's score at each row.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    X = sample.points
    s = np.asarray(score(X), dtype=float).reshape(X.shape)
    if not np.all(np.isfinite(s)):
        raise ValueError("score returned non-finite values")
    w = np.exp(sample.log_w)
    d = X.shape[1]
    l2 = bandwidth**2
    diff = X[:, None, :] - X[None, :, :]
    r2 = np.sum(diff**2, axis=-1)
    k = np.exp(-r2 / (2 * l2))
    ss = s @ s.T
    # s_i . grad_{x_j} k + s_j . grad_{x_i} k, with grad_{x_i} k = -(x_i - x_j) k / l^2
    cross = (np.einsum("id,ijd->ij", s, diff) - np.einsum("jd,ijd->ij", s, diff)) / l2
    u = k * (ss + cross + d / l2 - r2 / l2**2)
    return float(max(w @ u @ w, 0.0))


def median_heuristic_bandwidth(samples: Sequence) -> float:
    """Bandwidth ``l`` with ``l**2`` the mean squared median pairwise distance over point sets."""
    squared = []
    for pts in samples:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if pts.shape[0] < 2:
            raise ValueError("each point set needs at least two points")
        med = np.median(pdist(pts))
        if med == 0:
            raise ValueError("median pairwise distance is zero")
        squared.append(med**2)
    return float(np.sqrt(np.mean(squared)))


def effective_sample_size(log_w) -> float:
    log_w = np.asarray(log_w, dtype=float)
    return float(np.exp(-log_sum_exp(2.0 * log_w)))
