"""Brute-force enumeration of every trajectory through a particle grid.

Exponential in the horizon; used as ground truth on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .logspace import log_sum_exp
from .smoother import KernelTensor

MAX_TRAJECTORIES = 10**7


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryWeightTable:
    """Log-weights of all ``N ** (T + 1)`` trajectories.

    Entry ``k`` is trajectory ``(n_0, ..., n_T)`` with
    ``k = n_0 + N n_1 + N**2 n_2 + ...`` (``n_0`` varies fastest).
    """

    N: int
    T_plus_1: int
    log_weights: np.ndarray

    def as_array(self) -> np.ndarray:
        """View with one axis per time step, ``[n_0, n_1, ..., n_T]``."""
        return self.log_weights.reshape((self.N,) * self.T_plus_1, order="F")


def enumerate_trajectory_weights(kernels: KernelTensor) -> TrajectoryWeightTable:
    logK = kernels.logK
    Tp1, N, _ = logK.shape
    if N**Tp1 > MAX_TRAJECTORIES:
        raise EnumerationTooLarge(f"{N}**{Tp1} trajectories exceeds the limit of {MAX_TRAJECTORIES}")
    # axis t of `total` is n_t; add each slab broadcast over the two axes it touches
    total = logK[0, 0].reshape((N,) + (1,) * (Tp1 - 1))
    for t in range(1, Tp1):
        shape = [1] * Tp1
        shape[t - 1] = shape[t] = N
        total = total + logK[t].reshape(shape)
    total = np.broadcast_to(total, (N,) * Tp1)
    return TrajectoryWeightTable(N=N, T_plus_1=Tp1, log_weights=total.ravel(order="F").copy())


def brute_force_marginals(table: TrajectoryWeightTable):
    """Unnormalised log marginal weights ``(T+1, N)`` and the log of the full sum."""
    arr = table.as_array()
    W = np.empty((table.T_plus_1, table.N))
    for t in range(table.T_plus_1):
        other = tuple(a for a in range(table.T_plus_1) if a != t)
        W[t] = log_sum_exp(arr, axis=other) if other else arr
    return W, log_sum_exp(table.log_weights)
