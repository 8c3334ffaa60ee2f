"""Parallel variational Monte Carlo smoothing for state-space models."""

from pvmc.logspace import log_matmul, log_sum_exp
from pvmc.scan import ScanPlan, parallel_reduce, prefix_suffix_scan
from pvmc.ssm import (
    DiagonalGaussianProposal,
    GaussianProposal,
    LinearGaussianSSM,
    MarkovProposal,
    SSMSpec,
    lg_as_ssm,
    lg_build,
    simulate,
)
from pvmc.smoother import (
    KernelTensor,
    ParticleGrid,
    ScanElement,
    SmoothingResult,
    compute_kernels,
    log_likelihood,
    markovian_kernels,
    multiplicative_expectation,
    posterior_expectation,
    posterior_moments,
    pvmc_smooth,
    pvmc_weights,
)
from pvmc.elbo import ELBOEstimates, elbo_estimates, elbo_gradient, fit_proposal

__all__ = [
    "DiagonalGaussianProposal",
    "ELBOEstimates",
    "GaussianProposal",
    "KernelTensor",
    "LinearGaussianSSM",
    "MarkovProposal",
    "ParticleGrid",
    "SSMSpec",
    "ScanElement",
    "ScanPlan",
    "SmoothingResult",
    "compute_kernels",
    "elbo_estimates",
    "elbo_gradient",
    "fit_proposal",
    "lg_as_ssm",
    "lg_build",
    "log_likelihood",
    "log_matmul",
    "log_sum_exp",
    "markovian_kernels",
    "multiplicative_expectation",
    "parallel_reduce",
    "posterior_expectation",
    "posterior_moments",
    "prefix_suffix_scan",
    "pvmc_smooth",
    "pvmc_weights",
    "simulate",
]
