"""Predictive moments at test inputs under the factorised variational posterior.

Moments are matched exactly under q: conditional on (Z, S, u) the test
function values are Gaussian with mean ``sum_q Z S K*_q Kuu_q^{-1} u_q`` and
covariance ``sum_q Z S^2 (Kff*_q - K*_q Kuu_q^{-1} K*_q^T)``; integrating the
factorised posterior analytically gives the expressions below.  A Monte Carlo
oracle over joint (Z, S, u) draws arbitrates correctness in the test-suite.
"""

import numpy as np

from .kernels import cross_cov_grid, output_cov_grid
from .state import ezs_matrix, ezs2_matrix

__all__ = ["predictive_mean", "predictive_cov", "predict"]


def _as_star_list(x_star, D):
    if isinstance(x_star, (list, tuple)):
        if len(x_star) != D:
            raise ValueError("need one test-input array per output")
        return list(x_star)
    return [x_star] * D


def _star_blocks(spec, blocks, d, x_star):
    Q = blocks.n_latents
    kfu = [cross_cov_grid(spec, d, q, x_star, blocks.inducing) for q in range(Q)]
    kff = [output_cov_grid(spec, d, d, q, x_star, x_star) for q in range(Q)]
    return kfu, kff


def predictive_mean(state, blocks, spec, x_star):
    """Per-output predictive means: E[y*_d] = sum_q E[Z S] k*_{du_q} Kuu^-1 u_q."""
    D = state.n_outputs
    Q = blocks.n_latents
    w = ezs_matrix(state)
    stars = _as_star_list(x_star, D)
    means = []
    for d in range(D):
        kfu, _ = _star_blocks(spec, blocks, d, stars[d])
        mu = 0.0
        for q in range(Q):
            mu = mu + w[d, q] * (kfu[q] @ blocks.solve_uu(q, state.u_mean[q]))
        means.append(np.asarray(mu))
    return means


def predictive_cov(state, blocks, spec, priors, x_star):
    """Per-output predictive covariances (observation noise included)."""
    D = state.n_outputs
    Q = blocks.n_latents
    w = ezs_matrix(state)
    e2 = ezs2_matrix(state)
    stars = _as_star_list(x_star, D)
    covs = []
    for d in range(D):
        kfu, kff = _star_blocks(spec, blocks, d, stars[d])
        n = kfu[0].shape[0]
        cov = priors.noise_var[d] * np.eye(n)
        for q in range(Q):
            A = blocks.solve_uu(q, kfu[q].T)          # Kuu^-1 K*^T, (M, n)
            cond = kff[q] - kfu[q] @ A                # conditional covariance
            post_u = A.T @ state.u_cov[q] @ A         # posterior-u propagation
            mbar = kfu[q] @ blocks.solve_uu(q, state.u_mean[q])
            cov = cov + e2[d, q] * (cond + post_u)
            cov = cov + (e2[d, q] - w[d, q] ** 2) * np.outer(mbar, mbar)
        covs.append(0.5 * (cov + cov.T))
    return covs


def predict(state, blocks, spec, priors, x_star):
    """Convenience wrapper returning (means, covariances)."""
    return (
        predictive_mean(state, blocks, spec, x_star),
        predictive_cov(state, blocks, spec, priors, x_star),
    )
