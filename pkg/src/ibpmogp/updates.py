"""Coordinate-ascent updates for the four variational factors.

Each update is the exact maximiser of the (surrogate) bound in its own
coordinate, so a full sweep can never decrease the bound.  The fixed sweep
order is q(u) for every latent, then q(S, Z) for every (latent, output) cell,
then q(gamma), then q(upsilon).
"""

import numpy as np
from scipy.special import digamma as _psi

from .elbo import compute_aux, compute_elbo
from .state import (
    ETA_CLAMP,
    all_expected_log_pi,
    all_stick_bounds,
    ezs_matrix,
    ezs2_matrix,
    stick_weights,
)

__all__ = [
    "update_q_u",
    "update_q_sz",
    "update_q_gamma",
    "update_q_upsilon",
    "sweep",
]

LOG2PI = np.log(2.0 * np.pi)


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def update_q_u(state, aux, blocks, i):
    """Exact Gaussian update of q(u_i) given all other factors.

    The posterior precision is P_ii + K_uu^{-1}; it is inverted through the
    factored identity (P + K^{-1})^{-1} = L (I + L^T P L)^{-1} L^T with
    L = chol(K_uu), which stays PSD even when K_uu is close to singular.
    """
    from scipy.linalg import solve_triangular

    D = blocks.n_outputs
    Q = blocks.n_latents
    w = ezs_matrix(state)
    e2 = ezs2_matrix(state)
    M = blocks.inducing.shape[0]

    P_ii = sum(e2[d, i] * aux.P_dqq[d][i][i] for d in range(D))
    L = blocks.L_uu[i]
    B = np.eye(M) + L.T @ P_ii @ L
    B = 0.5 * (B + B.T)
    Lb = np.linalg.cholesky(B)
    W = solve_triangular(Lb, L.T, lower=True).T   # W W^T = L B^{-1} L^T
    cov = W @ W.T

    u_hat = np.zeros(M)
    for d in range(D):
        resid = aux.m_dq[d][i].copy()
        for qp in range(Q):
            if qp == i:
                continue
            resid -= w[d, qp] * (aux.P_dqq[d][i][qp] @ state.u_mean[qp])
        u_hat += w[d, i] * resid
    state.u_cov[i] = cov
    state.u_mean[i] = cov @ u_hat
    return state


def update_q_sz(state, aux, blocks, d, i, elogpi, elog1mpi):
    """Joint update of (nu, mu, eta) for cell (d, i).

    ``elogpi``/``elog1mpi`` are E[log pi] and the stick-breaking lower bound
    on E[log(1 - pi)] for every latent, computed from the current tau.
    """
    Q = blocks.n_latents
    w = ezs_matrix(state)
    ui = state.u_mean[i]
    Euu = state.u_cov[i] + np.outer(ui, ui)

    trace_P = float(np.sum(aux.P_dqq[d][i][i] * Euu))
    gamma_mean = state.a_star[d, i] / state.b_star[d, i]
    nu_new = 1.0 / (trace_P + gamma_mean + aux.c_dq[d, i])

    m_dot = float(aux.m_dq[d][i] @ ui)
    cross = 0.0
    for qp in range(Q):
        if qp == i:
            continue
        cross += w[d, qp] * float(ui @ aux.P_dqq[d][i][qp] @ state.u_mean[qp])
    mu_new = nu_new * (m_dot - cross)

    elog_gamma = float(_psi(state.a_star[d, i])) - np.log(state.b_star[d, i])
    second_moment = nu_new + mu_new * mu_new
    theta = (
        mu_new * m_dot
        - mu_new * cross
        - 0.5 * second_moment * trace_P
        - 0.5 * LOG2PI
        + elogpi[i]
        + 0.5 * elog_gamma
        - 0.5 * (gamma_mean + aux.c_dq[d, i]) * second_moment
        - elog1mpi[i]
        + 0.5 * np.log(2.0 * np.pi * np.e * nu_new)
    )

    state.nu_s[d, i] = nu_new
    state.mu_s[d, i] = mu_new
    state.eta[d, i] = float(np.clip(_sigmoid(theta), ETA_CLAMP, 1.0 - ETA_CLAMP))
    return state


def update_q_gamma(state, priors, d, q):
    """Closed-form Gamma update (exact, no approximation)."""
    e2 = state.eta[d, q] * (state.nu_s[d, q] + state.mu_s[d, q] ** 2)
    state.a_star[d, q] = priors.a_gamma[d, q] + 0.5 * state.eta[d, q]
    state.b_star[d, q] = priors.b_gamma[d, q] + 0.5 * e2
    return state


def update_q_upsilon(state, priors):
    """Joint (weights, tau) update of the Beta stick factors.

    The multinomial weights of the stick-breaking bound are recomputed from
    the current tau for every level, then every tau is refreshed in closed
    form given those weights.
    """
    Q = state.tau1.shape[0]
    D = state.eta.shape[0]
    weights = [stick_weights(state.tau1, state.tau2, m)[0] for m in range(Q)]
    eta_col = np.sum(state.eta, axis=0)            # (Q,) sum_d eta_{d,m}
    inact_col = np.sum(1.0 - state.eta, axis=0)    # (Q,) sum_d (1 - eta_{d,m})

    tau1 = np.empty(Q)
    tau2 = np.empty(Q)
    for i in range(Q):
        active = float(np.sum(eta_col[i:]))
        tail = 0.0
        for m in range(i + 1, Q):
            tail += inact_col[m] * float(np.sum(weights[m][i + 1 : m + 1]))
        tau1[i] = priors.alpha + active + tail
        t2 = 1.0
        for m in range(i, Q):
            t2 += inact_col[m] * float(weights[m][i])
        tau2[i] = t2
    state.tau1 = tau1
    state.tau2 = tau2
    return state


def sweep(state, blocks, dataset, priors, aux=None):
    """One full coordinate-ascent pass; returns the state and the new bound."""
    if aux is None:
        aux = compute_aux(blocks, dataset, priors, state)
    Q = blocks.n_latents
    D = blocks.n_outputs

    for q in range(Q):
        update_q_u(state, aux, blocks, q)

    elogpi = all_expected_log_pi(state)
    elog1mpi, _ = all_stick_bounds(state)
    for q in range(Q):
        for d in range(D):
            update_q_sz(state, aux, blocks, d, q, elogpi, elog1mpi)

    for d in range(D):
        for q in range(Q):
            update_q_gamma(state, priors, d, q)

    update_q_upsilon(state, priors)
    value = compute_elbo(blocks, dataset, priors, state, aux=aux)
    return state, value
