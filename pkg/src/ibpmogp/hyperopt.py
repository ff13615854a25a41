"""Hyperparameter optimisation of the bound by scaled conjugate gradients.

The bound is maximised over kernel parameters and per-output noise variances
with the variational state held fixed.  All positive parameters live in log
space; the ODE2 damper is reparameterised as C = 2 sqrt(B) tanh(rho) with rho
unconstrained, which keeps every output strictly underdamped during
optimisation.

Gradients are assembled in two analytic stages: derivatives of the bound with
respect to each covariance block, then the chain rule through the per-family
kernel derivatives.
"""

from dataclasses import dataclass, field

import numpy as np

from .elbo import compute_aux, compute_elbo
from .kernels import (
    KernelSpec,
    assemble_blocks,
    cross_cov_grid_grads,
    default_inducing,
    latent_cov_grid_grads,
    output_cov_diag_grads,
)
from .state import ezs_matrix, ezs2_matrix, init_state
from .updates import sweep

__all__ = [
    "NonFiniteGradient",
    "ParamVector",
    "encode_params",
    "decode_params",
    "elbo_block_grads",
    "bound_and_grad",
    "make_objective",
    "scg_maximize",
    "FitReport",
    "fit",
]

LOG_LO = np.log(1e-8)
LOG_HI = np.log(1e8)


class NonFiniteGradient(ArithmeticError):
    pass


@dataclass(eq=False)
class ParamVector:
    """Flat log-space parameter vector plus the index map back to the model."""

    theta: np.ndarray
    names: list

    def index(self, name):
        return self.names.index(name)


def encode_params(spec, priors):
    names = []
    vals = []
    if spec.family == "GS":
        D, p = spec.gs_precision.shape
        Q = spec.gs_latent_precision.shape[0]
        for d in range(D):
            for i in range(p):
                names.append(("log_gs_p", d, i))
                vals.append(np.log(spec.gs_precision[d, i]))
        for q in range(Q):
            for i in range(p):
                names.append(("log_gs_ell", q, i))
                vals.append(np.log(spec.gs_latent_precision[q, i]))
    elif spec.family == "ODE1":
        for d in range(spec.decay.shape[0]):
            names.append(("log_decay", d))
            vals.append(np.log(spec.decay[d]))
        for q in range(spec.lengthscale.shape[0]):
            names.append(("log_ell", q))
            vals.append(np.log(spec.lengthscale[q]))
    else:
        D = spec.spring.shape[0]
        for d in range(D):
            names.append(("log_spring", d))
            vals.append(np.log(spec.spring[d]))
        for d in range(D):
            # project into the underdamped region if needed (C^2 < 4B)
            ratio = spec.damper[d] / (2.0 * np.sqrt(spec.spring[d]))
            ratio = min(ratio, 1.0 - 1e-8)
            names.append(("rho_damper", d))
            vals.append(np.arctanh(ratio))
        for q in range(spec.lengthscale.shape[0]):
            names.append(("log_ell", q))
            vals.append(np.log(spec.lengthscale[q]))
    for d in range(priors.noise_var.shape[0]):
        names.append(("log_noise", d))
        vals.append(np.log(priors.noise_var[d]))
    theta = np.clip(np.array(vals, dtype=float), LOG_LO, LOG_HI)
    return ParamVector(theta=theta, names=names)


def decode_params(names, theta, spec, priors, noise_floor=None):
    """Rebuild (KernelSpec, Priors) from a flat theta; clips to the guard box.

    ``noise_floor`` optionally gives per-output lower bounds for the noise
    variances (useful when fitting noise-free data, where the optimiser would
    otherwise drive them to the guard box and overfit spurious links).
    """
    theta = np.clip(np.asarray(theta, dtype=float), LOG_LO, LOG_HI)
    kw = {}
    if spec.family == "GS":
        gs_p = spec.gs_precision.copy()
        gs_ell = spec.gs_latent_precision.copy()
    elif spec.family == "ODE1":
        decay = spec.decay.copy()
        ell = spec.lengthscale.copy()
    else:
        spring = spec.spring.copy()
        rho = np.zeros_like(spring)
        ell = spec.lengthscale.copy()
    noise = priors.noise_var.copy()
    for name, val in zip(names, theta):
        tag = name[0]
        if tag == "log_gs_p":
            gs_p[name[1], name[2]] = np.exp(val)
        elif tag == "log_gs_ell":
            gs_ell[name[1], name[2]] = np.exp(val)
        elif tag == "log_decay":
            decay[name[1]] = np.exp(val)
        elif tag == "log_spring":
            spring[name[1]] = np.exp(val)
        elif tag == "rho_damper":
            rho[name[1]] = val
        elif tag == "log_ell":
            ell[name[1]] = np.exp(val)
        elif tag == "log_noise":
            noise[name[1]] = np.exp(val)
            if noise_floor is not None:
                noise[name[1]] = max(noise[name[1]], noise_floor[name[1]])
        else:
            raise KeyError(f"unknown parameter tag {tag!r}")
    if spec.family == "GS":
        new_spec = spec.replace(gs_precision=gs_p, gs_latent_precision=gs_ell)
    elif spec.family == "ODE1":
        new_spec = spec.replace(decay=decay, lengthscale=ell)
    else:
        # keep the damping ratio inside (0, 1) with margin: C in (0, 2 sqrt(B))
        # strictly underdamped, clear of the critical-damping guard even at
        # the bottom of the spring guard box
        ratio = np.clip(np.tanh(rho), 1e-6, 0.995)
        damper = 2.0 * np.sqrt(spring) * ratio
        new_spec = spec.replace(spring=spring, damper=damper, lengthscale=ell)
    return new_spec, priors.replace_noise(noise)


# ---------------------------------------------------------------------------
# analytic gradients of the bound w.r.t. the covariance blocks
# ---------------------------------------------------------------------------

def elbo_block_grads(blocks, dataset, priors, state):
    """Derivatives of the bound w.r.t. K_uu[q], K_fu[d][q], Kff_diag and noise.

    Returns (gKuu, gJ, gkff_coef, gnoise_log) where gkff_coef[d, q] multiplies
    every entry of dKff_diag/dtheta and gnoise_log is d bound / d log sigma^2_d.
    """
    D = blocks.n_outputs
    Q = blocks.n_latents
    M = blocks.inducing.shape[0]
    s = 1.0 / priors.noise_var
    w = ezs_matrix(state)
    e2 = ezs2_matrix(state)

    Kuu_inv = [blocks.solve_uu(q, np.eye(M)) for q in range(Q)]
    a = [Kuu_inv[q] @ state.u_mean[q] for q in range(Q)]
    U = [state.u_cov[q] + np.outer(state.u_mean[q], state.u_mean[q]) for q in range(Q)]
    Bqq = [Kuu_inv[q] @ U[q] @ Kuu_inv[q] for q in range(Q)]

    def B_pair(q, qp):
        if q == qp:
            return Bqq[q]
        return np.outer(a[q], a[qp])

    W2 = []
    for d in range(D):
        m = np.outer(w[d], w[d])
        np.fill_diagonal(m, e2[d])
        W2.append(m)

    H = [[Kuu_inv[q] @ blocks.K_fu[d][q].T for q in range(Q)] for d in range(D)]

    gJ = [[None] * Q for _ in range(D)]
    gKuu = [np.zeros((M, M)) for _ in range(Q)]
    gnoise_log = np.zeros(D)

    # per-(d) accumulators of the s_d-linear bound pieces, for the noise grad
    t1_d = np.zeros(D)
    t2_d = np.zeros(D)
    t6_d = np.zeros(D)

    for q in range(Q):
        v_q = np.zeros(M)
        for d in range(D):
            v_q += w[d, q] * s[d] * (blocks.K_fu[d][q].T @ dataset.y[d])
        gKuu[q] -= np.outer(Kuu_inv[q] @ v_q, a[q])
        gKuu[q] += 0.5 * Bqq[q]
        gKuu[q] -= 0.5 * Kuu_inv[q]

    for d in range(D):
        yd = dataset.y[d]
        for q in range(Q):
            g = w[d, q] * s[d] * np.outer(yd, a[q])
            for qp in range(Q):
                g -= s[d] * W2[d][q, qp] * (blocks.K_fu[d][qp] @ B_pair(qp, q))
            g += e2[d, q] * s[d] * (blocks.K_fu[d][q] @ Kuu_inv[q])
            gJ[d][q] = g
        for q in range(Q):
            for qp in range(Q):
                A = B_pair(q, qp) @ (blocks.K_fu[d][qp].T @ blocks.K_fu[d][q]) @ Kuu_inv[q]
                gKuu[q] += 0.5 * s[d] * W2[d][q, qp] * (A + A.T)
            gKuu[q] -= 0.5 * e2[d, q] * s[d] * (H[d][q] @ H[d][q].T)

        # s_d-linear pieces for the noise gradient
        for q in range(Q):
            t1_d[d] += w[d, q] * s[d] * float(yd @ blocks.K_fu[d][q] @ a[q])
            kff_sum = float(np.sum(blocks.Kff_diag[d][q]))
            nystrom = float(np.sum(blocks.K_fu[d][q] * H[d][q].T))
            t6_d[d] += -0.5 * e2[d, q] * s[d] * (kff_sum - nystrom)
            for qp in range(Q):
                t2_d[d] += -0.5 * s[d] * W2[d][q, qp] * float(
                    np.sum((blocks.K_fu[d][q] @ B_pair(qp, q).T) * blocks.K_fu[d][qp])
                )
        n = dataset.n_points[d]
        gnoise_log[d] = -(t1_d[d] + t2_d[d] + t6_d[d]) - 0.5 * (
            n - s[d] * float(yd @ yd)
        )

    gkff_coef = -0.5 * e2 * s[:, None]
    return gKuu, gJ, gkff_coef, gnoise_log


def bound_and_grad(theta, names, spec, priors, dataset, state, inducing,
                   threads=1, noise_floor=None):
    """Bound value and analytic d bound / d theta at fixed variational state."""
    cur_spec, cur_priors = decode_params(names, theta, spec, priors,
                                         noise_floor=noise_floor)
    blocks = assemble_blocks(dataset, inducing, cur_spec, threads=threads)
    value = compute_elbo(blocks, dataset, cur_priors, state)
    gKuu, gJ, gkff_coef, gnoise_log = elbo_block_grads(blocks, dataset, cur_priors, state)

    D = blocks.n_outputs
    Q = blocks.n_latents
    grad_raw = {}

    def _acc(key, val):
        grad_raw[key] = grad_raw.get(key, 0.0) + val

    Z = blocks.inducing
    for q in range(Q):
        _, grads = latent_cov_grid_grads(cur_spec, q, Z, Z)
        for key, dK in grads.items():
            _acc(key, float(np.sum(gKuu[q] * dK)))
    for d in range(D):
        X = dataset.x[d]
        for q in range(Q):
            _, grads = cross_cov_grid_grads(cur_spec, d, q, X, Z)
            for key, dK in grads.items():
                _acc(key, float(np.sum(gJ[d][q] * dK)))
            _, grads = output_cov_diag_grads(cur_spec, d, q, X)
            for key, dk in grads.items():
                _acc(key, gkff_coef[d, q] * float(np.sum(dk)))

    grad = np.zeros_like(theta)
    for j, name in enumerate(names):
        tag = name[0]
        if tag == "log_noise":
            grad[j] = gnoise_log[name[1]]
        elif tag == "log_gs_p":
            grad[j] = grad_raw.get(("gs_p", name[1], name[2]), 0.0) * cur_spec.gs_precision[name[1], name[2]]
        elif tag == "log_gs_ell":
            grad[j] = grad_raw.get(("gs_ell", name[1], name[2]), 0.0) * cur_spec.gs_latent_precision[name[1], name[2]]
        elif tag == "log_decay":
            grad[j] = grad_raw.get(("decay", name[1]), 0.0) * cur_spec.decay[name[1]]
        elif tag == "log_ell":
            grad[j] = grad_raw.get(("ell", name[1]), 0.0) * cur_spec.lengthscale[name[1]]
        elif tag == "log_spring":
            d = name[1]
            dF_dB = grad_raw.get(("spring", d), 0.0)
            dF_dC = grad_raw.get(("damper", d), 0.0)
            grad[j] = dF_dB * cur_spec.spring[d] + dF_dC * 0.5 * cur_spec.damper[d]
        elif tag == "rho_damper":
            d = name[1]
            dF_dC = grad_raw.get(("damper", d), 0.0)
            ratio = cur_spec.damper[d] / (2.0 * np.sqrt(cur_spec.spring[d]))
            grad[j] = dF_dC * 2.0 * np.sqrt(cur_spec.spring[d]) * (1.0 - ratio**2)
        else:
            raise KeyError(f"unknown parameter tag {tag!r}")
    if not np.all(np.isfinite(grad)) or not np.isfinite(value):
        raise NonFiniteGradient("non-finite bound or gradient during hyperopt")
    return value, grad


def make_objective(names, spec, priors, dataset, state, inducing, threads=1,
                   noise_floor=None):
    def objective(theta):
        return bound_and_grad(theta, names, spec, priors, dataset, state,
                              inducing, threads=threads,
                              noise_floor=noise_floor)

    return objective


# ---------------------------------------------------------------------------
# scaled conjugate gradients (Moller-style), maximisation convention
# ---------------------------------------------------------------------------

def scg_maximize(func_grad, theta0, budget=20, grad_tol=1e-14, step_tol=1e-14):
    """Maximise func_grad's value with Moller's scaled conjugate gradients.

    ``func_grad(theta) -> (value, gradient)``; ``budget`` caps the number of
    SCG iterations (each costs at most two evaluations).  Returns
    (theta_best, value_best, accepted_values) where accepted_values starts at
    the initial value and appends every accepted step, so the sequence is
    non-decreasing.  A stalled model-trust region simply returns the best
    point seen; the result is never worse than theta0.
    """
    x = np.array(theta0, dtype=float)
    n = x.size
    f0, g0 = func_grad(x)
    if budget <= 0:
        return x, f0, [f0]

    # internally minimise e = -value with r = -de/dx = grad of the value... sign
    # convention: e, ge below are the negated objective and its gradient
    e = -f0
    ge = -np.asarray(g0, dtype=float)
    r = -ge
    d = r.copy()
    lam = 1e-6
    lam_bar = 0.0
    sigma0 = 1e-6
    success = True
    nsuccess = 0
    kappa = mu = theta_curv = 0.0
    trace = [f0]
    best_x, best_e = x.copy(), e

    for _ in range(int(budget)):
        if success:
            mu = float(d @ r)
            if mu <= 0:
                d = r.copy()
                mu = float(d @ r)
            kappa = float(d @ d)
            if kappa < 1e-300 or mu <= 0:
                break
            sigma = sigma0 / np.sqrt(kappa)
            _, gplus = func_grad(x + sigma * d)
            theta_curv = float(d @ (-np.asarray(gplus) - ge)) / sigma
        delta = theta_curv + (lam - lam_bar) * kappa
        if delta <= 0:
            lam_bar = 2.0 * (lam - delta / kappa)
            delta = -delta + lam * kappa
            lam = lam_bar
        alpha = mu / delta
        fnew, gnew = func_grad(x + alpha * d)
        enew = -fnew
        comparison = 2.0 * delta * (e - enew) / (mu * mu)
        if comparison >= 0:
            x = x + alpha * d
            step = abs(alpha) * np.sqrt(kappa)
            de = e - enew
            e = enew
            ge = -np.asarray(gnew, dtype=float)
            r_new = -ge
            lam_bar = 0.0
            success = True
            nsuccess += 1
            if e < best_e:
                best_e = e
                best_x = x.copy()
                trace.append(-e)
            if nsuccess % n == 0:
                d = r_new.copy()
            else:
                beta = float(r_new @ r_new - r_new @ r) / mu
                d = r_new + beta * d
            r = r_new
            if comparison >= 0.75:
                lam = max(0.25 * lam, 1e-300)
            if step < step_tol and de < grad_tol * (1.0 + abs(e)):
                break
            if float(r @ r) < grad_tol:
                break
        else:
            lam_bar = lam
            success = False
        if comparison < 0.25:
            lam = lam + delta * (1.0 - comparison) / kappa
        if not np.isfinite(lam) or lam > 1e250:
            break  # trust region collapsed: line-search stall
    return best_x, -best_e, trace


# ---------------------------------------------------------------------------
# full fitting loop: VI sweeps alternating with SCG phases
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FitReport:
    trace: list                      # (step, bound, phase) rows
    eta: np.ndarray                  # final E[Z]
    spec: KernelSpec
    priors: object
    state: object
    inducing: np.ndarray
    elbo: float
    converged: bool
    n_sweeps: int
    test_metrics: dict | None = None

    @property
    def elbo_trace(self):
        return np.array([row[1] for row in self.trace])


def fit(dataset, config, spec, priors, seed=None):
    """Alternate VI sweeps with SCG hyperparameter phases until convergence.

    Convergence: relative bound change below ``config.elbo_tol`` for three
    consecutive sweeps and no further gain from the last hyperopt phase (or
    hyperopt disabled); hard cap at ``config.max_iter`` sweeps.

    Coordinate ascent on this bound has multiple local optima; with
    ``config.n_restarts > 1`` the fit is repeated from that many derived
    initialisation seeds and the run with the best final bound is returned.
    """
    base_seed = config.seed if seed is None else seed
    if config.n_restarts > 1:
        best = None
        for r in range(config.n_restarts):
            rep = fit_once(dataset, config, spec, priors,
                           seed=base_seed + 104729 * r)
            if best is None or rep.elbo > best.elbo:
                best = rep
        return best
    return fit_once(dataset, config, spec, priors, seed=base_seed)


def fit_once(dataset, config, spec, priors, seed=None):
    inducing = default_inducing(dataset, config.n_inducing)
    noise_floor = None
    if config.noise_floor > 0.0:
        noise_floor = np.array([config.noise_floor * max(np.var(y), 1e-12)
                                for y in dataset.y])
        priors = priors.replace_noise(np.maximum(priors.noise_var, noise_floor))
    blocks = assemble_blocks(dataset, inducing, spec, threads=config.threads)
    state = init_state(config, dataset, blocks, priors, seed=seed)
    aux = compute_aux(blocks, dataset, priors, state)

    trace = []
    step = 0
    prev = None
    consec = 0
    hyper_stalled = not config.hyperopt
    converged = False
    sweeps = 0
    current = None

    while sweeps < config.max_iter:
        state, current = sweep(state, blocks, dataset, priors, aux)
        sweeps += 1
        step += 1
        trace.append((step, current, "vi"))
        if prev is not None and abs(current - prev) <= config.elbo_tol * (1.0 + abs(current)):
            consec += 1
        else:
            consec = 0
        prev = current
        if consec >= 3 and hyper_stalled:
            converged = True
            break
        if config.hyperopt and sweeps % config.hyperopt_period == 0 and sweeps < config.max_iter:
            pv = encode_params(spec, priors)
            objective = make_objective(pv.names, spec, priors, dataset, state,
                                       inducing, threads=config.threads,
                                       noise_floor=noise_floor)
            theta_best, f_best, scg_vals = scg_maximize(objective, pv.theta,
                                                        budget=config.scg_iters)
            spec, priors = decode_params(pv.names, theta_best, spec, priors,
                                         noise_floor=noise_floor)
            blocks = assemble_blocks(dataset, inducing, spec, threads=config.threads)
            aux = compute_aux(blocks, dataset, priors, state)
            for val in scg_vals[1:]:
                step += 1
                trace.append((step, val, "scg"))
            gain = f_best - current
            hyper_stalled = gain <= config.elbo_tol * (1.0 + abs(f_best))
            if not hyper_stalled:
                consec = 0
            prev = f_best
            current = f_best

    report = FitReport(trace=trace, eta=state.eta.copy(), spec=spec, priors=priors,
                       state=state, inducing=inducing, elbo=float(current),
                       converged=converged, n_sweeps=sweeps)
    if dataset.test_x is not None and dataset.test_y is not None:
        from .predict import predict
        from .simulate import msll, smse

        means, covs = predict(state, blocks, spec, priors, dataset.test_x)
        metrics = {}
        for d in range(dataset.n_outputs):
            tm = float(np.mean(dataset.y[d]))
            tv = float(np.var(dataset.y[d]))
            metrics[d] = {
                "smse": smse(dataset.test_y[d], means[d]),
                "msll": msll(dataset.test_y[d], means[d], np.diag(covs[d]), tm, tv),
            }
        report.test_metrics = metrics
    return report
