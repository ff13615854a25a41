"""Probabilistic state: data containers, priors, variational factors.

The variational posterior factorises as

    q(u) q(S, Z) q(gamma) q(upsilon)

with q(u_q) = N(u_mean[q], u_cov[q]), q(Z_dq) = Bernoulli(eta[d, q]),
q(S_dq | Z_dq = 1) = N(mu_s[d, q], nu_s[d, q]), q(gamma_dq) =
Gamma(a_star[d, q], b_star[d, q]) and q(upsilon_q) = Beta(tau1[q], tau2[q]).
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import digamma as _psi, logsumexp

__all__ = [
    "Dataset",
    "Priors",
    "VariationalState",
    "ModelConfig",
    "ZSMoments",
    "init_state",
    "zs_moments",
    "ezs_matrix",
    "ezs2_matrix",
    "expected_log_pi",
    "expected_log_one_minus_pi",
    "all_expected_log_pi",
    "all_stick_bounds",
    "stick_weights",
    "ETA_CLAMP",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
]

ETA_CLAMP = 1e-10


@dataclass(eq=False)
class Dataset:
    """Per-output inputs and targets, with an optional held-out test split."""

    x: list          # D arrays (N_d, p)
    y: list          # D arrays (N_d,)
    test_x: list | None = None
    test_y: list | None = None

    def __post_init__(self):
        self.x = [np.atleast_2d(np.asarray(xi, dtype=float).T).T if np.asarray(xi).ndim == 1
                  else np.asarray(xi, dtype=float) for xi in self.x]
        self.x = [xi.reshape(-1, 1) if xi.ndim == 1 else xi for xi in self.x]
        self.y = [np.asarray(yi, dtype=float).ravel() for yi in self.y]
        if len(self.x) != len(self.y):
            raise ValueError("inputs and targets must have the same number of outputs")
        p = self.x[0].shape[1]
        for d, (xi, yi) in enumerate(zip(self.x, self.y)):
            if xi.shape[0] < 1:
                raise ValueError(f"output {d} has no observations")
            if xi.shape[1] != p:
                raise ValueError("inconsistent input dimension across outputs")
            if xi.shape[0] != yi.shape[0]:
                raise ValueError(f"output {d}: inputs and targets disagree in length")
            if not (np.all(np.isfinite(xi)) and np.all(np.isfinite(yi))):
                raise ValueError(f"output {d}: non-finite values in data")

    @property
    def n_outputs(self):
        return len(self.x)

    @property
    def input_dim(self):
        return self.x[0].shape[1]

    @property
    def n_points(self):
        return [xi.shape[0] for xi in self.x]

    @property
    def n_total(self):
        return int(sum(self.n_points))


@dataclass(eq=False)
class Priors:
    """IBP concentration, Gamma hyper-priors on the slab precisions, noise."""

    alpha: float
    a_gamma: np.ndarray      # (D, Q)
    b_gamma: np.ndarray      # (D, Q)
    noise_var: np.ndarray    # (D,) per-output observation noise variances

    def __post_init__(self):
        self.a_gamma = np.asarray(self.a_gamma, dtype=float)
        self.b_gamma = np.asarray(self.b_gamma, dtype=float)
        self.noise_var = np.asarray(self.noise_var, dtype=float).ravel()
        if self.alpha <= 0:
            raise ValueError("IBP concentration alpha must be positive")
        if np.any(self.a_gamma <= 0) or np.any(self.b_gamma <= 0):
            raise ValueError("Gamma hyperparameters must be positive")
        if np.any(self.noise_var <= 0):
            raise ValueError("noise variances must be positive")

    @classmethod
    def broadcast(cls, alpha, a_gamma, b_gamma, noise_var, D, Q):
        a = np.broadcast_to(np.asarray(a_gamma, dtype=float), (D, Q)).copy()
        b = np.broadcast_to(np.asarray(b_gamma, dtype=float), (D, Q)).copy()
        s = np.broadcast_to(np.asarray(noise_var, dtype=float), (D,)).copy()
        return cls(alpha=float(alpha), a_gamma=a, b_gamma=b, noise_var=s)

    def replace_noise(self, noise_var):
        return Priors(alpha=self.alpha, a_gamma=self.a_gamma.copy(),
                      b_gamma=self.b_gamma.copy(),
                      noise_var=np.asarray(noise_var, dtype=float).ravel())


@dataclass(eq=False)
class VariationalState:
    u_mean: list       # Q arrays (M,)
    u_cov: list        # Q arrays (M, M), PSD
    eta: np.ndarray    # (D, Q) in (0, 1)
    mu_s: np.ndarray   # (D, Q)
    nu_s: np.ndarray   # (D, Q) > 0
    a_star: np.ndarray  # (D, Q) > 0
    b_star: np.ndarray  # (D, Q) > 0
    tau1: np.ndarray   # (Q,) > 0
    tau2: np.ndarray   # (Q,) > 0

    @property
    def n_latents(self):
        return len(self.u_mean)

    @property
    def n_outputs(self):
        return self.eta.shape[0]

    def copy(self):
        return VariationalState(
            u_mean=[u.copy() for u in self.u_mean],
            u_cov=[c.copy() for c in self.u_cov],
            eta=self.eta.copy(), mu_s=self.mu_s.copy(), nu_s=self.nu_s.copy(),
            a_star=self.a_star.copy(), b_star=self.b_star.copy(),
            tau1=self.tau1.copy(), tau2=self.tau2.copy(),
        )


@dataclass
class ModelConfig:
    """Truncation level, inducing layout and the inference schedule."""

    n_latents: int = 4
    n_inducing: int = 15
    inducing_policy: str = "linspace"
    max_iter: int = 500
    elbo_tol: float = 1e-6
    hyperopt_period: int = 10
    scg_iters: int = 20
    hyperopt: bool = True
    seed: int = 0
    n_restarts: int = 1
    noise_floor: float = 0.0   # relative to var(y_d); 0 disables the floor
    threads: int = 1

    def __post_init__(self):
        if self.n_latents < 1 or self.n_inducing < 1:
            raise ValueError("n_latents and n_inducing must be >= 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")


def init_state(config, dataset, blocks, priors, seed=None):
    """Deterministic random initialisation of all variational factors.

    eta starts near one half with a small jitter, slab means are standard
    normal, slab variances one, the Beta factors start at their Beta(alpha, 1)
    prior and q(u_q) starts at the prior N(0, K_uu[q]).
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    D = dataset.n_outputs
    Q = config.n_latents
    eta = 0.5 + rng.uniform(-0.05, 0.05, size=(D, Q))
    mu_s = rng.standard_normal((D, Q))
    nu_s = np.ones((D, Q))
    tau1 = np.full(Q, float(priors.alpha))
    tau2 = np.ones(Q)
    return VariationalState(
        u_mean=[np.zeros(blocks.K_uu[q].shape[0]) for q in range(Q)],
        u_cov=[blocks.K_uu[q].copy() for q in range(Q)],
        eta=eta, mu_s=mu_s, nu_s=nu_s,
        a_star=priors.a_gamma.copy(), b_star=priors.b_gamma.copy(),
        tau1=tau1, tau2=tau2,
    )


class ZSMoments(NamedTuple):
    ez: float
    ezs: float
    ezs2: float
    ezszs: float


def zs_moments(state, d, q, qp=None):
    """Mean-field moments of the spike-and-slab product Z_dq * S_dq.

    ``ezszs`` is E[Z_dq S_dq Z_dq' S_dq'];  for qp == q it coincides with
    E[Z S^2] because Z is binary.
    """
    eta = state.eta[d, q]
    mu = state.mu_s[d, q]
    nu = state.nu_s[d, q]
    ez = eta
    ezs = eta * mu
    ezs2 = eta * (nu + mu * mu)
    if qp is None or qp == q:
        ezszs = ezs2
    else:
        ezszs = ezs * state.eta[d, qp] * state.mu_s[d, qp]
    return ZSMoments(ez=ez, ezs=ezs, ezs2=ezs2, ezszs=ezszs)


def ezs_matrix(state):
    return state.eta * state.mu_s


def ezs2_matrix(state):
    return state.eta * (state.nu_s + state.mu_s**2)


def expected_log_pi(state, q):
    """E[log pi_q] = sum_{i<=q} psi(tau_i1) - psi(tau_i1 + tau_i2) (0-based q)."""
    t1 = state.tau1[: q + 1]
    t2 = state.tau2[: q + 1]
    return float(np.sum(_psi(t1) - _psi(t1 + t2)))


def all_expected_log_pi(state):
    return np.cumsum(_psi(state.tau1) - _psi(state.tau1 + state.tau2))


def stick_weights(tau1, tau2, q):
    """Multinomial weights of the stick-breaking lower bound at level q (0-based).

    Weight i is proportional to
    exp(psi(tau_i2) + sum_{m<i} psi(tau_m1) - sum_{m<=i} psi(tau_m1+tau_m2)).
    Returns (weights, unnormalised logits).
    """
    t1 = np.asarray(tau1, dtype=float)[: q + 1]
    t2 = np.asarray(tau2, dtype=float)[: q + 1]
    psi1 = _psi(t1)
    psi2 = _psi(t2)
    psi12 = _psi(t1 + t2)
    cum1 = np.concatenate(([0.0], np.cumsum(psi1[:-1])))
    cum12 = np.cumsum(psi12)
    logits = psi2 + cum1 - cum12
    w = np.exp(logits - logsumexp(logits))
    return w, logits


def expected_log_one_minus_pi(state, q):
    """Multinomial lower bound on E[log(1 - pi_q)] plus its optimal weights.

    With optimal weights the bound collapses to logsumexp of the logits.
    """
    w, logits = stick_weights(state.tau1, state.tau2, q)
    return float(logsumexp(logits)), w


def all_stick_bounds(state):
    """Bound values (Q,) and weight vectors [q -> (q+1,)] for every level."""
    Q = state.tau1.shape[0]
    values = np.empty(Q)
    weights = []
    for q in range(Q):
        v, w = expected_log_one_minus_pi(state, q)
        values[q] = v
        weights.append(w)
    return values, weights


# ---------------------------------------------------------------------------
# JSON serialization (schema 1)
# ---------------------------------------------------------------------------

def _arr(a):
    return np.asarray(a).tolist()


def model_to_dict(state, spec, priors, inducing):
    kern = {"family": spec.family, "input_dim": spec.input_dim}
    if spec.family == "GS":
        kern["gs_precision"] = _arr(spec.gs_precision)
        kern["gs_latent_precision"] = _arr(spec.gs_latent_precision)
    elif spec.family == "ODE1":
        kern["decay"] = _arr(spec.decay)
        kern["lengthscale"] = _arr(spec.lengthscale)
    else:
        kern["spring"] = _arr(spec.spring)
        kern["damper"] = _arr(spec.damper)
        kern["lengthscale"] = _arr(spec.lengthscale)
    return {
        "schema": 1,
        "kernel": kern,
        "priors": {
            "alpha": priors.alpha,
            "a_gamma": _arr(priors.a_gamma),
            "b_gamma": _arr(priors.b_gamma),
            "noise_var": _arr(priors.noise_var),
        },
        "state": {
            "u_mean": [_arr(u) for u in state.u_mean],
            "u_cov": [_arr(c) for c in state.u_cov],
            "eta": _arr(state.eta),
            "mu_s": _arr(state.mu_s),
            "nu_s": _arr(state.nu_s),
            "a_star": _arr(state.a_star),
            "b_star": _arr(state.b_star),
            "tau1": _arr(state.tau1),
            "tau2": _arr(state.tau2),
        },
        "inducing": _arr(inducing),
    }


def model_from_dict(doc):
    from .kernels import KernelSpec

    if doc.get("schema") != 1:
        raise ValueError(f"unsupported model schema {doc.get('schema')!r}")
    k = doc["kernel"]
    kw = {key: np.asarray(val) for key, val in k.items()
          if key not in ("family", "input_dim")}
    spec = KernelSpec(family=k["family"], input_dim=int(k["input_dim"]), **kw)
    pr = doc["priors"]
    priors = Priors(alpha=float(pr["alpha"]), a_gamma=np.asarray(pr["a_gamma"]),
                    b_gamma=np.asarray(pr["b_gamma"]),
                    noise_var=np.asarray(pr["noise_var"]))
    st = doc["state"]
    state = VariationalState(
        u_mean=[np.asarray(u, dtype=float) for u in st["u_mean"]],
        u_cov=[np.asarray(c, dtype=float) for c in st["u_cov"]],
        eta=np.asarray(st["eta"], dtype=float),
        mu_s=np.asarray(st["mu_s"], dtype=float),
        nu_s=np.asarray(st["nu_s"], dtype=float),
        a_star=np.asarray(st["a_star"], dtype=float),
        b_star=np.asarray(st["b_star"], dtype=float),
        tau1=np.asarray(st["tau1"], dtype=float),
        tau2=np.asarray(st["tau2"], dtype=float),
    )
    inducing = np.asarray(doc["inducing"], dtype=float)
    return state, spec, priors, inducing


def save_model(path, state, spec, priors, inducing):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(state, spec, priors, inducing), fh, indent=1)


def load_model(path):
    with open(path, "r", encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
