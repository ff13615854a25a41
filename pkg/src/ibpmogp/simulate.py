"""Generative sampling from the model plus the standard regression metrics.

The two synthetic fixtures `gs_demo_fixture` and `ode2_demo_fixture` are used
by the experiment scripts and the acceptance suite: three outputs driven by
two latent functions through a known sparse connectivity pattern.
"""

import numpy as np

from .kernels import KernelSpec, jittered_cholesky, output_cov_grid
from .state import Dataset

__all__ = [
    "DegenerateVariance",
    "sample_model",
    "analytic_output_cov",
    "smse",
    "msll",
    "gs_demo_fixture",
    "ode2_demo_fixture",
]


class DegenerateVariance(ValueError):
    """A variance required by a metric is not strictly positive."""


def _as_input_list(inputs, D):
    if isinstance(inputs, (list, tuple)):
        if len(inputs) != D:
            raise ValueError("need one input array per output")
        return [np.asarray(x, dtype=float) for x in inputs]
    return [np.asarray(inputs, dtype=float)] * D


def analytic_output_cov(spec, Z, S, inputs):
    """Full joint covariance of the noise-free outputs at the given inputs."""
    Z = np.asarray(Z, dtype=float)
    S = np.asarray(S, dtype=float)
    D, Q = Z.shape
    xs = _as_input_list(inputs, D)
    sizes = [x.shape[0] for x in xs]
    offs = np.concatenate(([0], np.cumsum(sizes)))
    K = np.zeros((offs[-1], offs[-1]))
    for d in range(D):
        for dp in range(d, D):
            block = np.zeros((sizes[d], sizes[dp]))
            for q in range(Q):
                coef = Z[d, q] * Z[dp, q] * S[d, q] * S[dp, q]
                if coef == 0.0:
                    continue
                block += coef * output_cov_grid(spec, d, dp, q, xs[d], xs[dp])
            K[offs[d]:offs[d + 1], offs[dp]:offs[dp + 1]] = block
            if dp != d:
                K[offs[dp]:offs[dp + 1], offs[d]:offs[d + 1]] = block.T
    return K, sizes, offs


def sample_model(spec, Z, S, noise_std, inputs, seed):
    """Draw one joint realisation of all outputs and wrap it as a Dataset.

    ``noise_std`` may be zero (observations equal the latent functions).
    """
    Z = np.asarray(Z, dtype=float)
    D = Z.shape[0]
    xs = _as_input_list(inputs, D)
    K, sizes, offs = analytic_output_cov(spec, Z, S, inputs)
    rng = np.random.default_rng(seed)
    L, _ = jittered_cholesky(K + 1e-10 * np.mean(np.diag(K) + 1.0) * np.eye(K.shape[0]))
    f = L @ rng.standard_normal(K.shape[0])
    y = []
    for d in range(D):
        yd = f[offs[d]:offs[d + 1]]
        if noise_std > 0:
            yd = yd + noise_std * rng.standard_normal(sizes[d])
        y.append(yd)
    return Dataset(x=[x.reshape(-1, spec.input_dim) for x in xs], y=y)


def smse(y_true, y_pred):
    """Standardised mean squared error: MSE over the variance of the targets."""
    y_true = np.asarray(y_true, dtype=float).ravel()
    y_pred = np.asarray(y_pred, dtype=float).ravel()
    var = float(np.var(y_true))
    if var <= 0.0:
        raise DegenerateVariance("target variance is zero")
    return float(np.mean((y_true - y_pred) ** 2) / var)


def msll(y_true, pred_mean, pred_var, train_mean, train_var):
    """Mean standardised log loss against the trivial Gaussian train-data fit."""
    y = np.asarray(y_true, dtype=float).ravel()
    mu = np.asarray(pred_mean, dtype=float).ravel()
    var = np.asarray(pred_var, dtype=float).ravel()
    if np.any(var <= 0.0) or train_var <= 0.0:
        raise DegenerateVariance("predictive and train variances must be positive")
    loss = 0.5 * np.log(2.0 * np.pi * var) + (y - mu) ** 2 / (2.0 * var)
    trivial = 0.5 * np.log(2.0 * np.pi * train_var) + (y - train_mean) ** 2 / (2.0 * train_var)
    return float(np.mean(loss - trivial))


def gs_demo_fixture():
    """Three-output Gaussian-smoothing example with two active latents."""
    spec = KernelSpec(
        family="GS",
        input_dim=1,
        gs_precision=np.array([[0.01], [1.0 / 120.0], [1.0 / 140.0]]),
        gs_latent_precision=np.array([[0.1], [0.2]]),
    )
    return {
        "spec": spec,
        "Z": np.array([[0, 1], [1, 0], [1, 0]], dtype=float),
        "S": np.array([[0.0, 1.48], [-3.19, 0.0], [6.87, 0.0]]),
        "inputs": np.linspace(0.0, 1.0, 30),
        "noise_std": 0.1,
        "alpha": 1.0,
        "q_trunc": 4,
        "n_inducing": 15,
    }


def ode2_demo_fixture():
    """Three-output damped-oscillator example (noiseless observations)."""
    spec = KernelSpec(
        family="ODE2",
        spring=np.array([4.0, 1.0, 1.0]),
        damper=np.array([0.5, 4.0, 1.0]),
        lengthscale=np.array([0.2, 0.4]),
    )
    return {
        "spec": spec,
        "Z": np.array([[1, 0], [0, 1], [1, 0]], dtype=float),
        "S": np.array([[-2.61, 0.0], [0.0, 2.66], [1.10, 0.0]]),
        "inputs": np.linspace(0.0, 5.0, 50),
        "noise_std": 0.0,
        "alpha": 1.0,
        "q_trunc": 4,
        "n_inducing": 40,
    }
