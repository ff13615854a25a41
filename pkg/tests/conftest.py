import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import ibpmogp as m


def make_instance(rng, family="GS", D=2, Q=2, N=6, M=3, x_hi=1.0,
                  randomize_state=True):
    """Small random model instance for property tests."""
    if family == "GS":
        spec = m.KernelSpec(family="GS",
                            gs_precision=rng.uniform(0.5, 4.0, (D, 1)),
                            gs_latent_precision=rng.uniform(0.3, 3.0, (Q, 1)))
    elif family == "ODE1":
        spec = m.KernelSpec(family="ODE1", decay=rng.uniform(0.4, 3.0, D),
                            lengthscale=rng.uniform(0.15, 0.8, Q))
    else:
        B = rng.uniform(0.8, 4.0, D)
        C = 2.0 * np.sqrt(B) * rng.uniform(0.2, 0.9, D)
        spec = m.KernelSpec(family="ODE2", spring=B, damper=C,
                            lengthscale=rng.uniform(0.15, 0.8, Q))
    xs = [np.sort(rng.uniform(0.0, x_hi, (N, 1)), axis=0) for _ in range(D)]
    ys = [rng.standard_normal(N) for _ in range(D)]
    ds = m.Dataset(x=xs, y=ys)
    priors = m.Priors.broadcast(1.0, 1.0, 1.0, rng.uniform(0.05, 0.5, D), D, Q)
    cfg = m.ModelConfig(n_latents=Q, n_inducing=M, seed=0)
    inducing = m.default_inducing(ds, M)
    blocks = m.assemble_blocks(ds, inducing, spec)
    state = m.init_state(cfg, ds, blocks, priors, seed=int(rng.integers(1 << 30)))
    if randomize_state:
        for q in range(Q):
            state.u_mean[q] = rng.standard_normal(M)
            A = rng.standard_normal((M, M))
            state.u_cov[q] = A @ A.T + 0.5 * np.eye(M)
        state.eta = rng.uniform(0.05, 0.95, (D, Q))
        state.mu_s = rng.standard_normal((D, Q))
        state.nu_s = rng.uniform(0.2, 2.0, (D, Q))
        state.a_star = rng.uniform(0.5, 3.0, (D, Q))
        state.b_star = rng.uniform(0.5, 3.0, (D, Q))
        state.tau1 = rng.uniform(0.5, 3.0, Q)
        state.tau2 = rng.uniform(0.5, 3.0, Q)
    return spec, ds, priors, cfg, blocks, state


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
