import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import ibpmogp as m
from ibpmogp.state import (
    all_stick_bounds,
    expected_log_one_minus_pi,
    expected_log_pi,
    model_from_dict,
    model_to_dict,
    stick_weights,
    zs_moments,
)
from oracles import mc_log_one_minus_pi, mc_zs_moments


def _small_setup(rng, alpha=1.0):
    spec = m.KernelSpec(family="ODE1", decay=[1.0, 2.0], lengthscale=[0.3, 0.5, 0.7])
    ds = m.Dataset(x=[np.sort(rng.uniform(0, 1, (5, 1)), axis=0) for _ in range(2)],
                   y=[rng.standard_normal(5) for _ in range(2)])
    priors = m.Priors.broadcast(alpha, 0.5, 0.5, [0.1, 0.2], 2, 3)
    cfg = m.ModelConfig(n_latents=3, n_inducing=4, seed=11)
    blocks = m.assemble_blocks(ds, m.default_inducing(ds, 4), spec)
    return spec, ds, priors, cfg, blocks


# ---------------------------------------------------------------------------
# Dataset validation
# ---------------------------------------------------------------------------

def test_dataset_rejects_nan():
    with pytest.raises(ValueError):
        m.Dataset(x=[np.array([[0.1], [np.nan]])], y=[np.array([1.0, 2.0])])


def test_dataset_rejects_empty_output():
    with pytest.raises(ValueError):
        m.Dataset(x=[np.zeros((0, 1))], y=[np.zeros(0)])


def test_dataset_rejects_inconsistent_dim():
    with pytest.raises(ValueError):
        m.Dataset(x=[np.zeros((3, 1)), np.zeros((3, 2))],
                  y=[np.zeros(3), np.zeros(3)])


def test_dataset_counts(rng):
    ds = m.Dataset(x=[rng.uniform(0, 1, (4, 1)), rng.uniform(0, 1, (6, 1))],
                   y=[rng.standard_normal(4), rng.standard_normal(6)])
    assert ds.n_outputs == 2
    assert ds.n_points == [4, 6]
    assert ds.n_total == 10


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def test_init_state_deterministic(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    s1 = m.init_state(cfg, ds, blocks, priors, seed=42)
    s2 = m.init_state(cfg, ds, blocks, priors, seed=42)
    assert np.array_equal(s1.eta, s2.eta)
    assert np.array_equal(s1.mu_s, s2.mu_s)
    assert all(np.array_equal(a, b) for a, b in zip(s1.u_mean, s2.u_mean))


def test_init_state_eta_band(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    assert np.all(st_.eta >= 0.45) and np.all(st_.eta <= 0.55)


def test_init_state_beta_prior(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng, alpha=1.0)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    assert np.allclose(st_.tau1, 1.0)
    assert np.allclose(st_.tau2, 1.0)


def test_init_state_u_prior(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    for q in range(3):
        assert np.allclose(st_.u_mean[q], 0.0)
        assert np.array_equal(st_.u_cov[q], blocks.K_uu[q])


# ---------------------------------------------------------------------------
# ZS moments
# ---------------------------------------------------------------------------

def _state_with(rng, eta, mu, nu):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    st_.eta[0, 0] = eta
    st_.mu_s[0, 0] = mu
    st_.nu_s[0, 0] = nu
    return st_


def test_zs_moments_plugin(rng):
    st_ = _state_with(rng, 1.0, 2.0, 0.5)
    mom = zs_moments(st_, 0, 0)
    assert mom.ezs == pytest.approx(2.0)
    assert mom.ezs2 == pytest.approx(4.5)


def test_zs_moments_inactive(rng):
    st_ = _state_with(rng, 0.0, 3.0, 1.0)
    mom = zs_moments(st_, 0, 0)
    assert mom.ez == 0.0 and mom.ezs == 0.0 and mom.ezs2 == 0.0


def test_zs_moments_factorise_across_latents(rng):
    st_ = _state_with(rng, 0.6, 1.5, 0.4)
    st_.eta[0, 1], st_.mu_s[0, 1] = 0.3, -2.0
    mom = zs_moments(st_, 0, 0, 1)
    assert mom.ezszs == pytest.approx(0.6 * 1.5 * 0.3 * -2.0)
    assert zs_moments(st_, 0, 0, 0).ezszs == pytest.approx(mom.ezs2)


def test_zs_moments_monte_carlo(rng):
    for _ in range(5):
        eta = float(rng.uniform(0.1, 0.9))
        mu = float(rng.standard_normal())
        nu = float(rng.uniform(0.1, 2.0))
        st_ = _state_with(rng, eta, mu, nu)
        mom = zs_moments(st_, 0, 0)
        mc = mc_zs_moments(eta, mu, nu, 10**6, seed=int(rng.integers(1 << 30)))
        for key, exact in [("ez", mom.ez), ("ezs", mom.ezs), ("ezs2", mom.ezs2)]:
            est, se = mc[key]
            assert abs(exact - est) <= 3 * se + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(-5, 5), st.floats(1e-3, 5))
def test_zs_moments_cauchy_schwarz(eta, mu, nu):
    ezs = eta * mu
    ezs2 = eta * (nu + mu * mu)
    assert ezs**2 <= eta * ezs2 + 1e-12


# ---------------------------------------------------------------------------
# stick-breaking expectations
# ---------------------------------------------------------------------------

def test_expected_log_pi_uniform_taus(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    st_.tau1 = np.ones(3)
    st_.tau2 = np.ones(3)
    # psi(1) - psi(2) = -1
    assert expected_log_pi(st_, 0) == pytest.approx(-1.0)
    assert expected_log_pi(st_, 1) == pytest.approx(-2.0)


def test_expected_log_pi_nonincreasing(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    st_.tau1 = rng.uniform(0.5, 4.0, 3)
    st_.tau2 = rng.uniform(0.5, 4.0, 3)
    vals = [expected_log_pi(st_, q) for q in range(3)]
    assert vals[0] >= vals[1] >= vals[2]


def test_stick_weights_normalised(rng):
    t1 = rng.uniform(0.5, 4.0, 5)
    t2 = rng.uniform(0.5, 4.0, 5)
    for q in range(5):
        w, _ = stick_weights(t1, t2, q)
        assert w.shape == (q + 1,)
        assert np.all(w >= 0)
        assert np.sum(w) == pytest.approx(1.0)


def test_stick_bound_below_monte_carlo(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    st_.tau1 = rng.uniform(0.8, 4.0, 3)
    st_.tau2 = rng.uniform(0.8, 4.0, 3)
    for q in range(3):
        bound, w = expected_log_one_minus_pi(st_, q)
        est, se = mc_log_one_minus_pi(st_.tau1, st_.tau2, q, 10**5,
                                      seed=int(rng.integers(1 << 30)))
        assert bound <= est + 3 * se
        assert np.sum(w) == pytest.approx(1.0)


def test_all_stick_bounds_consistent(rng):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=0)
    st_.tau1 = rng.uniform(0.5, 4.0, 3)
    st_.tau2 = rng.uniform(0.5, 4.0, 3)
    vals, weights = all_stick_bounds(st_)
    for q in range(3):
        v, w = expected_log_one_minus_pi(st_, q)
        assert vals[q] == pytest.approx(v)
        assert np.allclose(weights[q], w)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_model_roundtrip_bit_exact(rng, tmp_path):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=3)
    st_.mu_s = rng.standard_normal((2, 3))
    path = tmp_path / "model.json"
    m.save_model(path, st_, spec, priors, blocks.inducing)
    st2, spec2, priors2, ind2 = m.load_model(path)
    assert np.array_equal(st2.eta, st_.eta)
    assert np.array_equal(st2.mu_s, st_.mu_s)
    assert np.array_equal(st2.tau1, st_.tau1)
    assert all(np.array_equal(a, b) for a, b in zip(st2.u_cov, st_.u_cov))
    assert np.array_equal(ind2, blocks.inducing)
    assert np.array_equal(spec2.decay, spec.decay)
    assert np.array_equal(priors2.noise_var, priors.noise_var)
    # a second save produces identical bytes
    path2 = tmp_path / "model2.json"
    m.save_model(path2, st2, spec2, priors2, ind2)
    assert path.read_bytes() == path2.read_bytes()


def test_model_schema_version_checked(rng, tmp_path):
    spec, ds, priors, cfg, blocks = _small_setup(rng)
    st_ = m.init_state(cfg, ds, blocks, priors, seed=3)
    doc = model_to_dict(st_, spec, priors, blocks.inducing)
    assert doc["schema"] == 1
    doc["schema"] = 2
    with pytest.raises(ValueError):
        model_from_dict(doc)
