"""Closed-form covariance functions for convolved multi-output GPs.

Three families are implemented, each the analytic solution of the
smoothing-kernel convolution of a shared latent GP:

* ``GS``   -- Gaussian smoothing kernels in p dimensions.  Both the smoothing
  kernel of output d and the latent covariance of latent q are normalised
  Gaussians with diagonal precisions ``P_d`` and ``Lambda_q``; convolution
  adds the covariances, so every block is again a normalised Gaussian.
* ``ODE1`` -- causal exponential Green's function ``exp(-B_d t)`` of a first
  order ODE driven by RBF latents ``exp(-(t-t')^2 / l_q^2)``.
* ``ODE2`` -- damped oscillator Green's function
  ``exp(-alpha_d t) sin(omega_d t) / omega_d`` of a second order ODE
  (unit mass), same RBF latents.  Evaluated in complex arithmetic through the
  conjugate roots ``gamma_d = alpha_d + i omega_d``, which also covers the
  overdamped case (imaginary ``omega_d``).

Sensitivities are deliberately *not* baked into any kernel value: every
function returns the S-free form so the variational moments of Z*S can scale
the blocks externally.

All ``*_grads`` variants additionally return analytic derivatives with respect
to the raw (not log) kernel parameters, keyed by tuples such as
``("decay", d)`` or ``("gs_ell", q, i)``.
"""

from dataclasses import dataclass, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .special import erfcx_complex

__all__ = [
    "KernelError",
    "SingularPrecision",
    "DegenerateDecay",
    "CriticalDamping",
    "CholeskyFailure",
    "KernelSpec",
    "CovBlocks",
    "latent_cov",
    "gs_output_cov",
    "gs_cross_cov",
    "ode1_output_cov",
    "ode1_cross_cov",
    "ode2_output_cov",
    "ode2_cross_cov",
    "output_cov",
    "cross_cov",
    "latent_cov_grid",
    "cross_cov_grid",
    "output_cov_grid",
    "output_cov_diag",
    "latent_cov_grid_grads",
    "cross_cov_grid_grads",
    "output_cov_diag_grads",
    "jittered_cholesky",
    "default_inducing",
    "assemble_blocks",
]

_SQRT_PI = np.sqrt(np.pi)
_CRIT_TOL = 1e-10
_DECAY_TOL = 1e-12


class KernelError(Exception):
    pass


class SingularPrecision(KernelError):
    """A GS precision entry is not strictly positive."""


class DegenerateDecay(KernelError):
    """ODE1 decay sum B_d + B_d' too close to zero."""


class CriticalDamping(KernelError):
    """ODE2 at (or numerically at) critical damping: 4B = C^2."""


class CholeskyFailure(KernelError):
    """Covariance not positive definite even after jitter escalation."""


@dataclass(eq=False)
class KernelSpec:
    """Kernel family plus per-output and per-latent parameters.

    GS uses diagonal precision entries ``gs_precision[d, i]`` of P_d and
    ``gs_latent_precision[q, i]`` of Lambda_q.  The ODE families are scalar-input
    (p = 1) with per-latent RBF length-scales ``lengthscale[q]``; ODE1 carries
    decays ``decay[d]`` and ODE2 spring/damper constants (mass fixed at one).
    """

    family: str
    input_dim: int = 1
    gs_precision: np.ndarray | None = None          # (D, p)
    gs_latent_precision: np.ndarray | None = None   # (Q, p)
    decay: np.ndarray | None = None                 # (D,)  ODE1
    spring: np.ndarray | None = None                # (D,)  ODE2
    damper: np.ndarray | None = None                # (D,)  ODE2
    lengthscale: np.ndarray | None = None           # (Q,)  ODE1/ODE2

    def __post_init__(self):
        if self.family not in ("GS", "ODE1", "ODE2"):
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "GS":
            self.gs_precision = np.atleast_2d(np.asarray(self.gs_precision, dtype=float))
            self.gs_latent_precision = np.atleast_2d(
                np.asarray(self.gs_latent_precision, dtype=float)
            )
            if np.any(self.gs_precision <= 0) or np.any(self.gs_latent_precision <= 0):
                raise SingularPrecision("GS precisions must be strictly positive")
            if self.gs_precision.shape[1] != self.input_dim:
                raise ValueError("gs_precision shape inconsistent with input_dim")
            if self.gs_latent_precision.shape[1] != self.input_dim:
                raise ValueError("gs_latent_precision shape inconsistent with input_dim")
        else:
            if self.input_dim != 1:
                raise ValueError("ODE families are defined for scalar inputs only")
            self.lengthscale = np.asarray(self.lengthscale, dtype=float).ravel()
            if np.any(self.lengthscale <= 0):
                raise ValueError("length-scales must be strictly positive")
            if self.family == "ODE1":
                self.decay = np.asarray(self.decay, dtype=float).ravel()
                if np.any(self.decay <= 0):
                    raise DegenerateDecay("ODE1 decays must be strictly positive")
            else:
                self.spring = np.asarray(self.spring, dtype=float).ravel()
                self.damper = np.asarray(self.damper, dtype=float).ravel()
                if np.any(self.spring <= 0) or np.any(self.damper <= 0):
                    raise ValueError("ODE2 spring and damper constants must be positive")

    @property
    def n_outputs(self):
        if self.family == "GS":
            return self.gs_precision.shape[0]
        if self.family == "ODE1":
            return self.decay.shape[0]
        return self.spring.shape[0]

    @property
    def n_latents(self):
        if self.family == "GS":
            return self.gs_latent_precision.shape[0]
        return self.lengthscale.shape[0]

    def replace(self, **kw):
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# GS family: products of 1-d Gaussians with summed variances
# ---------------------------------------------------------------------------

def _as_points(x, p):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if p == 1 else x.reshape(1, -1)
    return x


def _gs_gauss(diffs, v):
    # diffs: (N, M, p) pairwise differences; v: (p,) per-dimension variances
    norm = (2.0 * np.pi) ** (-0.5 * len(v)) * np.prod(v) ** -0.5
    quad = 0.5 * np.sum(diffs**2 / v, axis=-1)
    return norm * np.exp(-quad)


def _gs_pair_variance(spec, q, d=None, dp=None):
    v = 1.0 / spec.gs_latent_precision[q]
    if d is not None:
        v = v + 1.0 / spec.gs_precision[d]
    if dp is not None:
        v = v + 1.0 / spec.gs_precision[dp]
    return v


def _pair_diffs(X, X2):
    return X[:, None, :] - X2[None, :, :]


def _gs_grid(spec, q, X, X2, d=None, dp=None):
    diffs = _pair_diffs(X, X2)
    return _gs_gauss(diffs, _gs_pair_variance(spec, q, d, dp))


def _gs_grid_grads(spec, q, X, X2, d=None, dp=None):
    """GS value plus derivatives w.r.t. the raw precision entries."""
    diffs = _pair_diffs(X, X2)
    v = _gs_pair_variance(spec, q, d, dp)
    K = _gs_gauss(diffs, v)
    # dK/dv_i, then chain through v_i = sum of reciprocal precisions
    dK_dv = K[..., None] * (-0.5 / v + 0.5 * diffs**2 / v**2)
    grads = {}
    ell = spec.gs_latent_precision[q]
    for i in range(spec.input_dim):
        grads[("gs_ell", q, i)] = dK_dv[..., i] * (-1.0 / ell[i] ** 2)
    if d is not None:
        pd = spec.gs_precision[d]
        for i in range(spec.input_dim):
            grads[("gs_p", d, i)] = dK_dv[..., i] * (-1.0 / pd[i] ** 2)
    if dp is not None:
        pdp = spec.gs_precision[dp]
        for i in range(spec.input_dim):
            g = dK_dv[..., i] * (-1.0 / pdp[i] ** 2)
            if ("gs_p", dp, i) in grads:
                grads[("gs_p", dp, i)] = grads[("gs_p", dp, i)] + g
            else:
                grads[("gs_p", dp, i)] = g
    return K, grads


# ---------------------------------------------------------------------------
# ODE families: h and Upsilon building blocks (complex-safe)
# ---------------------------------------------------------------------------

_ERFCX_SWAP = -26.0  # below this Re(x), erfcx must be reflected to avoid overflow


def _scaled_erfcx(x, expo, alt):
    """exp(expo) * erfcx(x) elementwise, with ``alt = expo + x**2``.

    For Re x below the swap threshold the reflection
    erfcx(x) = 2 exp(x^2) - erfcx(-x) is applied analytically so that neither
    factor overflows.  Returns (T, W) where W is the coefficient of dx in
    dT = T d(expo) + W dx.
    """
    x = np.asarray(x, dtype=complex)
    expo = np.broadcast_to(np.asarray(expo, dtype=complex), x.shape)
    alt = np.broadcast_to(np.asarray(alt, dtype=complex), x.shape)
    T = np.empty(x.shape, dtype=complex)
    W = np.empty(x.shape, dtype=complex)
    two_rpi = 2.0 / _SQRT_PI
    swap = x.real < _ERFCX_SWAP
    if np.any(~swap):
        xs = x[~swap]
        E = np.exp(expo[~swap])
        F = erfcx_complex(xs)
        T[~swap] = E * F
        W[~swap] = E * (2.0 * xs * F - two_rpi)
    if np.any(swap):
        xu = x[swap]
        Ea = np.exp(alt[swap])
        E = np.exp(expo[swap])
        Fm = erfcx_complex(-xu)
        T[swap] = 2.0 * Ea - E * Fm
        W[swap] = 4.0 * xu * Ea + E * (-2.0 * xu * Fm - two_rpi)
    return T, W


def _upsilon(gamma, t, z, ell, with_grads=False):
    """Single-convolution primitive: int_0^t exp(-gamma (t-a)) rbf(a, z) da
    equals (sqrt(pi) ell / 2) * Upsilon(gamma, t, z).

    Evaluated through scaled complementary error functions,
    Upsilon = exp(-(d/l)^2) erfcx(nu - d/l) - exp(-(z/l)^2 - gamma t)
    erfcx(nu + z/l) with d = t - z and nu = l gamma / 2, which is stable for
    all argument magnitudes.  ``gamma`` may be complex and may carry leading
    batch dimensions that broadcast against the time grids.
    """
    gamma = np.asarray(gamma, dtype=complex)
    t, z = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(z, dtype=float))
    nu = 0.5 * ell * gamma
    delta = t - z
    x1 = nu - delta / ell
    expo1 = -((delta / ell) ** 2)
    alt1 = nu * nu - gamma * delta
    x2 = nu + z / ell
    expo2 = -((z / ell) ** 2) - gamma * t
    alt2 = expo2 + x2 * x2
    T1, W1 = _scaled_erfcx(x1, expo1, alt1)
    T2, W2 = _scaled_erfcx(x2, expo2, alt2)
    U = T1 - T2
    if not with_grads:
        return U
    # dT = T d(expo) + W dx with dexpo1/dg = 0, dx1/dg = dx2/dg = l/2,
    # dexpo2/dg = -t;  l-derivatives through both expo and x
    dU_dg = W1 * (0.5 * ell) - (T2 * (-t) + W2 * (0.5 * ell))
    dU_dl = (
        T1 * (2.0 * delta**2 / ell**3)
        + W1 * (0.5 * gamma + delta / ell**2)
        - T2 * (2.0 * z**2 / ell**3)
        - W2 * (0.5 * gamma - z / ell**2)
    )
    return U, dU_dg, dU_dl


def _h_func(beta1, beta2, s1, s2, ell, with_grads=False):
    """Double-convolution primitive for the ODE kernels (betas may be complex).

    h(b1, b2, s1, s2) = [Upsilon(b1, s1, s2) - exp(-b2 s2) Upsilon(b1, s1, 0)]
    / (b1 + b2); the calling code combines h with its argument-swapped mirror.
    The z = 0 term only depends on s1, so it is evaluated on s1's shape and
    broadcast against the decay factor.
    """
    beta1 = np.asarray(beta1, dtype=complex)
    beta2 = np.asarray(beta2, dtype=complex)
    s1 = np.asarray(s1, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    Dn = 1.0 / (beta1 + beta2)
    decay = np.exp(-beta2 * s2)
    if not with_grads:
        Ua = _upsilon(beta1, s1, s2, ell)
        Ub = _upsilon(beta1, s1, np.zeros_like(s1), ell)
        return Dn * (Ua - decay * Ub)
    Ua, dUa_dg, dUa_dl = _upsilon(beta1, s1, s2, ell, with_grads=True)
    Ub, dUb_dg, dUb_dl = _upsilon(beta1, s1, np.zeros_like(s1), ell,
                                  with_grads=True)
    h = Dn * (Ua - decay * Ub)
    dh_db1 = Dn * (dUa_dg - decay * dUb_dg) - Dn * h
    dh_db2 = Dn * s2 * decay * Ub - Dn * h
    dh_dl = Dn * (dUa_dl - decay * dUb_dl)
    return h, dh_db1, dh_db2, dh_dl


def _ode2_roots(spec, d):
    B = spec.spring[d]
    C = spec.damper[d]
    disc = 4.0 * B - C * C
    if abs(disc) < _CRIT_TOL:
        raise CriticalDamping(f"output {d}: 4B - C^2 = {disc:.3e} too close to zero")
    omega = 0.5 * np.sqrt(complex(disc))
    gamma = 0.5 * C + 1j * omega
    gamma_t = 0.5 * C - 1j * omega
    return gamma, gamma_t, omega


_ODE2_SIGNS = np.array([1.0, 1.0, -1.0, -1.0])


def _ode2_groups(g_d, gt_d, g_dp, gt_dp):
    """Eight-h expansion of ODE2, grouped by time-argument order.

    Group A is evaluated at (s1, s2) = (t', t) and group B at (t, t'); each
    carries four stacked root pairs with signs (+, +, -, -).
    """
    a1A = np.array([g_dp, gt_dp, gt_dp, g_dp])
    a2A = np.array([gt_d, g_d, gt_d, g_d])
    a1B = np.array([gt_d, g_d, gt_d, g_d])
    a2B = np.array([g_dp, gt_dp, gt_dp, g_dp])
    return (a1A, a2A), (a1B, a2B)


def _ode2_hsum(g_d, gt_d, g_dp, gt_dp, t, t2, ell):
    """Signed sum of the eight h terms over broadcastable time grids."""
    (a1A, a2A), (a1B, a2B) = _ode2_groups(g_d, gt_d, g_dp, gt_dp)
    shape = (4,) + (1,) * max(np.ndim(t), np.ndim(t2))
    sg = _ODE2_SIGNS.reshape(shape)
    hA = _h_func(a1A.reshape(shape), a2A.reshape(shape), t2, t, ell)
    hB = _h_func(a1B.reshape(shape), a2B.reshape(shape), t, t2, ell)
    return np.sum(sg * hA, axis=0) + np.sum(sg * hB, axis=0)


def _as_times(x):
    return np.asarray(x, dtype=float).reshape(-1)


# ---------------------------------------------------------------------------
# grid evaluations (value only)
# ---------------------------------------------------------------------------

def latent_cov_grid(spec, q, X, X2):
    """Latent covariance k_q between two point sets; (N, M) array."""
    if spec.family == "GS":
        X = _as_points(X, spec.input_dim)
        X2 = _as_points(X2, spec.input_dim)
        diffs = _pair_diffs(X, X2)
        lam = spec.gs_latent_precision[q]
        norm = (2.0 * np.pi) ** (-0.5 * spec.input_dim) * np.prod(lam) ** 0.5
        return norm * np.exp(-0.5 * np.sum(diffs**2 * lam, axis=-1))
    t = _as_times(X)[:, None]
    t2 = _as_times(X2)[None, :]
    return np.exp(-((t - t2) ** 2) / spec.lengthscale[q] ** 2)


def cross_cov_grid(spec, d, q, X, Z):
    """Output-to-latent covariance block (S-free); (N, M) array."""
    if spec.family == "GS":
        return _gs_grid(spec, q, _as_points(X, spec.input_dim),
                        _as_points(Z, spec.input_dim), d=d)
    ell = spec.lengthscale[q]
    t = _as_times(X)[:, None]
    z = _as_times(Z)[None, :]
    if spec.family == "ODE1":
        return 0.5 * _SQRT_PI * ell * np.real(_upsilon(spec.decay[d], t, z, ell))
    gamma, gamma_t, omega = _ode2_roots(spec, d)
    coef = _SQRT_PI * ell / (4j * omega)
    return np.real(coef * (_upsilon(gamma_t, t, z, ell) - _upsilon(gamma, t, z, ell)))


def output_cov_grid(spec, d, dp, q, X, X2):
    """Output-to-output covariance block for latent q (S-free); (N, M) array."""
    if spec.family == "GS":
        return _gs_grid(spec, q, _as_points(X, spec.input_dim),
                        _as_points(X2, spec.input_dim), d=d, dp=dp)
    ell = spec.lengthscale[q]
    t = _as_times(X)[:, None]
    t2 = _as_times(X2)[None, :]
    if spec.family == "ODE1":
        Bd = spec.decay[d]
        Bdp = spec.decay[dp]
        if Bd + Bdp < _DECAY_TOL:
            raise DegenerateDecay("B_d + B_d' below tolerance")
        val = _h_func(Bdp, Bd, t2, t, ell) + _h_func(Bd, Bdp, t, t2, ell)
        return 0.5 * _SQRT_PI * ell * np.real(val)
    g_d, gt_d, om_d = _ode2_roots(spec, d)
    g_dp, gt_dp, om_dp = _ode2_roots(spec, dp)
    k0 = ell * _SQRT_PI / (8.0 * om_d * om_dp)
    return np.real(k0 * _ode2_hsum(g_d, gt_d, g_dp, gt_dp, t, t2, ell))


def ode2_output_cov_real_branch(spec, d, dp, q, X, X2):
    """Simplified four-term form valid when both omegas are real (underdamped)."""
    g_d, gt_d, om_d = _ode2_roots(spec, d)
    g_dp, gt_dp, om_dp = _ode2_roots(spec, dp)
    if abs(om_d.imag) > 0 or abs(om_dp.imag) > 0:
        raise CriticalDamping("real-branch form requires underdamped outputs")
    ell = spec.lengthscale[q]
    t = _as_times(X)[:, None]
    t2 = _as_times(X2)[None, :]
    k0 = ell * _SQRT_PI / (8.0 * om_d.real * om_dp.real)
    val = (
        _h_func(g_dp, gt_d, t2, t, ell)
        + _h_func(gt_d, g_dp, t, t2, ell)
        - _h_func(g_dp, g_d, t2, t, ell)
        - _h_func(g_d, g_dp, t, t2, ell)
    )
    return 2.0 * k0 * np.real(val)


def output_cov_diag(spec, d, q, X):
    """Diagonal of the (d, d) output block for latent q; (N,) vector."""
    if spec.family == "GS":
        v = _gs_pair_variance(spec, q, d, d)
        n = _as_points(X, spec.input_dim).shape[0]
        norm = (2.0 * np.pi) ** (-0.5 * spec.input_dim) * np.prod(v) ** -0.5
        return np.full(n, norm)
    ell = spec.lengthscale[q]
    t = _as_times(X)
    if spec.family == "ODE1":
        B = spec.decay[d]
        return 0.5 * _SQRT_PI * ell * np.real(2.0 * _h_func(B, B, t, t, ell))
    g_d, gt_d, om_d = _ode2_roots(spec, d)
    k0 = ell * _SQRT_PI / (8.0 * om_d * om_d)
    return np.real(k0 * _ode2_hsum(g_d, gt_d, g_d, gt_d, t, t, ell))


# ---------------------------------------------------------------------------
# scalar convenience wrappers
# ---------------------------------------------------------------------------

def latent_cov(spec, q, x, x2):
    return float(latent_cov_grid(spec, q, x, x2)[0, 0])


def gs_output_cov(spec, d, dp, q, x, x2):
    return float(output_cov_grid(spec, d, dp, q, x, x2)[0, 0])


def gs_cross_cov(spec, d, q, x, z):
    return float(cross_cov_grid(spec, d, q, x, z)[0, 0])


def ode1_output_cov(spec, d, dp, q, t, t2):
    return float(output_cov_grid(spec, d, dp, q, t, t2)[0, 0])


def ode1_cross_cov(spec, d, q, t, t2):
    return float(cross_cov_grid(spec, d, q, t, t2)[0, 0])


def ode2_output_cov(spec, d, dp, q, t, t2):
    return float(output_cov_grid(spec, d, dp, q, t, t2)[0, 0])


def ode2_cross_cov(spec, d, q, t, t2):
    return float(cross_cov_grid(spec, d, q, t, t2)[0, 0])


def output_cov(spec, d, dp, q, x, x2):
    return float(output_cov_grid(spec, d, dp, q, x, x2)[0, 0])


def cross_cov(spec, d, q, x, z):
    return float(cross_cov_grid(spec, d, q, x, z)[0, 0])


# ---------------------------------------------------------------------------
# grid evaluations with analytic parameter derivatives
# ---------------------------------------------------------------------------

def latent_cov_grid_grads(spec, q, X, X2):
    if spec.family == "GS":
        X = _as_points(X, spec.input_dim)
        X2 = _as_points(X2, spec.input_dim)
        diffs = _pair_diffs(X, X2)
        lam = spec.gs_latent_precision[q]
        norm = (2.0 * np.pi) ** (-0.5 * spec.input_dim) * np.prod(lam) ** 0.5
        K = norm * np.exp(-0.5 * np.sum(diffs**2 * lam, axis=-1))
        grads = {}
        for i in range(spec.input_dim):
            grads[("gs_ell", q, i)] = K * (0.5 / lam[i] - 0.5 * diffs[..., i] ** 2)
        return K, grads
    ell = spec.lengthscale[q]
    t = _as_times(X)[:, None]
    t2 = _as_times(X2)[None, :]
    r2 = (t - t2) ** 2
    K = np.exp(-r2 / ell**2)
    return K, {("ell", q): K * 2.0 * r2 / ell**3}


def cross_cov_grid_grads(spec, d, q, X, Z):
    if spec.family == "GS":
        return _gs_grid_grads(spec, q, _as_points(X, spec.input_dim),
                              _as_points(Z, spec.input_dim), d=d)
    ell = spec.lengthscale[q]
    t = _as_times(X)[:, None]
    z = _as_times(Z)[None, :]
    if spec.family == "ODE1":
        U, dU_dg, dU_dl = _upsilon(spec.decay[d], t, z, ell, with_grads=True)
        pref = 0.5 * _SQRT_PI * ell
        K = pref * np.real(U)
        return K, {
            ("decay", d): pref * np.real(dU_dg),
            ("ell", q): 0.5 * _SQRT_PI * np.real(U) + pref * np.real(dU_dl),
        }
    gamma, gamma_t, omega = _ode2_roots(spec, d)
    C = spec.damper[d]
    coef = _SQRT_PI * ell / (4j * omega)
    Ut, dUt_dg, dUt_dl = _upsilon(gamma_t, t, z, ell, with_grads=True)
    Ug, dUg_dg, dUg_dl = _upsilon(gamma, t, z, ell, with_grads=True)
    Kc = coef * (Ut - Ug)
    # gamma = C/2 + i*omega, gamma_t = conj; omega depends on both B and C
    dg_dB = 1j / (2.0 * omega)
    dgt_dB = -dg_dB
    dg_dC = 0.5 - 1j * C / (4.0 * omega)
    dgt_dC = 0.5 + 1j * C / (4.0 * omega)
    dK_dB = -Kc / (2.0 * omega**2) + coef * (dUt_dg * dgt_dB - dUg_dg * dg_dB)
    dK_dC = Kc * C / (4.0 * omega**2) + coef * (dUt_dg * dgt_dC - dUg_dg * dg_dC)
    dK_dl = Kc / ell + coef * (dUt_dl - dUg_dl)
    return np.real(Kc), {
        ("spring", d): np.real(dK_dB),
        ("damper", d): np.real(dK_dC),
        ("ell", q): np.real(dK_dl),
    }


def output_cov_diag_grads(spec, d, q, X):
    if spec.family == "GS":
        X = _as_points(X, spec.input_dim)
        n = X.shape[0]
        v = _gs_pair_variance(spec, q, d, d)
        norm = (2.0 * np.pi) ** (-0.5 * spec.input_dim) * np.prod(v) ** -0.5
        k = np.full(n, norm)
        grads = {}
        pd = spec.gs_precision[d]
        ell = spec.gs_latent_precision[q]
        for i in range(spec.input_dim):
            dk_dv = k * (-0.5 / v[i])
            grads[("gs_p", d, i)] = dk_dv * (-2.0 / pd[i] ** 2)
            grads[("gs_ell", q, i)] = dk_dv * (-1.0 / ell[i] ** 2)
        return k, grads
    ell = spec.lengthscale[q]
    t = _as_times(X)
    if spec.family == "ODE1":
        B = spec.decay[d]
        h, dh_db1, dh_db2, dh_dl = _h_func(B, B, t, t, ell, with_grads=True)
        pref = 0.5 * _SQRT_PI * ell
        k = pref * np.real(2.0 * h)
        return k, {
            ("decay", d): pref * 2.0 * np.real(dh_db1 + dh_db2),
            ("ell", q): _SQRT_PI * np.real(h) + pref * 2.0 * np.real(dh_dl),
        }
    g_d, gt_d, omega = _ode2_roots(spec, d)
    C = spec.damper[d]
    k0 = ell * _SQRT_PI / (8.0 * omega**2)
    dg_dB = 1j / (2.0 * omega)
    dgt_dB = -dg_dB
    dg_dC = 0.5 - 1j * C / (4.0 * omega)
    dgt_dC = 0.5 + 1j * C / (4.0 * omega)
    # both time-order groups coincide on the diagonal; stack all eight terms,
    # tracking which root (gamma or its conjugate) sits in each h slot
    roots = np.array([g_d, gt_d])
    a1_idx = np.array([0, 1, 1, 0, 1, 0, 1, 0])
    a2_idx = np.array([1, 0, 1, 0, 0, 1, 1, 0])
    sg = np.concatenate([_ODE2_SIGNS, _ODE2_SIGNS]).reshape(8, 1)
    h, dh_db1, dh_db2, dh_dl = _h_func(roots[a1_idx].reshape(8, 1),
                                       roots[a2_idx].reshape(8, 1),
                                       t, t, ell, with_grads=True)
    dB = np.array([dg_dB, dgt_dB])
    dC = np.array([dg_dC, dgt_dC])
    acc = np.sum(sg * h, axis=0)
    acc_B = np.sum(sg * (dh_db1 * dB[a1_idx].reshape(8, 1)
                         + dh_db2 * dB[a2_idx].reshape(8, 1)), axis=0)
    acc_C = np.sum(sg * (dh_db1 * dC[a1_idx].reshape(8, 1)
                         + dh_db2 * dC[a2_idx].reshape(8, 1)), axis=0)
    acc_l = np.sum(sg * dh_dl, axis=0)
    k = np.real(k0 * acc)
    # d == d', so K0 = ell sqrt(pi) / (8 omega^2): both omega factors move together
    dk0_dB = -2.0 * k0 / omega * (1.0 / (2.0 * omega))
    dk0_dC = -2.0 * k0 / omega * (-C / (4.0 * omega))
    return k, {
        ("spring", d): np.real(dk0_dB * acc + k0 * acc_B),
        ("damper", d): np.real(dk0_dC * acc + k0 * acc_C),
        ("ell", q): np.real(k0 * acc / ell + k0 * acc_l),
    }


# ---------------------------------------------------------------------------
# block assembly
# ---------------------------------------------------------------------------

def jittered_cholesky(A, rel_start=1e-8, rel_max=1e-2):
    """Cholesky with escalating diagonal jitter.

    Starts at ``rel_start * mean(diag)`` and multiplies by 10 up to
    ``rel_max * mean(diag)`` before raising CholeskyFailure.  Returns the lower
    factor and the jitter actually added (0.0 when none was needed).
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    jit = rel_start * scale
    eye = np.eye(A.shape[0])
    while jit <= rel_max * scale * (1.0 + 1e-12):
        try:
            return np.linalg.cholesky(A + jit * eye), jit
        except np.linalg.LinAlgError:
            jit *= 10.0
    raise CholeskyFailure(f"matrix not PD after jitter escalation to {jit:.3e}")


def default_inducing(dataset, m):
    """Evenly spaced inducing inputs over each input dimension's data range."""
    lo = np.min(np.vstack([x.min(axis=0) for x in dataset.x]), axis=0)
    hi = np.max(np.vstack([x.max(axis=0) for x in dataset.x]), axis=0)
    cols = [np.linspace(lo[i], hi[i], m) for i in range(len(lo))]
    return np.column_stack(cols)


@dataclass(eq=False)
class CovBlocks:
    """All covariance blocks the variational machinery consumes.

    ``K_uu[q]`` already includes the jitter used by its Cholesky factor
    ``L_uu[q]``; downstream code treats the jittered matrix as the prior.
    Immutable by convention after assembly.
    """

    K_uu: list
    L_uu: list
    K_fu: list        # [d][q] -> (N_d, M)
    Kff_diag: list    # [d][q] -> (N_d,)
    inducing: np.ndarray
    jitter: float

    @property
    def n_latents(self):
        return len(self.K_uu)

    @property
    def n_outputs(self):
        return len(self.K_fu)

    def solve_uu(self, q, B):
        """K_uu[q]^{-1} B via the cached Cholesky factor."""
        from scipy.linalg import solve_triangular

        L = self.L_uu[q]
        y = solve_triangular(L, B, lower=True)
        return solve_triangular(L.T, y, lower=False)

    def logdet_uu(self, q):
        return 2.0 * float(np.sum(np.log(np.diag(self.L_uu[q]))))


def latent_blocks(spec, inducing_inputs):
    """K_uu blocks only; enough for prediction from a saved model."""
    Z = np.asarray(inducing_inputs, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    K_uu = []
    L_uu = []
    jitter = 0.0
    for q in range(spec.n_latents):
        K = latent_cov_grid(spec, q, Z, Z)
        K = 0.5 * (K + K.T)
        L, jit = jittered_cholesky(K)
        if jit > 0.0:
            K = K + jit * np.eye(K.shape[0])
            L = np.linalg.cholesky(K)
        jitter = max(jitter, jit)
        K_uu.append(K)
        L_uu.append(L)
    return CovBlocks(K_uu=K_uu, L_uu=L_uu, K_fu=[], Kff_diag=[], inducing=Z,
                     jitter=jitter)


def assemble_blocks(dataset, inducing_inputs, spec, threads=1):
    """Assemble K_uu, K_fu and the per-latent output diagonals for a dataset."""
    Z = np.asarray(inducing_inputs, dtype=float)
    if Z.ndim == 1:
        Z = Z.reshape(-1, 1)
    if Z.shape[0] < 1:
        raise ValueError("need at least one inducing input")
    D = dataset.n_outputs
    Q = spec.n_latents

    K_uu = []
    L_uu = []
    jitter = 0.0
    for q in range(Q):
        K = latent_cov_grid(spec, q, Z, Z)
        K = 0.5 * (K + K.T)
        L, jit = jittered_cholesky(K)
        if jit > 0.0:
            K = K + jit * np.eye(K.shape[0])
            L, _ = np.linalg.cholesky(K), 0.0
        jitter = max(jitter, jit)
        K_uu.append(K)
        L_uu.append(L)

    def _one(dq):
        d, q = dq
        return (
            cross_cov_grid(spec, d, q, dataset.x[d], Z),
            output_cov_diag(spec, d, q, dataset.x[d]),
        )

    pairs = [(d, q) for d in range(D) for q in range(Q)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one, pairs))
    else:
        results = [_one(p) for p in pairs]

    K_fu = [[None] * Q for _ in range(D)]
    Kff_diag = [[None] * Q for _ in range(D)]
    for (d, q), (kfu, kdiag) in zip(pairs, results):
        K_fu[d][q] = kfu
        Kff_diag[d][q] = kdiag
    return CovBlocks(K_uu=K_uu, L_uu=L_uu, K_fu=K_fu, Kff_diag=Kff_diag,
                     inducing=Z, jitter=jitter)
