"""Special functions used by the closed-form kernels and the variational bound.

Thin wrappers around scipy.special with explicit domain guards so that the
numerical preconditions assumed elsewhere are enforced in one place.  All
functions accept scalars or numpy arrays and operate elementwise.
"""

import numpy as np
from scipy import special as _sp

__all__ = [
    "DomainError",
    "OverflowRisk",
    "erf",
    "erf_complex",
    "erfcx_complex",
    "faddeeva",
    "log_gamma",
    "digamma",
]

# exp(-z^2) factors inside the Faddeeva evaluation overflow well before this,
# but |Im z| <= 30 keeps every intermediate representable in double precision.
IM_LIMIT = 30.0


class DomainError(ValueError):
    """Argument outside the mathematical domain of the function."""


class OverflowRisk(FloatingPointError):
    """Complex argument too far from the real axis to evaluate safely."""


def erf(x):
    """Standard error function erf(x) = (2/sqrt(pi)) * int_0^x exp(-t^2) dt."""
    return _sp.erf(np.asarray(x, dtype=float)) if np.ndim(x) else float(_sp.erf(x))


def erf_complex(z):
    """erf continued to complex arguments, via the scaled Faddeeva function.

    Raises OverflowRisk when |Im z| exceeds ``IM_LIMIT``.
    """
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z.imag) > IM_LIMIT):
        raise OverflowRisk(f"erf_complex requires |Im z| <= {IM_LIMIT}")
    out = _sp.erf(z)
    return out if out.ndim else complex(out)


def faddeeva(z):
    """Faddeeva function w(z) = exp(-z^2) erfc(-iz)."""
    return _sp.wofz(z)


def erfcx_complex(z):
    """Scaled complementary error function exp(z^2) erfc(z) for complex z.

    Well behaved for Re z >= 0; grows like 2 exp(z^2) for Re z < 0, so callers
    must handle very negative real parts themselves.
    """
    z = np.asarray(z)
    return _sp.wofz(np.multiply(z, 1j) if np.iscomplexobj(z) else z * 1j)


def log_gamma(x):
    """log Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("log_gamma requires x > 0")
    out = _sp.gammaln(x)
    return out if out.ndim else float(out)


def digamma(x):
    """Digamma psi(x) = d/dx log Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("digamma requires x > 0")
    out = _sp.digamma(x)
    return out if out.ndim else float(out)
