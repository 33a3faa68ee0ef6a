"""Log-gamma and its first two derivatives for positive real arguments.

All three use the same scheme: shift the argument upward with the recurrence
relation until it reaches ``_SHIFT_THRESHOLD``, then evaluate the asymptotic
(Stirling-type) series. Functions accept scalars or arrays; scalar input
returns a Python float.
"""

import math

import numpy as np

from taskmodel.errors import DomainError

__all__ = ["log_gamma", "digamma", "trigamma", "PositiveReal"]

_SHIFT_THRESHOLD = 10.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# Bernoulli-number coefficients B_2j / (2j (2j-1)) for the log-gamma series.
_LGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360360.0,
)
# B_2j / (2j) for the digamma series.
_DIGAMMA_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
)
# B_2j for the trigamma series.
_TRIGAMMA_COEFFS = (
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
)


class PositiveReal(float):
    """A float that is strictly positive and finite."""

    def __new__(cls, value):
        value = float(value)
        if not (math.isfinite(value) and value > 0.0):
            raise DomainError(f"expected a positive finite real, got {value!r}")
        return super().__new__(cls, value)


def _check(x):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr) & (arr > 0.0)):
        raise DomainError("argument must be positive and finite")
    return arr


def _shift_sums(x, power):
    """Return (x + n, sum_{j=1}^{n-1} (x+j)^-power) and the j=0 term.

    The j=0 term dominates for tiny ``x``. It is returned in extended precision
    and added last so the result is rounded only once.
    """
    steps = np.maximum(0.0, np.ceil(_SHIFT_THRESHOLD - x))
    rest = np.zeros_like(x)
    for j in range(int(steps.max(initial=0.0)) - 1, 0, -1):
        rest += np.where(j < steps, (x + j) ** -power, 0.0)
    xl = x.astype(np.longdouble)
    first = np.where(steps > 0, xl**-power, 0.0)
    return x + steps, rest, first


def _finish(arr, out):
    if arr.ndim == 0:
        return float(out)
    return out


def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``."""
    arr = _check(x)
    steps = np.maximum(0.0, np.ceil(_SHIFT_THRESHOLD - arr))
    prod = np.ones_like(arr)
    for j in range(int(steps.max(initial=0.0))):
        prod *= np.where(j < steps, arr + j, 1.0)
    z = arr + steps
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for c in reversed(_LGAMMA_COEFFS):
        series = series * inv2 + c
    out = (z - 0.5) * np.log(z) - z + _HALF_LOG_2PI + series * inv - np.log(prod)
    return _finish(arr, out)


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x) for ``x > 0``."""
    arr = _check(x)
    z, rest, first = _shift_sums(arr, 1)
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for c in reversed(_DIGAMMA_COEFFS):
        series = series * inv2 + c
    asym = np.log(z) - 0.5 / z - series * inv2
    return _finish(arr, ((asym - rest) - first).astype(np.float64))


def trigamma(x):
    """Trigamma function, the derivative of digamma, for ``x > 0``."""
    arr = _check(x)
    z, rest, first = _shift_sums(arr, 2)
    inv = 1.0 / z
    inv2 = inv * inv
    series = np.zeros_like(z)
    for c in reversed(_TRIGAMMA_COEFFS):
        series = series * inv2 + c
    asym = inv + 0.5 * inv2 + series * inv2 * inv
    return _finish(arr, ((asym + rest) + first).astype(np.float64))
