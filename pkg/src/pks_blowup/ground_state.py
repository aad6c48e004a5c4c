"""Closed forms of the ground state ``Q = 8/(1+r^2)^2`` and its companions.

All functions are vectorized over ``r``. The companions are the potential
``phi_Q``, the partial mass ``m0``, the generator ``Lambda f = 2f + r f'``
applied to ``Q``, the two homogeneous solutions ``psi0``, ``psi1`` of the
linearized partial-mass operator ``L0`` and their Wronskian, and a smooth
cutoff ``chi`` equal to 1 on ``[0, 1]`` and 0 on ``[2, inf)``.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import ConfigurationError, RangeError

LOG8 = math.log(8.0)


def _arr(r) -> np.ndarray:
    return np.asarray(r, dtype=float)


def Q(r):
    r = _arr(r)
    return 8.0 / (1.0 + r * r) ** 2


def dQ(r):
    r = _arr(r)
    return -32.0 * r / (1.0 + r * r) ** 3


def d2Q(r):
    r = _arr(r)
    return 32.0 * (5.0 * r * r - 1.0) / (1.0 + r * r) ** 4


def grad_log_Q(r):
    """``Q'/Q = -4r/(1+r^2)``."""
    r = _arr(r)
    return -4.0 * r / (1.0 + r * r)


def phiQ(r):
    return 2.0 * np.log1p(_arr(r) ** 2)


def dphiQ(r):
    r = _arr(r)
    return 4.0 * r / (1.0 + r * r)


def d2phiQ(r):
    r = _arr(r)
    return 4.0 * (1.0 - r * r) / (1.0 + r * r) ** 2


def m0(r):
    r = _arr(r)
    return 4.0 * r * r / (1.0 + r * r)


def LambdaQ(r):
    r = _arr(r)
    return 16.0 * (1.0 - r * r) / (1.0 + r * r) ** 3


def dLambdaQ(r):
    r = _arr(r)
    return 64.0 * r * (r * r - 2.0) / (1.0 + r * r) ** 4


def d2LambdaQ(r):
    r = _arr(r)
    s = r * r
    return -64.0 * (5.0 * s * s - 17.0 * s + 2.0) / (1.0 + s) ** 5


def Lambda2Q(r):
    """``Lambda(Lambda Q) = 2 LambdaQ + r (LambdaQ)'``."""
    r = _arr(r)
    return 2.0 * LambdaQ(r) + r * dLambdaQ(r)


def psi0(r):
    r = _arr(r)
    return r * r / (1.0 + r * r) ** 2


def dpsi0(r):
    r = _arr(r)
    return 2.0 * r * (1.0 - r * r) / (1.0 + r * r) ** 3


def d2psi0(r):
    r = _arr(r)
    s = r * r
    return 2.0 * (3.0 * s * s - 8.0 * s + 1.0) / (1.0 + s) ** 4


def _rlogr2(r: np.ndarray) -> np.ndarray:
    """``r^2 log r`` with its limit 0 at the origin."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r > 0.0, r * r * np.log(np.where(r > 0.0, r, 1.0)), 0.0)
    return out


def psi1_numerator(r):
    """``r^4 + 4 r^2 log r - 1``."""
    r = _arr(r)
    return r**4 + 4.0 * _rlogr2(r) - 1.0


def psi1(r):
    """Second homogeneous solution; equals its limit -1 at ``r = 0``."""
    r = _arr(r)
    return psi1_numerator(r) / (1.0 + r * r) ** 2


def dpsi1_over_r(r):
    """``psi1'(r)/r = 8(1 + r^2 - (r^2-1) log r)/(1+r^2)^3`` for ``r > 0``."""
    r = _arr(r)
    return 8.0 * (1.0 + r * r - (r * r - 1.0) * np.log(r)) / (1.0 + r * r) ** 3


def dpsi0_over_r(r):
    r = _arr(r)
    return 2.0 * (1.0 - r * r) / (1.0 + r * r) ** 3


def dpsi1(r):
    r = _arr(r)
    return r * dpsi1_over_r(r)


def d2psi1(r):
    r = _arr(r)
    s = r * r
    num = 8.0 * (1.0 + s - (s - 1.0) * np.log(r))
    dnum = 8.0 * (2.0 * r - 2.0 * r * np.log(r) - (s - 1.0) / r)
    den = (1.0 + s) ** 3
    # (r num / den)'
    return num / den + r * dnum / den - r * num * 6.0 * r / (1.0 + s) ** 4


def wronskian(r):
    """``psi1' psi0 - psi1 psi0'``, equal to ``r Q/4 = 2r/(1+r^2)^2``."""
    r = _arr(r)
    return dpsi1(r) * psi0(r) - psi1(r) * dpsi0(r)


def L0_coefficient(r):
    """Coefficient ``1/r + Q'/Q = (1 - 3r^2)/(r(1 + r^2))`` of ``m'`` in ``L0``."""
    r = _arr(r)
    return (1.0 - 3.0 * r * r) / (r * (1.0 + r * r))


def L0_closed(m, dm, d2m, r):
    """``L0 m = -m'' + (1/r + Q'/Q) m' - Q m`` from supplied derivatives."""
    return -d2m + L0_coefficient(r) * dm - Q(r) * m


# Smooth cutoff: exp(-1/t) blend; C-infinity with all derivatives vanishing at 1 and 2.
def _blend(t: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", over="ignore"):
        return np.where(t > 0.0, np.exp(-1.0 / np.where(t > 0.0, t, 1.0)), 0.0)


def chi(x):
    """Mother cutoff: 1 on ``[0, 1]``, 0 on ``[2, inf)``, smooth and monotone between."""
    x = _arr(x)
    a = _blend(2.0 - x)
    c = _blend(x - 1.0)
    return np.where(x <= 1.0, 1.0, np.where(x >= 2.0, 0.0, a / np.where(a + c > 0, a + c, 1.0)))


def dchi(x):
    """Derivative of the mother cutoff."""
    x = _arr(x)
    inside = (x > 1.0) & (x < 2.0)
    xs = np.where(inside, x, 1.5)
    a = _blend(2.0 - xs)
    c = _blend(xs - 1.0)
    val = -a * c * (1.0 / (2.0 - xs) ** 2 + 1.0 / (xs - 1.0) ** 2) / (a + c) ** 2
    return np.where(inside, val, 0.0)


def cutoff_chi_scaled(B: float, r):
    """``chi_B(r) = chi(r/B)``."""
    if not B > 0.0:
        raise ConfigurationError(f"cutoff radius must be positive, got {B}")
    return chi(_arr(r) / B)


CLOSED_FORMS: dict[str, Callable] = {
    "Q": Q,
    "gradQ": dQ,
    "phiQ": phiQ,
    "m0": m0,
    "LambdaQ": LambdaQ,
    "psi0": psi0,
    "psi1": psi1,
    "wronskian": wronskian,
    "cutoff_chi": chi,
}


def eval_closed_form(name: str, r):
    """Evaluate a named closed form; ``psi1`` and ``wronskian`` need ``r >= 0``."""
    try:
        func = CLOSED_FORMS[name]
    except KeyError:
        known = ", ".join(sorted(CLOSED_FORMS))
        raise ConfigurationError(f"unknown closed form {name!r}; known: {known}") from None
    x = _arr(r)
    if np.any(x < 0.0):
        raise RangeError("closed forms are defined for r >= 0")
    out = func(x)
    if name == "wronskian":
        out = np.where(x > 0.0, out, 0.0)
    return float(out) if np.ndim(out) == 0 else out
