"""Radial Poisson solver, the linearized operators around ``Q`` and weighted norms.

Conventions: scalar products and norms use the plane measure ``2 pi r dr``;
``phi_u`` is the logarithmic potential ``(1/2pi) log|x| * u`` whose radial
form is ``phi_u(r) = log(r) m(r) + int_r^inf log(t) u(t) t dt`` with
``m(r) = int_0^r u(t) t dt``, so that ``phi_u' = m/r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ground_state as gs
from .errors import NumericError, UsageError
from .radial_numerics import (
    TWO_PI,
    RadialField,
    integrate_radial,
    origin_log_moment,
    origin_moment,
    power_law_tail,
)


@dataclass(frozen=True)
class PoissonSolution:
    phi: RadialField
    dphi: RadialField
    total_mass: float


@dataclass(frozen=True)
class WeightedNorms:
    l2q: float
    h2q: float
    energy: float
    l1: float


def _require_role(f: RadialField, allowed: tuple[str, ...], op: str) -> None:
    if f.role not in allowed:
        raise UsageError(f"{op} expects a field with role in {allowed}, got {f.role!r}")


def partial_mass(u: RadialField) -> RadialField:
    """``m(r) = int_0^r u(t) t dt``; the cap below ``r_min`` uses the even extension of ``u``."""
    _require_role(u, ("density", "generic"), "partial_mass")
    grid = u.grid
    v = u.values
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite density in partial_mass")
    m = grid.cumulative(v * grid.nodes, origin_moment(grid, v))
    return RadialField(grid, m, "partial_mass")


def _log_moment_tail(u: RadialField) -> float:
    """``int_{r_max}^inf log(t) u(t) t dt`` from a power-law fit of the tail."""
    grid = u.grid
    fit = power_law_tail(grid, u.values)
    if fit is None:
        return 0.0
    c, p = fit
    R = grid.r_max
    size = abs(u.values[-1]) * R * R * max(1.0, abs(math.log(R)))
    if p <= 2.05:
        scale = max(1.0, float(np.max(np.abs(u.values))))
        if size > 1e-12 * scale:
            raise NumericError(
                f"log-moment of the source diverges: tail decays like r^-{p:.3f} "
                f"with |u(r_max)| r_max^2 log r_max = {size:.3e}"
            )
        return 0.0
    q = p - 2.0
    return c * R ** (-q) * (math.log(R) / q + 1.0 / (q * q))


def poisson_field(u: RadialField, include_tail: bool = True) -> PoissonSolution:
    """Radial potential of ``u`` fixed by the logarithmic convolution kernel."""
    _require_role(u, ("density", "generic"), "poisson_field")
    grid = u.grid
    r = grid.nodes
    m = partial_mass(u).values
    logr = np.log(r)
    running = grid.cumulative(logr * u.values * r, origin_log_moment(grid, u.values))
    total = running[-1] + (_log_moment_tail(u) if include_tail else 0.0)
    phi = logr * m + (total - running)
    return PoissonSolution(
        phi=RadialField(grid, phi, "potential"),
        dphi=RadialField(grid, m / r, "generic"),
        total_mass=TWO_PI * float(m[-1]),
    )


def apply_M(u: RadialField) -> RadialField:
    """``M u = u/Q + phi_u``."""
    r = u.grid.nodes
    phi = poisson_field(u).phi.values
    return RadialField(u.grid, u.values / gs.Q(r) + phi, "generic")


def apply_L(eps: RadialField) -> RadialField:
    """``L eps = eps'' + eps'/r + 2 Q eps + phi_Q' eps' + Q' phi_eps'``."""
    grid = eps.grid
    r = grid.nodes
    e = eps.values
    e1 = grid.derivative(e, 1)
    e2 = grid.derivative(e, 2)
    m = partial_mass(eps.like(e, "generic")).values
    out = e2 + e1 / r + 2.0 * gs.Q(r) * e + gs.dphiQ(r) * e1 + gs.dQ(r) * m / r
    return RadialField(grid, out, "generic")


def _outer_integral(grid, g: np.ndarray) -> np.ndarray:
    """``int_r^inf g dt`` with a power-law tail beyond ``r_max``."""
    running = grid.cumulative(g)
    tail = 0.0
    fit = power_law_tail(grid, g)
    if fit is not None and fit[1] > 1.0:
        c, p = fit
        tail = c * grid.r_max ** (1.0 - p) / (p - 1.0)
    return running[-1] - running + tail


def apply_Lstar(eps: RadialField) -> RadialField:
    """``L* eps = M(div(Q grad eps))``.

    The source ``s = (r Q eps')'/r`` has partial mass ``r Q eps'`` so its
    potential is ``-int_r^inf Q eps' dt`` and no second quadrature is needed.
    """
    grid = eps.grid
    r = grid.nodes
    e1 = grid.derivative(eps.values, 1)
    e2 = grid.derivative(eps.values, 2)
    local = e2 + (1.0 / r + gs.grad_log_Q(r)) * e1
    return RadialField(grid, local - _outer_integral(grid, gs.Q(r) * e1), "generic")


def apply_L0(m: RadialField) -> RadialField:
    """``L0 m = -m'' + (1/r + Q'/Q) m' - Q m``."""
    _require_role(m, ("partial_mass", "generic"), "apply_L0")
    grid = m.grid
    r = grid.nodes
    m1 = grid.derivative(m.values, 1)
    m2 = grid.derivative(m.values, 2)
    return RadialField(grid, gs.L0_closed(m.values, m1, m2, r), "generic")


def apply_Hk(phi: RadialField, k: int) -> RadialField:
    """``H_k phi = -phi'' - phi'/r + k^2 phi/r^2 - Q phi``."""
    if k < 0 or int(k) != k:
        raise UsageError(f"harmonic index must be a nonnegative integer, got {k}")
    grid = phi.grid
    r = grid.nodes
    p1 = grid.derivative(phi.values, 1)
    p2 = grid.derivative(phi.values, 2)
    out = -p2 - p1 / r + (k * k) * phi.values / (r * r) - gs.Q(r) * phi.values
    return RadialField(grid, out, "generic")


def laplacian(f: RadialField) -> RadialField:
    grid = f.grid
    return f.like(grid.derivative(f.values, 2) + grid.derivative(f.values, 1) / grid.nodes, "generic")


def inner(f: RadialField, g: RadialField) -> float:
    """Plane scalar product ``2 pi int f g r dr``."""
    return integrate_radial(f.like(f.values * g.values, "generic"))


def l2q_norm(f: RadialField) -> float:
    """``(int f^2/Q)^(1/2)`` over the plane."""
    return math.sqrt(max(integrate_radial(f.like(f.values**2 / gs.Q(f.r), "generic")), 0.0))


def norms(eps: RadialField) -> WeightedNorms:
    grid = eps.grid
    r = grid.nodes
    e = eps.values
    if not np.all(np.isfinite(e)):
        raise NumericError("non-finite field in norms")
    e1 = grid.derivative(e, 1)
    lap = grid.derivative(e, 2) + e1 / r
    l2q = l2q_norm(eps.like(e, "generic"))
    h2q = (
        l2q_norm(eps.like(lap, "generic"))
        + l2q_norm(eps.like(e1 / (1.0 + r), "generic"))
        + math.sqrt(max(integrate_radial(eps.like(e * e, "generic")), 0.0))
    )
    l1 = integrate_radial(eps.like(np.abs(e), "generic"))
    return WeightedNorms(l2q=l2q, h2q=h2q, energy=h2q + l1, l1=l1)


def ground_state_suite(n: int = 4096) -> dict[str, float]:
    """Relative errors of the numerical ground-state companions against their closed forms.

    ``log_identity`` uses the numerically computed potential, ``mass``
    includes the fitted tail beyond ``r_max``.
    """
    from .radial_numerics import build_grid, radial_tail

    grid = build_grid(n=n)
    r = grid.nodes
    Qf = RadialField(grid, gs.Q(r), "density")
    sol = poisson_field(Qf)
    phi_exact = gs.phiQ(r)
    phi = sol.phi.values
    m = partial_mass(Qf).values
    m_exact = gs.m0(r)
    logq = np.log(gs.Q(r))
    mass = integrate_radial(Qf) + radial_tail(Qf)
    return {
        "log_identity": float(np.max(np.abs(logq + phi - math.log(8.0))) / float(np.max(np.abs(logq)))),
        "phi": float(np.max(np.abs(phi - phi_exact)) / float(np.max(np.abs(phi_exact)))),
        "m0": float(np.max(np.abs(m - m_exact) / m_exact)),
        "mass": abs(mass / (8.0 * math.pi) - 1.0),
    }
