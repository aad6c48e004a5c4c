"""Approximate self-similar profiles ``Q_b`` and their localized versions.

Given ``b > 0`` the profile is ``Q + b T1 + b^2 T2`` where ``T1`` and ``T2``
come from inverting ``L0`` on explicit sources with the two homogeneous
solutions ``psi0`` and ``psi1``. ``T2`` carries the radiation ``Sigma_b``
which switches from ``c_b m1`` inside the parabolic zone to ``4 psi1``
outside it. The localized profile cuts both corrections at ``B1``.

Every nested integral is a cumulative sum on the grid, computed once per
source in a single sweep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ground_state as gs
from .errors import ConfigurationError, DegenerateProfileError, NumericError
from .operators import (
    apply_L,
    apply_Lstar,
    inner,
    l2q_norm,
    partial_mass,
    poisson_field,
)
from .radial_numerics import RadialField, RadialGrid, build_grid, extend_grid, integrate_radial

B_STAR = 1e-2


def zone_radii(b: float) -> tuple[float, float]:
    """Parabolic radius ``B0 = 1/sqrt(b)`` and localization radius ``B1 = |log b|/sqrt(b)``."""
    return 1.0 / math.sqrt(b), abs(math.log(b)) / math.sqrt(b)


def _check_b(b: float, upper: float = B_STAR) -> None:
    if not (np.isfinite(b) and 0.0 < b <= upper):
        raise ConfigurationError(f"b must lie in (0, {upper}], got {b}")


def profile_grid(b: float, base: RadialGrid | None = None) -> RadialGrid:
    """Default grid, extended geometrically so that it reaches ``4 B1``."""
    grid = base if base is not None else build_grid()
    _, B1 = zone_radii(b)
    return extend_grid(grid, 4.0 * B1)


def _origin_power_fit(grid: RadialGrid, f: np.ndarray) -> tuple[float, float] | None:
    """Fit ``f ~ c r^k`` below the second sample near ``2 r_min``; ``None`` if ``f`` vanishes there."""
    r = grid.nodes
    scale = float(np.max(np.abs(f))) if f.size else 0.0
    if scale == 0.0 or abs(f[0]) <= 1e-14 * scale:
        return None
    j = int(min(max(np.searchsorted(r, 2.0 * r[0]), 1), grid.n - 1))
    if f[j] == 0.0 or np.sign(f[j]) != np.sign(f[0]):
        raise NumericError("source changes sign at the origin; cannot regularize")
    k = math.log(f[j] / f[0]) / math.log(r[j] / r[0])
    if k <= 0.05:
        raise NumericError(
            f"source behaves like r^{k:.3f} at the origin; the Green-kernel integral diverges"
        )
    return f[0] / r[0] ** k, k


def _variation_of_constants(grid: RadialGrid, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Solution ``m`` of ``L0 m = -f`` vanishing at the origin, and ``m'/r``.

    ``m = -psi0 A/2 + psi1 B/2`` with ``A = int_0^r (psi1 num/t) f`` and
    ``B = int_0^r t f``; the derivative terms of ``A`` and ``B`` cancel.
    """
    r = grid.nodes
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise NumericError("non-finite source in the L0 inversion")
    num = gs.psi1_numerator(r)
    a0 = b0 = 0.0
    fit = _origin_power_fit(grid, f)
    if fit is not None:
        c, k = fit
        x = r[0]
        lx = math.log(x)
        a0 = c * (
            x ** (k + 4) / (k + 4)
            + 4.0 * (x ** (k + 2) * lx / (k + 2) - x ** (k + 2) / (k + 2) ** 2)
            - x**k / k
        )
        b0 = c * x ** (k + 2) / (k + 2)
    A = grid.cumulative(num / r * f, a0)
    B = grid.cumulative(r * f, b0)
    m = -0.5 * gs.psi0(r) * A + 0.5 * gs.psi1(r) * B
    dm_r = -0.5 * gs.dpsi0_over_r(r) * A + 0.5 * gs.dpsi1_over_r(r) * B
    return m, dm_r


def solve_L0_inhomog(f: RadialField) -> RadialField:
    """Solve ``L0 m = -f`` with ``m(0) = 0`` by variation of constants."""
    m, _ = _variation_of_constants(f.grid, f.values)
    return RadialField(f.grid, m, "partial_mass")


def build_T1(grid: RadialGrid) -> tuple[RadialField, RadialField]:
    """``m1`` solving ``L0 m1 = -8 psi0`` and ``T1 = m1'/r``."""
    if grid.r_max < 1e3:
        raise ConfigurationError("building T1 needs a grid reaching r >= 1e3")
    m, dm_r = _variation_of_constants(grid, 8.0 * gs.psi0(grid.nodes))
    return RadialField(grid, m, "partial_mass"), RadialField(grid, dm_r, "density")


@dataclass(frozen=True)
class _Radiation:
    c_b: float
    d_b: float
    sigma: np.ndarray
    dsigma_r: np.ndarray


def _radiation(b: float, grid: RadialGrid) -> _Radiation:
    r = grid.nodes
    B0, _ = zone_radii(b)
    chi_in = gs.cutoff_chi_scaled(B0 / 4.0, r)
    if grid.r_max < 6.0 * B0:
        raise ConfigurationError("grid too short for the radiation; extend to at least 6 B0")
    source = 8.0 * gs.psi0(r) * chi_in
    num = gs.psi1_numerator(r)
    A = grid.cumulative(num / r * source)
    B = grid.cumulative(r * source)
    m = -0.5 * gs.psi0(r) * A + 0.5 * gs.psi1(r) * B
    dm_r = -0.5 * gs.dpsi0_over_r(r) * A + 0.5 * gs.dpsi1_over_r(r) * B
    c_b = 8.0 / B[-1]
    d_b = 0.5 * c_b * A[-1]
    chi_out = gs.cutoff_chi_scaled(3.0 * B0, r)
    dchi_out = gs.dchi(r / (3.0 * B0)) / (3.0 * B0)
    sigma = c_b * m + d_b * (1.0 - chi_out) * gs.psi0(r)
    dsigma_r = c_b * dm_r + d_b * ((1.0 - chi_out) * gs.dpsi0_over_r(r) - dchi_out * gs.psi0(r) / r)
    return _Radiation(c_b, d_b, sigma, dsigma_r)


def radiation_constants(b: float, grid: RadialGrid | None = None) -> tuple[float, float]:
    """``c_b = 1/int chi_{B0/4} psi0 t dt`` and ``d_b = 4 c_b int chi_{B0/4} psi1 t dt``."""
    if not (np.isfinite(b) and 0.0 < b < 0.1):
        raise ConfigurationError(f"radiation constants need 0 < b < 0.1, got {b}")
    grid = profile_grid(b, grid)
    rad = _radiation(b, grid)
    return rad.c_b, rad.d_b


def build_Sigma_b(b: float, grid: RadialGrid | None = None) -> RadialField:
    """Radiation profile on a grid covering ``[r_min, 4 B1]``."""
    if not (np.isfinite(b) and 0.0 < b < 0.1):
        raise ConfigurationError(f"radiation needs 0 < b < 0.1, got {b}")
    grid = profile_grid(b, grid)
    return RadialField(grid, _radiation(b, grid).sigma, "generic")


def _second_order(grid: RadialGrid, m1: np.ndarray, T1: np.ndarray, sigma: np.ndarray):
    r = grid.nodes
    sigma2 = m1 * T1 - r * r * T1 + sigma
    m2, T2 = _variation_of_constants(grid, -sigma2)
    return sigma2, m2, T2


def build_T2(b: float, grid: RadialGrid | None = None) -> tuple[RadialField, RadialField]:
    """``m2`` solving ``L0 m2 = Sigma2`` and ``T2 = m2'/r``."""
    if not (np.isfinite(b) and 0.0 < b < 0.1):
        raise ConfigurationError(f"T2 needs 0 < b < 0.1, got {b}")
    grid = profile_grid(b, grid)
    m1, T1 = build_T1(grid)
    rad = _radiation(b, grid)
    _, m2, T2 = _second_order(grid, m1.values, T1.values, rad.sigma)
    return RadialField(grid, m2, "partial_mass"), RadialField(grid, T2, "density")


@dataclass(frozen=True)
class ProfileFamily:
    """Every ingredient of the profile at one value of ``b``."""

    b: float
    B0: float
    B1: float
    c_b: float
    d_b: float
    localized: bool
    m1: RadialField
    T1: RadialField
    Sigma_b: RadialField
    Sigma2: RadialField
    m2: RadialField
    T2: RadialField
    Qb: RadialField
    Qb_tilde: RadialField
    min_density: float
    dSigma_b_over_r: RadialField | None = None
    Psi_b_tilde: RadialField | None = None

    @property
    def grid(self) -> RadialGrid:
        return self.T1.grid

    @property
    def profile(self) -> RadialField:
        """The assembled profile: localized or not, as requested."""
        return self.Qb_tilde if self.localized else self.Qb

    def correction(self, localized: bool | None = None) -> np.ndarray:
        """``Q_b - Q`` (or its localized version) without forming the difference."""
        loc = self.localized if localized is None else localized
        delta = self.b * self.T1.values + self.b**2 * self.T2.values
        if loc:
            delta = gs.cutoff_chi_scaled(self.B1, self.grid.nodes) * delta
        return delta


def assemble_profile(
    b: float,
    localized: bool = True,
    grid: RadialGrid | None = None,
    with_error: bool = False,
    upper: float = B_STAR,
) -> ProfileFamily:
    """Assemble ``Q_b`` and ``Q~_b``; raise if the requested profile is not positive."""
    _check_b(b, upper)
    grid = profile_grid(b, grid)
    r = grid.nodes
    B0, B1 = zone_radii(b)
    m1, T1 = build_T1(grid)
    rad = _radiation(b, grid)
    sigma2, m2, T2 = _second_order(grid, m1.values, T1.values, rad.sigma)
    Q = gs.Q(r)
    delta = b * T1.values + b * b * T2
    chi1 = gs.cutoff_chi_scaled(B1, r)
    Qb = Q + delta
    Qbt = Q + chi1 * delta
    chosen = Qbt if localized else Qb
    low = float(np.min(chosen))
    if not low > 0.0:
        raise DegenerateProfileError(
            f"profile at b={b} is not positive (min {low:.3e}); b is above the positivity threshold"
        )
    fam = ProfileFamily(
        b=b,
        B0=B0,
        B1=B1,
        c_b=rad.c_b,
        d_b=rad.d_b,
        localized=localized,
        m1=m1,
        T1=T1,
        Sigma_b=RadialField(grid, rad.sigma, "generic"),
        Sigma2=RadialField(grid, sigma2, "generic"),
        m2=RadialField(grid, m2, "partial_mass"),
        T2=RadialField(grid, T2, "density"),
        Qb=RadialField(grid, Qb, "density"),
        Qb_tilde=RadialField(grid, Qbt, "density"),
        min_density=low,
        dSigma_b_over_r=RadialField(grid, rad.dsigma_r, "generic"),
    )
    if with_error:
        fam = replace(fam, Psi_b_tilde=compute_error(fam))
    return fam


def mass_form_error(prof: ProfileFamily, localized: bool | None = None) -> RadialField:
    """``Phi = m'' - m'/r + m m'/r - b r m'`` for the partial mass of the profile.

    The soliton part cancels analytically; only the correction
    ``delta = profile - Q`` and its partial mass enter.
    """
    grid = prof.grid
    r = grid.nodes
    delta = prof.correction(localized)
    n_delta = partial_mass(RadialField(grid, delta, "density")).values
    Q = gs.Q(r)
    ddelta = grid.derivative(delta, 1)
    phi = r * ddelta + Q * n_delta + gs.m0(r) * delta + n_delta * delta - prof.b * r * r * (Q + delta)
    return RadialField(grid, phi, "generic")


def _error_direct(prof: ProfileFamily) -> np.ndarray:
    grid = prof.grid
    r = grid.nodes
    phi = mass_form_error(prof, localized=True).values
    radiation = prof.c_b * prof.b**2 * gs.cutoff_chi_scaled(prof.B0 / 4.0, r) * prof.T1.values
    return grid.derivative(phi, 1) / r + radiation


def _error_expanded(prof: ProfileFamily) -> np.ndarray:
    """Same quantity with the order ``b`` and ``b^2`` cancellations done exactly.

    For the unlocalized profile the mass-form error equals
    ``-b^2 Sigma_b + b^3 (m1 T2 + m2 T1 - r^2 T2) + b^4 m2 T2``; the cutoff
    at ``B1`` adds terms supported beyond ``B1``. The ``Sigma_b`` term is
    differentiated with its closed-form derivative so that it cancels the
    radiation term inside ``B0/4`` to rounding.
    """
    grid = prof.grid
    r = grid.nodes
    b = prof.b
    T1, T2 = prof.T1.values, prof.T2.values
    m1, m2 = prof.m1.values, prof.m2.values
    chi1 = gs.cutoff_chi_scaled(prof.B1, r)
    dchi1 = gs.dchi(r / prof.B1) / prof.B1
    delta_b = b * T1 + b * b * T2
    n_b = b * m1 + b * b * m2
    J = grid.cumulative(dchi1 * n_b)
    remainder = b**3 * (m1 * T2 + m2 * T1 - r * r * T2) + b**4 * m2 * T2
    rest = (
        chi1 * remainder
        + (chi1 - 1.0) * b * r * r * gs.Q(r)
        + (chi1 * chi1 - chi1) * n_b * delta_b
        + r * dchi1 * delta_b
        - gs.Q(r) * J
        - chi1 * delta_b * J
    )
    sigma = prof.Sigma_b.values
    dsigma_r = prof.dSigma_b_over_r.values
    radiation = prof.c_b * b * b * gs.cutoff_chi_scaled(prof.B0 / 4.0, r) * T1
    return -b * b * (dchi1 * sigma / r + chi1 * dsigma_r) + radiation + grid.derivative(rest, 1) / r


def compute_error(prof: ProfileFamily, route: str = "expanded") -> RadialField:
    """``Psi~_b = (1/r) d/dr Phi~ + c_b b^2 chi_{B0/4} T1`` for the localized profile.

    ``route="direct"`` differentiates the mass-form error of the sampled
    profile; ``route="expanded"`` (default) uses its exact expansion in ``b``
    and is free of the order-``b`` cancellation.
    """
    if route == "direct":
        psi = _error_direct(prof)
    elif route == "expanded":
        psi = _error_expanded(prof)
    else:
        raise ConfigurationError(f"unknown error route {route!r}")
    if not np.all(np.isfinite(psi)):
        raise NumericError("non-finite profile error")
    return RadialField(prof.grid, psi, "density")


def noise_ratio(field: RadialField) -> float:
    """Largest fourth difference relative to the local signal, a grid-noise indicator."""
    v = field.values
    d4 = np.abs(np.diff(v, 4))
    signal = np.maximum(np.abs(v[2:-2]), 1e-300)
    return float(np.max(d4 / (16.0 * signal + np.max(np.abs(v)) * 1e-14)))


def ensure_error(prof: ProfileFamily) -> ProfileFamily:
    if prof.Psi_b_tilde is None:
        return replace(prof, Psi_b_tilde=compute_error(prof))
    return prof


@dataclass(frozen=True)
class ErrorNorms:
    b: float
    l2_sq: float
    grad_M_sq: float
    L_l2q_sq: float
    flux: float
    noise: float = 0.0


def degenerate_flux(prof: ProfileFamily, B: float | None = None) -> float:
    """``(L Psi~_b, chi_B r^2)``, evaluated as ``(Psi~_b, L*(chi_B r^2))``."""
    prof = ensure_error(prof)
    grid = prof.grid
    B = prof.B0 if B is None else B
    direction = RadialField(grid, gs.cutoff_chi_scaled(B, grid.nodes) * grid.nodes**2)
    return inner(prof.Psi_b_tilde, apply_Lstar(direction))


def error_norms(prof: ProfileFamily) -> ErrorNorms:
    """Plane ``L^2`` norm, ``int Q |grad M Psi|^2`` and ``|L Psi|_{L^2_Q}^2`` of the error."""
    prof = ensure_error(prof)
    psi = prof.Psi_b_tilde
    grid = prof.grid
    r = grid.nodes
    v = psi.values
    dpsi = grid.derivative(v, 1)
    grad_ratio = (dpsi - gs.grad_log_Q(r) * v) / gs.Q(r)
    grad_M = grad_ratio + poisson_field(psi.like(v, "density")).dphi.values
    return ErrorNorms(
        b=prof.b,
        l2_sq=integrate_radial(psi.like(v * v, "generic")),
        grad_M_sq=integrate_radial(psi.like(gs.Q(r) * grad_M**2, "generic")),
        L_l2q_sq=l2q_norm(apply_L(psi.like(v, "generic"))) ** 2,
        flux=degenerate_flux(prof),
        noise=noise_ratio(psi),
    )


@dataclass(frozen=True)
class ScalingFit:
    bs: tuple[float, ...]
    l2_scaled: tuple[float, ...]
    grad_M_scaled: tuple[float, ...]
    slope: float
    grad_M_variation: float


def error_scaling(bs=(1e-3, 3e-4, 1e-4, 3e-5), grid: RadialGrid | None = None) -> ScalingFit:
    """Least-squares exponent of ``int |Psi~_b|^2 |log b|^2`` against ``b``."""
    bs = tuple(float(b) for b in bs)
    l2s, grads = [], []
    for b in bs:
        en = error_norms(assemble_profile(b, True, grid, with_error=True))
        lb = abs(math.log(b))
        l2s.append(en.l2_sq * lb * lb)
        grads.append(en.grad_M_sq * lb * lb / b**4)
    slope = float(np.polyfit(np.log(bs), np.log(l2s), 1)[0])
    return ScalingFit(bs, tuple(l2s), tuple(grads), slope, max(grads) / min(grads))
