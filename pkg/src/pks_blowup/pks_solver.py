"""Radial PKS flow in partial-mass form with dynamic rescaling.

In the frame of scale ``lam`` (``r = lam y``, ``dt = lam^2 dtau``) the partial
mass ``m(y) = int_0^y v t dt`` obeys::

    m_tau = m'' - m'/y + m m'/y

with ``m = u(0) y^2/2`` at the first node and ``m`` fixed at the last node
(total mass / 2 pi, no flux). Each step is linearly implicit: diffusion and
the advection derivative are implicit, the advection coefficient ``m/y`` is
taken from the previous step, so every step is one banded solve.

Rescaling uses log-uniform nodes ``y_j = y_0 e^{j h}``. Shrinking the frame
by ``e^{-kh}`` moves every sample ``k`` nodes outward and prepends ``k`` nodes
from the even series at the origin; the physical outer radius stays fixed.
No interpolation is involved, and shifts compose exactly.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from . import ground_state as gs
from .errors import (
    ConfigurationError,
    DecompositionError,
    InstabilityError,
    InvalidDataError,
    NumericError,
    ResolutionError,
    SubcriticalWarning,
)
from .modulation_ode import ModulationState, Trajectory
from .operators import WeightedNorms, apply_Lstar, norms, poisson_field
from .profiles import (
    _radiation,
    _second_order,
    _variation_of_constants,
    assemble_profile,
    zone_radii,
)
from .radial_numerics import (
    TWO_PI,
    RadialField,
    RadialGrid,
    build_grid,
    even_origin_coefficients,
    extend_grid,
    integrate_radial,
    lagrange_basis,
    origin_moment,
)

CRITICAL_MASS = 8.0 * math.pi
Q0 = 8.0
BAND = 6
B_TINY = 1e-6


def solver_grid(y_min: float, log_step: float, count: int) -> RadialGrid:
    nodes = y_min * np.exp(log_step * np.arange(count))
    return RadialGrid(nodes, "log-uniform", origin_stride=0)


@dataclass(frozen=True)
class SimState:
    """Partial mass in the current frame plus clocks.

    ``lam`` is the frame scale; the pinned scale ``sqrt(8/v(0)) lam`` is
    :attr:`pinned_lambda`.
    """

    grid: RadialGrid
    m: RadialField
    frame: str
    t: float
    s: float
    lam: float
    total_plane_mass: float
    log_step: float
    steps: int = 0
    lam_ref: float = math.nan

    def __post_init__(self):
        if self.frame not in ("original", "renormalized"):
            raise ConfigurationError(f"unknown frame tag {self.frame!r}")
        if self.m.grid is not self.grid:
            raise ConfigurationError("partial mass lives on a different grid")

    @property
    def y(self) -> np.ndarray:
        return self.grid.nodes

    @property
    def central_density(self) -> float:
        """``v(0)`` from the even model ``m = a y^2/2 + c y^4/4``."""
        a, _ = _mass_origin_model(self.grid, self.m.values)
        return a

    @property
    def pinned_lambda(self) -> float:
        v0 = self.central_density
        if not v0 > 0.0:
            raise NumericError(f"nonpositive central density {v0:.3e}")
        return self.lam * math.sqrt(Q0 / v0)

    @property
    def outer_radius(self) -> float:
        """Physical radius of the domain, fixed during a run."""
        return self.lam * self.grid.r_max

    def density(self) -> np.ndarray:
        """Frame density ``v = m'/y``."""
        return self.grid.derivative(self.m.values, 1) / self.y


def _mass_origin_model(grid: RadialGrid, m: np.ndarray) -> tuple[float, float]:
    """Coefficients of ``m = a y^2/2 + c y^4/4`` from the first node and the node near ``2 y_0``."""
    y = grid.nodes
    k = int(min(max(np.searchsorted(y, 2.0 * y[0]), 1), grid.n - 1))
    y0, y1 = y[0], y[k]
    # solve [y0^2/2 y0^4/4; y1^2/2 y1^4/4] [a c] = [m0 mk]
    det = y0**2 / 2 * y1**4 / 4 - y1**2 / 2 * y0**4 / 4
    a = (m[0] * y1**4 / 4 - m[k] * y0**4 / 4) / det
    c = (y0**2 / 2 * m[k] - y1**2 / 2 * m[0]) / det
    return float(a), float(c)


# -- initial data ------------------------------------------------------------------


def _profile_partial_mass(b0: float, grid: RadialGrid) -> tuple[np.ndarray, float]:
    """Partial mass of the localized profile at the grid nodes, and its minimum density."""
    reach = max(grid.r_max, 1e3)
    ext = extend_grid(grid, reach)
    prof = assemble_profile(b0, localized=True, grid=ext)
    pg = prof.grid
    delta = prof.correction(True)
    n_delta = pg.cumulative(delta * pg.nodes, origin_moment(pg, delta))
    m = gs.m0(pg.nodes) + n_delta
    return m[: grid.n].copy(), prof.min_density


def init_from_profile(
    b0: float,
    perturbation: RadialField | None = None,
    grid: RadialGrid | None = None,
    mass_excess: float = 0.0,
    lam0: float = 1.0,
) -> SimState:
    """State with density ``(1 + mass_excess) Q~_{b0} + eps0`` (``b0 = 0`` gives ``Q``).

    Raises :class:`InvalidDataError` when the density is negative somewhere
    and warns with :class:`SubcriticalWarning` when the mass is at most 8 pi.
    """
    if not (np.isfinite(b0) and 0.0 <= b0 <= 1e-2):
        raise ConfigurationError(f"b0 must lie in [0, 1e-2], got {b0}")
    if not mass_excess > -1.0:
        raise ConfigurationError(f"mass_excess must exceed -1, got {mass_excess}")
    grid = grid if grid is not None else solver_grid(1e-3, math.log(1e6) / 1535, 1536)
    if grid.origin_stride != 0:
        grid = RadialGrid(grid.nodes, grid.map_kind, origin_stride=0)
    y = grid.nodes
    h = math.log(y[1] / y[0])
    if not np.allclose(np.diff(np.log(y[:-1])), h, rtol=1e-9, atol=0.0):
        raise ConfigurationError("the solver needs a log-uniform grid")
    if b0 == 0.0:
        m = gs.m0(y)
    else:
        m, _ = _profile_partial_mass(b0, grid)
    m = (1.0 + mass_excess) * m
    if perturbation is not None:
        if perturbation.grid.n != grid.n or not np.allclose(perturbation.grid.nodes, y, rtol=1e-12):
            raise ConfigurationError("perturbation must be sampled on the solver grid")
        p = perturbation.values
        m = m + grid.cumulative(p * y, origin_moment(grid, p))
    density = grid.derivative(m, 1) / y
    if np.min(density) < -1e-12 * np.max(np.abs(density)):
        raise InvalidDataError(f"initial density is negative (min {np.min(density):.3e})")
    total = TWO_PI * float(m[-1])
    if total <= CRITICAL_MASS:
        warnings.warn(
            f"total mass {total:.6f} <= 8 pi: the flow is expected to be global",
            SubcriticalWarning,
            stacklevel=2,
        )
    return SimState(
        grid=grid,
        m=RadialField(grid, m, "partial_mass"),
        frame="original",
        t=0.0,
        s=0.0,
        lam=lam0,
        total_plane_mass=total,
        log_step=h,
    )


def _with_reference(state: SimState) -> SimState:
    if math.isfinite(state.lam_ref):
        return state
    return replace(state, lam_ref=state.pinned_lambda)


# -- time stepping -------------------------------------------------------------


def _banded_system(grid: RadialGrid, m: np.ndarray, dtau: float) -> np.ndarray:
    """Banded form of ``I - dtau A(m)`` with the origin and outer rows replaced."""
    n = grid.n
    y = grid.nodes
    idx2, w2 = grid._diff_stencils[2]
    idx1, w1 = grid._diff_stencils[1]
    if not np.array_equal(idx1, idx2):
        raise ConfigurationError("derivative stencils must share nodes")
    coef = -dtau * (w2 + ((m - 1.0) / y)[:, None] * w1)
    coef[0] = 0.0
    coef[-1] = 0.0
    rows = np.repeat(np.arange(n), idx1.shape[1])
    cols = idx1.ravel()
    ab = np.zeros((2 * BAND + 1, n))
    np.add.at(ab, (BAND + rows - cols, cols), coef.ravel())
    ab[BAND, :] += 1.0
    # origin row: m_0 - (y0/y1)^2 m_1 = rhs_0 (the quartic part goes on the right-hand side)
    ab[BAND - 1, 1] = -((y[0] / y[1]) ** 2)
    return ab


def second_moment(state: SimState) -> float:
    """Physical ``int |x|^2 u`` over the domain, ``2 pi (R^2 m(R) - 2 int r m dr)``."""
    y = state.y
    m = state.m.values
    inner_part = state.grid.cumulative(y * m)[-1] + y[0] ** 4 * m[0] / (4.0 * y[0] ** 2)
    return state.lam**2 * TWO_PI * (y[-1] ** 2 * m[-1] - 2.0 * inner_part)


def time_step(state: SimState, dt: float) -> SimState:
    """Advance by physical time ``dt`` with one linearly implicit step."""
    if not (np.isfinite(dt) and dt > 0.0):
        raise ConfigurationError(f"time step must be positive, got {dt}")
    dtau = dt / state.lam**2
    m_old = state.m.values
    rhs = m_old.copy()
    # lagged quartic term of m = a y^2/2 + c y^4/4 keeps the origin row exact to O(y0^6)
    y = state.y
    _, c = _mass_origin_model(state.grid, m_old)
    rhs[0] = c / 4.0 * y[0] ** 2 * (y[0] ** 2 - y[1] ** 2)
    ab = _banded_system(state.grid, m_old, dtau)
    try:
        m_new = solve_banded((BAND, BAND), ab, rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise InstabilityError(f"implicit solve failed: {exc}; reduce dt") from exc
    scale = float(np.max(np.abs(m_old)))
    if not np.all(np.isfinite(m_new)) or float(np.max(np.abs(m_new))) > 10.0 * scale:
        raise InstabilityError(f"partial mass grew more than tenfold in one step (dt={dt:.3e}); reduce dt")
    new = replace(state, m=RadialField(state.grid, m_new, "partial_mass"), t=state.t + dt, steps=state.steps + 1)
    lam_a, lam_b = state.pinned_lambda, new.pinned_lambda
    ds = 0.5 * dt * (1.0 / lam_a**2 + 1.0 / lam_b**2)
    return replace(new, s=state.s + ds)


# -- rescaling -----------------------------------------------------------------


@dataclass(frozen=True)
class RescaleInfo:
    factor: float
    shift: int
    error_estimate: float


def _series_values(grid: RadialGrid, m: np.ndarray, points: np.ndarray) -> np.ndarray:
    a, c = _mass_origin_model(grid, m)
    return a * points**2 / 2.0 + c * points**4 / 4.0


def rescale(state: SimState, factor: float, mode: str = "shift") -> tuple[SimState, RescaleInfo]:
    """New frame with ``lam' = factor * lam`` and the same physical domain.

    ``shift`` rounds ``log(factor)`` to a whole number of log steps and moves
    samples by index; ``interpolate`` honours ``factor`` exactly by
    sixth-order Lagrange resampling and reports the difference to a
    fourth-order resampling as its error estimate.
    """
    if not (np.isfinite(factor) and factor > 0.0):
        raise ConfigurationError(f"rescale factor must be positive, got {factor}")
    y, m, h = state.y, state.m.values, state.log_step
    if mode == "shift":
        k = int(round(-math.log(factor) / h))
        if k == 0:
            return state, RescaleInfo(1.0, 0, 0.0)
        if k < 0:
            raise ConfigurationError("shift rescaling only zooms in (factor < 1)")
        mu = math.exp(-k * h)
        count = state.grid.n + k
        nodes = y[0] * np.exp(h * np.arange(count))
        nodes[-1] = y[-1] / mu
        grid = RadialGrid(nodes, "log-uniform", origin_stride=0)
        new_m = np.empty(count)
        new_m[k:] = m
        new_m[:k] = _series_values(state.grid, m, nodes[:k] * mu)
        err = _series_error(state.grid, m)
    elif mode == "interpolate":
        mu = factor
        if abs(mu - 1.0) < 1e-14:
            return state, RescaleInfo(1.0, 0, 0.0)
        R = y[-1] / mu
        count = int(math.floor(math.log(R / y[0]) / h + 1e-9)) + 1
        nodes = y[0] * np.exp(h * np.arange(count))
        if nodes[-1] < R * (1.0 - 1e-12):
            if math.log(R / nodes[-1]) < 0.25 * h:
                nodes[-1] = R
            else:
                nodes = np.append(nodes, R)
        else:
            nodes[-1] = R
        grid = RadialGrid(nodes, "log-uniform", origin_stride=0)
        x = nodes * mu
        x[-1] = y[-1]
        inside = x >= y[0]
        new_m = np.empty(nodes.size)
        new_m[~inside] = _series_values(state.grid, m, x[~inside])
        xi = np.clip(x[inside], y[0], y[-1])
        hi = _interp(y, m, xi, 6)
        lo = _interp(y, m, xi, 4)
        new_m[inside] = hi
        err = max(float(np.max(np.abs(hi - lo))) / abs(m[-1]), _series_error(state.grid, m))
        k = 0
    else:
        raise ConfigurationError(f"unknown rescale mode {mode!r}")
    if err > 1e-6:
        raise ResolutionError(f"resampling error estimate {err:.2e} exceeds 1e-6")
    new = replace(
        state,
        grid=grid,
        m=RadialField(grid, new_m, "partial_mass"),
        lam=state.lam * mu,
        frame="renormalized",
    )
    return new, RescaleInfo(mu, k, err)


def _interp(x: np.ndarray, v: np.ndarray, at: np.ndarray, width: int) -> np.ndarray:
    idx, w = lagrange_basis(x, at, width)
    return np.einsum("ij,ij->i", w, v[idx])


def _series_error(grid: RadialGrid, m: np.ndarray) -> float:
    """Mismatch of the origin series at the third fitted node, relative to the total."""
    y = grid.nodes
    k = int(min(max(np.searchsorted(y, 3.0 * y[0]), 2), grid.n - 1))
    pred = _series_values(grid, m, y[k : k + 1])[0]
    return abs(pred - m[k]) / max(abs(m[-1]), 1e-300)


def renormalize(state: SimState, mode: str = "shift") -> SimState:
    """Rescale so that ``v(0) lam^2`` returns to ``8`` (up to one log step in shift mode)."""
    factor = state.pinned_lambda / state.lam
    new, _ = rescale(state, factor, mode)
    return new


# -- decomposition -------------------------------------------------------------


@dataclass(frozen=True)
class Decomposition:
    lam: float
    b: float
    eps: RadialField
    lam_rel: float
    iterations: int
    residual: tuple[float, float]


class ModulationFrame:
    """Precomputed directions and profile pieces for repeated decompositions."""

    def __init__(self, M: float, grid: RadialGrid | None = None):
        if not (np.isfinite(M) and M >= 20.0):
            raise ConfigurationError(f"decomposition needs M >= 20, got {M}")
        from .spectral_lab import build_Phi_M

        self.M = float(M)
        self.grid = grid if grid is not None else build_grid(1e-4, 1e4, 2048)
        r = self.grid.nodes
        self.m1, self.T1 = _variation_of_constants(self.grid, 8.0 * gs.psi0(r))
        dirs = build_Phi_M(self.M, self.grid)
        self.directions = dirs
        g1 = dirs.PhiM.values
        g2 = apply_Lstar(dirs.PhiM).values
        support = r <= 2.0 * self.M * 1.0000001
        g1 = np.where(support, g1, 0.0)
        g2 = np.where(support, g2, 0.0)
        self.tests = (g1, g2)
        self.dtests = (self.grid.derivative(g1, 1), self.grid.derivative(g2, 1))
        self.support = r <= 2.0 * self.M * 1.05
        self.norms = tuple(math.sqrt(float(np.sum(self.grid.radial_weights * g * g))) for g in self.tests)

    def model_mass(self, b: float) -> np.ndarray:
        """Partial mass of ``Q~_b`` (of ``Q + b T1`` when ``|b|`` is tiny)."""
        r = self.grid.nodes
        if b <= B_TINY:
            return gs.m0(r) + b * self.m1
        if b > 0.05:
            raise DecompositionError(f"decomposition left the admissible range (b = {b:.3e})")
        rad = _radiation(b, self.grid)
        _, m2, T2 = _second_order(self.grid, self.m1, self.T1, rad.sigma)
        _, B1 = zone_radii(b)
        chi1 = gs.cutoff_chi_scaled(B1, r)
        delta = chi1 * (b * self.T1 + b * b * T2)
        return gs.m0(r) + self.grid.cumulative(delta * r, origin_moment(self.grid, delta))

    def pairings(self, eps_m: np.ndarray) -> np.ndarray:
        """``(eps, g) = -2 pi int eps_m g' dr`` for compactly supported ``g``."""
        w = self.grid.weights
        return np.array([-TWO_PI * float(np.sum(w * eps_m * dg)) for dg in self.dtests])


def _state_mass_at(state: SimState, x: np.ndarray) -> np.ndarray:
    y, m = state.y, state.m.values
    out = np.empty(x.size)
    low = x < y[0]
    out[low] = _series_values(state.grid, m, x[low])
    hi = x > y[-1]
    out[hi] = m[-1]
    mid = ~(low | hi)
    out[mid] = _interp(y, m, x[mid], 6)
    return out


def decompose(
    state: SimState,
    M: float = 20.0,
    guess: tuple[float, float] | None = None,
    frame: ModulationFrame | None = None,
    max_iter: int = 50,
) -> Decomposition:
    """Solve ``(v_mod, Phi_M) = (v_mod, L* Phi_M) = 0`` for ``(lam_1, b)`` by Newton.

    ``v_mod = lam_1^2 v(lam_1 y) - Q~_b(y)`` with ``v`` the frame density;
    pairings are evaluated on partial masses. The returned ``lam`` is
    ``state.lam * lam_1``.
    """
    frame = frame if frame is not None else ModulationFrame(M)
    r = frame.grid.nodes
    sup = frame.support

    def residual(x):
        lam1, b = math.exp(x[0]), x[1]
        eps_m = np.zeros(r.size)
        eps_m[sup] = _state_mass_at(state, lam1 * r[sup]) - frame.model_mass(b)[sup]
        return frame.pairings(eps_m), eps_m

    if guess is None:
        x = np.array([math.log(state.pinned_lambda / state.lam), 0.0])
    else:
        x = np.array([math.log(guess[0]), guess[1]])
    F, eps_m = residual(x)
    it = 0
    for it in range(1, max_iter + 1):
        steps = (1e-6, 1e-7)
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = steps[k]
            J[:, k] = (residual(x + e)[0] - residual(x - e)[0]) / (2.0 * steps[k])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as exc:
            raise DecompositionError(f"singular modulation Jacobian: {exc}") from exc
        x = x + dx
        F, eps_m = residual(x)
        eps_norm = math.sqrt(abs(float(np.sum(frame.grid.weights * _density_from_mass(frame.grid, eps_m) ** 2 * r))) * TWO_PI)
        tol = [1e-8 * eps_norm * gn + 1e-13 * gn for gn in frame.norms]
        if np.all(np.abs(F) <= tol) or np.max(np.abs(dx)) < 1e-13:
            break
    else:
        raise DecompositionError(f"Newton did not converge in {max_iter} iterations (residual {F})")
    if not np.all(np.isfinite(x)):
        raise DecompositionError("non-finite modulation parameters")
    lam1, b = math.exp(x[0]), float(x[1])
    # full-range residual on the frame grid
    eps_full = _state_mass_at(state, lam1 * r) - frame.model_mass(b)
    eps = RadialField(frame.grid, _density_from_mass(frame.grid, eps_full), "density")
    return Decomposition(state.lam * lam1, b, eps, lam1, it, (float(F[0]), float(F[1])))


def _density_from_mass(grid: RadialGrid, m: np.ndarray) -> np.ndarray:
    return grid.derivative(m, 1) / grid.nodes


# -- diagnostics ---------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    s: float
    lam: float
    b: float
    mass: float
    free_energy: float
    second_moment: float
    virial_lhs: float
    virial_rhs: float
    eps_norms: WeightedNorms | None = None
    b_orth: float = math.nan
    lam_orth: float = math.nan
    mass_quadrature: float = math.nan
    virial_boundary: float = 0.0
    clamped_nodes: int = 0
    min_density: float = math.nan
    central_density: float = math.nan
    step: int = 0


def free_energy(state: SimState) -> tuple[float, int]:
    """``int u log u + (1/2) int u phi_u`` in the original frame, and the count of clamped nodes."""
    v = state.density()
    clamped = int(np.sum(v < 1e-300))
    vc = np.maximum(v, 1e-300)
    f = RadialField(state.grid, vc, "density")
    entropy = integrate_radial(f.like(vc * np.log(vc), "generic"))
    phi = poisson_field(f, include_tail=False).phi.values
    inter = 0.5 * integrate_radial(f.like(vc * phi, "generic"))
    mass = state.total_plane_mass
    return entropy + inter + 2.0 * mass * math.log(state.lam) * (mass / CRITICAL_MASS - 1.0), clamped


def mass_quadrature(state: SimState) -> float:
    v = state.density()
    return integrate_radial(RadialField(state.grid, v, "density"))


def virial_rhs(mass: float) -> float:
    return 4.0 * mass * (1.0 - mass / CRITICAL_MASS)


def virial_boundary(state: SimState) -> float:
    """Flux term ``-4 pi R^2 u(R)`` of the truncated-domain identity (physical units)."""
    v = state.density()
    return -2.0 * TWO_PI * state.grid.r_max**2 * v[-1]


# -- runs ----------------------------------------------------------------------


@dataclass
class SolverConfig:
    b0: float = 1e-2
    mass_excess: float = 0.0
    rmin: float = 1e-3
    rmax: float = 1e3
    n: int = 1536
    dt0: float = 5e-3
    cfl: float = 0.1
    lambda_stop: float = 0.1
    t_max: float = math.inf
    max_steps: int = 500_000
    record_every: int = 100
    M: float = 20.0
    decompose: bool = True
    renorm_trigger: float = 0.9
    renorm_mode: str = "shift"
    checkpoint: str | None = None

    def validate(self) -> None:
        if not 0.0 <= self.b0 <= 1e-2:
            raise ConfigurationError(f"b0 must lie in [0, 1e-2], got {self.b0}")
        if not 0.0 < self.rmin < self.rmax:
            raise ConfigurationError("need 0 < rmin < rmax")
        if self.n < 64:
            raise ConfigurationError("need at least 64 nodes")
        if not self.dt0 > 0.0 or not self.cfl > 0.0:
            raise ConfigurationError("dt0 and cfl must be positive")
        if not 0.0 < self.lambda_stop < 1.0:
            raise ConfigurationError("lambda_stop must lie in (0, 1)")
        if self.record_every < 1:
            raise ConfigurationError("record_every must be at least 1")
        if not 0.0 < self.renorm_trigger < 1.0:
            raise ConfigurationError("renorm_trigger must lie in (0, 1)")
        if self.renorm_mode not in ("shift", "interpolate"):
            raise ConfigurationError(f"unknown renorm_mode {self.renorm_mode!r}")
        if self.decompose and self.M < 20.0:
            raise ConfigurationError("M must be at least 20")


@dataclass
class RunResult:
    trajectory: Trajectory
    records: list[DiagnosticsRecord]
    state: SimState
    stop_reason: str
    renormalizations: int = 0
    decomposition_failures: int = 0
    messages: list[str] = field(default_factory=list)

    def __iter__(self):
        yield self.trajectory
        yield self.records


def smoothed_derivative(x: np.ndarray, y: np.ndarray, window: int = 5) -> np.ndarray:
    """Derivative of local quadratic least-squares fits over ``window`` neighbours."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 3:
        raise NumericError("need at least three samples to differentiate")
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        lo = max(0, min(i - half, n - window))
        hi = min(n, lo + window)
        xs = x[lo:hi] - x[i]
        deg = min(2, hi - lo - 1)
        coef = np.polyfit(xs, y[lo:hi], deg)
        out[i] = coef[-2]
    return out


def _record(state: SimState, prev: tuple[float, float] | None, frame, guess, cfg) -> tuple[DiagnosticsRecord, tuple | None]:
    mass = state.total_plane_mass
    F, clamped = free_energy(state)
    m2 = second_moment(state)
    lhs = math.nan
    if prev is not None and state.t > prev[0]:
        lhs = (m2 - prev[1]) / (state.t - prev[0])
    v = state.density()
    b_orth = lam_orth = math.nan
    eps_norms = None
    new_guess = guess
    if frame is not None:
        try:
            rel = None if guess is None else (guess[0] / state.lam, guess[1])
            dec = decompose(state, cfg.M, guess=rel, frame=frame)
            b_orth, lam_orth = dec.b, dec.lam
            eps_norms = norms(dec.eps)
            new_guess = (dec.lam, dec.b)
        except NumericError:
            new_guess = None
    rec = DiagnosticsRecord(
        t=state.t,
        s=state.s,
        lam=state.pinned_lambda,
        b=math.nan,
        mass=mass,
        free_energy=F,
        second_moment=m2,
        virial_lhs=lhs,
        virial_rhs=virial_rhs(mass),
        eps_norms=eps_norms,
        b_orth=b_orth,
        lam_orth=lam_orth,
        mass_quadrature=mass_quadrature(state),
        virial_boundary=virial_boundary(state),
        clamped_nodes=clamped,
        min_density=float(np.min(v)),
        central_density=state.central_density,
        step=state.steps,
    )
    return rec, new_guess


def run(config: SolverConfig | None = None, state: SimState | None = None) -> RunResult:
    """Evolve until the pinned scale falls below ``lambda_stop`` (relative to its start) or a budget ends.

    The physical step is ``min(dt0 lam_pin^2, cfl/|u|_inf)``. ``b`` along
    the trajectory is ``-d log(lambda)/ds`` from smoothed differences of the
    records; when ``decompose`` is on every record also carries the
    orthogonality-based ``b``. On a numeric failure the current state is
    written to ``checkpoint`` (if set) before the error propagates.
    """
    cfg = config if config is not None else SolverConfig()
    cfg.validate()
    if state is None:
        h = math.log(cfg.rmax / cfg.rmin) / (cfg.n - 1)
        grid = solver_grid(cfg.rmin, h, cfg.n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SubcriticalWarning)
            state = init_from_profile(cfg.b0, grid=grid, mass_excess=cfg.mass_excess)
        if state.total_plane_mass <= CRITICAL_MASS:
            warnings.warn("subcritical initial mass", SubcriticalWarning, stacklevel=2)
    state = _with_reference(state)
    frame = ModulationFrame(cfg.M) if cfg.decompose else None
    lam_start = state.lam_ref
    records: list[DiagnosticsRecord] = []
    guess = None
    prev_m2 = None
    stop = "max_steps"
    renorms = 0
    failures = 0
    try:
        rec, guess = _record(state, None, frame, guess, cfg)
        records.append(rec)
        for _ in range(cfg.max_steps):
            if state.pinned_lambda <= cfg.lambda_stop * lam_start:
                stop = "lambda_stop"
                break
            if state.t >= cfg.t_max * (1.0 - 1e-12):
                stop = "t_max"
                break
            # step uniform in the pinned variables, so the truncation error
            # does not jump when the frame changes
            lam_pin = state.pinned_lambda
            u_max = float(np.max(np.abs(state.density()))) / state.lam**2
            dt = min(cfg.dt0 * lam_pin**2, cfg.cfl / u_max)
            if math.isfinite(cfg.t_max):
                dt = min(dt, cfg.t_max - state.t)
            record_now = (state.steps + 1) % cfg.record_every == 0
            if record_now:
                prev_m2 = (state.t, second_moment(state))
            state = time_step(state, dt)
            v = state.density()
            if np.min(v) < -1e-10 * np.max(np.abs(v)):
                raise NumericError(f"density turned negative (min {np.min(v):.3e})")
            if record_now:
                rec, guess = _record(state, prev_m2, frame, guess, cfg)
                if frame is not None and math.isnan(rec.b_orth):
                    failures += 1
                records.append(rec)
            if state.pinned_lambda / state.lam < cfg.renorm_trigger:
                new = renormalize(state, cfg.renorm_mode)
                renorms += new is not state
                state = new
    except NumericError:
        if cfg.checkpoint:
            save_checkpoint(state, cfg.checkpoint)
        raise
    if not records or records[-1].step != state.steps:
        rec, guess = _record(state, prev_m2 if prev_m2 and prev_m2[0] < state.t else None, frame, guess, cfg)
        records.append(rec)
    s = np.array([r.s for r in records])
    loglam = np.log([r.lam for r in records])
    b = -smoothed_derivative(s, loglam) if len(records) >= 3 else np.full(len(records), math.nan)
    records = [replace(r, b=float(bi)) for r, bi in zip(records, b)]
    traj = Trajectory(
        [ModulationState(t=r.t, s=r.s, lam=r.lam, b=r.b) for r in records],
    )
    if cfg.checkpoint:
        save_checkpoint(state, cfg.checkpoint)
    return RunResult(traj, records, state, stop, renorms, failures)


def steady_state_drift(steps: int = 1000, dt: float = 1e-2, grid: RadialGrid | None = None) -> float:
    """Largest change of the partial mass of ``Q`` over ``steps`` time steps."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SubcriticalWarning)
        state = init_from_profile(0.0, grid=grid)
    m0 = state.m.values.copy()
    for _ in range(steps):
        state = time_step(state, dt)
    return float(np.max(np.abs(state.m.values - m0)))


@dataclass(frozen=True)
class ConservationReport:
    mass_drift: float
    mass_drift_quadrature: float
    energy_max_increase: float
    virial_max_error: float
    virial_checked: int
    positivity_min: float


def conservation_report(records: list[DiagnosticsRecord], resolved_boundary: float = 1e-2) -> ConservationReport:
    """Relative mass drift, largest free-energy increase between records, virial mismatch.

    The virial comparison uses the truncated-domain identity (bulk term plus
    boundary flux) and only records whose boundary term is below
    ``resolved_boundary`` times the bulk term, i.e. where the second moment
    is resolved by the domain.
    """
    if len(records) < 2:
        raise ConfigurationError("need at least two records")
    mass = np.array([r.mass for r in records])
    mq = np.array([r.mass_quadrature for r in records])
    F = np.array([r.free_energy for r in records])
    errs = []
    for r in records:
        if not math.isfinite(r.virial_lhs):
            continue
        bulk = abs(r.virial_rhs)
        if abs(r.virial_boundary) > resolved_boundary * bulk:
            continue
        errs.append(abs(r.virial_lhs - r.virial_rhs - r.virial_boundary) / bulk)
    return ConservationReport(
        mass_drift=float(np.max(np.abs(mass / mass[0] - 1.0))),
        mass_drift_quadrature=float(np.max(np.abs(mq / mq[0] - 1.0))),
        energy_max_increase=float(np.max(np.diff(F))),
        virial_max_error=float(max(errs)) if errs else math.nan,
        virial_checked=len(errs),
        positivity_min=float(min(r.min_density / r.central_density for r in records)),
    )


@dataclass(frozen=True)
class PhenomenologyReport:
    lambda_drop: float
    lambda_monotone: bool
    b_positive: bool
    b_decreasing: bool
    window: tuple[int, int]
    b_agreement: float
    b_law_ratio: float
    b_law_ratio_orth: float


def final_decade(lam: np.ndarray) -> np.ndarray:
    """Mask of records whose scale lies within a factor 10 of the last one."""
    return lam <= 10.0 * lam[-1]


def phenomenology(records: list[DiagnosticsRecord]) -> PhenomenologyReport:
    """Blow-up trend checks over the final decade of the pinned scale.

    ``b_law_ratio`` is the window mean of ``b_s |log b| / b^2`` with ``b_s``
    from smoothed differences; ``b_agreement`` is the largest relative gap
    between the pinned and the orthogonality-based ``b``.
    """
    if len(records) < 5:
        raise ConfigurationError("need at least five records")
    lam = np.array([r.lam for r in records])
    s = np.array([r.s for r in records])
    b = np.array([r.b for r in records])
    bo = np.array([r.b_orth for r in records])
    w = final_decade(lam)
    idx = np.flatnonzero(w)

    def ratio(bb):
        if not np.all(np.isfinite(bb[w])) or np.any(bb[w] <= 0.0):
            return math.nan
        bs = smoothed_derivative(s, bb)
        return float(np.mean((bs * np.abs(np.log(bb)) / bb**2)[w]))

    agree = np.abs(bo[w] / b[w] - 1.0)
    return PhenomenologyReport(
        lambda_drop=float(lam[0] / lam[-1]),
        lambda_monotone=bool(np.all(np.diff(lam) < 0.0)),
        b_positive=bool(np.all(b > 0.0)),
        b_decreasing=bool(np.all(np.diff(b) < 0.0)),
        window=(int(idx[0]), int(idx[-1])),
        b_agreement=float(np.max(agree)) if np.all(np.isfinite(agree)) else math.nan,
        b_law_ratio=ratio(b),
        b_law_ratio_orth=ratio(bo),
    )


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_VERSION = 1
_HEADER_KEYS = ("frame", "t", "s", "lam", "lam_ref", "total_plane_mass", "log_step", "steps", "n")


def save_checkpoint(state: SimState, path) -> Path:
    """Plain-text checkpoint.

    Layout: ``# pks-checkpoint <version>``, then ``key = value`` lines for the
    clocks, then a ``# y m`` line followed by one ``y m`` pair per node
    with 17 significant digits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# pks-checkpoint {CHECKPOINT_VERSION}"]
    values = {
        "frame": state.frame,
        "t": repr(float(state.t)),
        "s": repr(float(state.s)),
        "lam": repr(float(state.lam)),
        "lam_ref": repr(float(state.lam_ref)),
        "total_plane_mass": repr(float(state.total_plane_mass)),
        "log_step": repr(float(state.log_step)),
        "steps": str(state.steps),
        "n": str(state.grid.n),
    }
    lines += [f"{k} = {values[k]}" for k in _HEADER_KEYS]
    lines.append("# y m")
    lines += [f"{y:.17g} {m:.17g}" for y, m in zip(state.y, state.m.values)]
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> SimState:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# pks-checkpoint"):
        raise ConfigurationError(f"{path} is not a checkpoint file")
    header = {}
    i = 1
    while i < len(text) and not text[i].startswith("# y m"):
        key, _, value = text[i].partition("=")
        header[key.strip()] = value.strip()
        i += 1
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ConfigurationError(f"checkpoint lacks keys {missing}")
    data = np.loadtxt(text[i + 1 :], ndmin=2)
    if data.shape != (int(header["n"]), 2):
        raise ConfigurationError("checkpoint node count does not match its header")
    grid = RadialGrid(data[:, 0], "log-uniform", origin_stride=0)
    return SimState(
        grid=grid,
        m=RadialField(grid, data[:, 1], "partial_mass"),
        frame=header["frame"],
        t=float(header["t"]),
        s=float(header["s"]),
        lam=float(header["lam"]),
        lam_ref=float(header["lam_ref"]),
        total_plane_mass=float(header["total_plane_mass"]),
        log_step=float(header["log_step"]),
        steps=int(header["steps"]),
    )
