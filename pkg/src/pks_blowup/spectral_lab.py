"""Matrix versions of the linearized operators, kernel checks and coercivity estimates.

Matrices act on nodal samples. The Poisson part of ``M`` and ``L`` is the
dense lower-triangular cumulative-quadrature matrix used by the radial
solver, so ``assemble(op) @ samples`` reproduces the function-level
operators up to the power-law tail closures (which are nonlinear and are
dropped; every quantity fed to a matrix here decays or is cut off).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh, null_space

from . import ground_state as gs
from .errors import ConfigurationError, NumericError, UsageError
from .operators import apply_L, apply_Lstar, apply_M, inner, l2q_norm, partial_mass
from .profiles import _variation_of_constants
from .radial_numerics import TWO_PI, RadialField, RadialGrid, build_grid, integrate_radial

OPERATORS = ("M", "L", "Lstar", "L0", "H1")
MAX_DENSE_NODES = 16384


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    op_id: str
    grid: RadialGrid
    entries: np.ndarray
    bc: str

    def __matmul__(self, values):
        return self.entries @ np.asarray(values, dtype=float)

    def apply(self, f: RadialField) -> RadialField:
        if f.grid is not self.grid:
            raise UsageError("field and matrix live on different grids")
        return RadialField(self.grid, self.entries @ f.values, "generic")


def _origin_rows(grid: RadialGrid) -> tuple[np.ndarray, np.ndarray]:
    """Row vectors of the origin moment and origin log-moment (linear in the samples)."""
    r = grid.nodes
    k = int(min(max(np.searchsorted(r, 2.0 * r[0]), 1), grid.n - 1))
    r0, r1 = r[0], r[k]
    span = r1 * r1 - r0 * r0
    # a = v0 - c r0^2, c = (vk - v0)/span
    c_row = np.zeros(grid.n)
    c_row[k] += 1.0 / span
    c_row[0] -= 1.0 / span
    a_row = -r0 * r0 * c_row
    a_row[0] += 1.0
    lr = math.log(r0)
    moment = a_row * r0**2 / 2.0 + c_row * r0**4 / 4.0
    log_moment = a_row * (r0**2 * lr / 2.0 - r0**2 / 4.0) + c_row * (r0**4 * lr / 4.0 - r0**4 / 16.0)
    return moment, log_moment


def mass_matrix(grid: RadialGrid) -> np.ndarray:
    """Matrix of ``u -> m(r) = int_0^r u t dt``."""
    moment, _ = _origin_rows(grid)
    return grid.cumulative_matrix() * grid.nodes[None, :] + moment[None, :]


def potential_matrix(grid: RadialGrid) -> np.ndarray:
    """Matrix of ``u -> phi_u`` without the tail beyond ``r_max``."""
    r = grid.nodes
    logr = np.log(r)
    C = grid.cumulative_matrix()
    moment, log_moment = _origin_rows(grid)
    mass = C * r[None, :] + moment[None, :]
    running = C * (r * logr)[None, :] + log_moment[None, :]
    return logr[:, None] * mass + (running[-1][None, :] - running)


def _guard(grid: RadialGrid) -> None:
    if grid.n > MAX_DENSE_NODES:
        raise ConfigurationError(
            f"dense assembly refused for n = {grid.n} > {MAX_DENSE_NODES} "
            f"({grid.n**2 * 8 / 2**30:.1f} GiB per matrix)"
        )


def assemble(op_id: str, grid: RadialGrid) -> OperatorMatrix:
    """Dense matrix of one of ``M``, ``L``, ``Lstar``, ``L0``, ``H1`` on ``grid``."""
    if op_id not in OPERATORS:
        raise ConfigurationError(f"unknown operator {op_id!r}; choose from {OPERATORS}")
    _guard(grid)
    r = grid.nodes
    if op_id == "M":
        mat = potential_matrix(grid)
        mat[np.diag_indices_from(mat)] += 1.0 / gs.Q(r)
        return OperatorMatrix(op_id, grid, mat, "potential truncated at r_max, even origin cap")
    D1 = grid.derivative_matrix(1)
    D2 = grid.derivative_matrix(2)
    if op_id == "L":
        mat = D2 + (1.0 / r + gs.dphiQ(r))[:, None] * D1 + (gs.dQ(r) / r)[:, None] * mass_matrix(grid)
        mat[np.diag_indices_from(mat)] += 2.0 * gs.Q(r)
        bc = "one-sided stencils at both ends, partial mass with even origin cap"
    elif op_id == "Lstar":
        C = grid.cumulative_matrix()
        outer = C[-1][None, :] - C
        mat = D2 + (1.0 / r + gs.grad_log_Q(r))[:, None] * D1 - outer @ (gs.Q(r)[:, None] * D1)
        bc = "outer potential integral truncated at r_max"
    elif op_id == "L0":
        mat = -D2 + gs.L0_coefficient(r)[:, None] * D1
        mat[np.diag_indices_from(mat)] -= gs.Q(r)
        bc = "one-sided stencils at both ends"
    else:
        mat = -D2 - (1.0 / r)[:, None] * D1
        mat[np.diag_indices_from(mat)] += 1.0 / (r * r) - gs.Q(r)
        bc = "one-sided stencils at both ends"
    return OperatorMatrix(op_id, grid, mat, bc)


# -- kernel identities ---------------------------------------------------------


def _plane_norm(grid: RadialGrid, v: np.ndarray) -> float:
    return math.sqrt(max(float(np.sum(grid.radial_weights * v * v)), 0.0))


def _identity_terms(name: str, grid: RadialGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual, scale (sum of absolute terms) and a mask of where the identity holds."""
    r = grid.nodes
    D = grid.derivative
    everywhere = np.ones(grid.n, dtype=bool)
    if name == "M LambdaQ + 2":
        lq = gs.LambdaQ(r)
        res = apply_M(RadialField(grid, lq, "density")).values + 2.0
        return res, np.abs(lq / gs.Q(r)) + 2.0, everywhere
    if name == "M Lambda2Q - (LambdaQ/Q)^2":
        l2 = gs.Lambda2Q(r)
        res = apply_M(RadialField(grid, l2, "density")).values - (gs.LambdaQ(r) / gs.Q(r)) ** 2
        return res, np.abs(l2 / gs.Q(r)) + (gs.LambdaQ(r) / gs.Q(r)) ** 2, everywhere
    if name in ("L LambdaQ", "L T1 - LambdaQ"):
        if name == "L LambdaQ":
            e, target = gs.LambdaQ(r), 0.0
        else:
            e, target = _variation_of_constants(grid, 8.0 * gs.psi0(r))[1], gs.LambdaQ(r)
        e1, e2 = D(e, 1), D(e, 2)
        m = partial_mass(RadialField(grid, e, "density")).values
        terms = [e2, e1 / r, 2.0 * gs.Q(r) * e, gs.dphiQ(r) * e1, gs.dQ(r) * m / r]
        res = sum(terms) - target
        return res, sum(np.abs(t) for t in terms) + np.abs(target), everywhere
    if name in ("Lstar 1", "Lstar r^2 + 4"):
        if name == "Lstar 1":
            e = np.ones(grid.n)
            target = np.zeros(grid.n)
            mask = everywhere
        else:
            R = grid.r_max / 4.0
            e = gs.cutoff_chi_scaled(R, r) * r * r
            target = lstar_tapered_square_exact(R, r)
            mask = r <= R
        Lst = apply_Lstar(RadialField(grid, e)).values
        coef = np.abs(1.0 / r + gs.grad_log_Q(r))
        if name == "Lstar 1":
            # every term vanishes identically; measure against the stencil magnitude
            scale = grid.derivative_magnitude(e, 2) + coef * grid.derivative_magnitude(e, 1)
        else:
            e1, e2 = D(e, 1), D(e, 2)
            scale = np.abs(e2) + coef * np.abs(e1) + np.abs(Lst - e2 - (1.0 / r + gs.grad_log_Q(r)) * e1)
        return Lst - target, scale + np.abs(target), mask
    if name in ("L0 psi0", "L0 psi1"):
        m = gs.psi0(r) if name == "L0 psi0" else gs.psi1(r)
        terms = [-D(m, 2), gs.L0_coefficient(r) * D(m, 1), -gs.Q(r) * m]
        return sum(terms), sum(np.abs(t) for t in terms), everywhere
    if name == "H1 phiQ'":
        p = gs.dphiQ(r)
        terms = [-D(p, 2), -D(p, 1) / r, p / (r * r), -gs.Q(r) * p]
        return sum(terms), sum(np.abs(t) for t in terms), everywhere
    raise ConfigurationError(f"unknown identity {name!r}")


IDENTITIES = (
    "M LambdaQ + 2",
    "L LambdaQ",
    "L T1 - LambdaQ",
    "Lstar 1",
    "Lstar r^2 + 4",
    "L0 psi0",
    "L0 psi1",
    "H1 phiQ'",
    "M Lambda2Q - (LambdaQ/Q)^2",
)
MAX_NORM_IDENTITIES = ("M LambdaQ + 2", "M Lambda2Q - (LambdaQ/Q)^2")


def lstar_tapered_square_exact(R: float, r) -> np.ndarray:
    """``L*(chi_R r^2)`` on ``r <= R``: ``-4 + 8/(1+R^2) - int_R^{2R} Q (chi_R t^2)' dt``."""
    from scipy.integrate import quad

    def integrand(t):
        x = t / R
        return float(gs.Q(t) * (2.0 * t * gs.chi(x) + t * t * gs.dchi(x) / R))

    J, _ = quad(integrand, R, 2.0 * R, epsabs=0.0, epsrel=1e-13, limit=200)
    return np.full(np.shape(r), -4.0 + 8.0 / (1.0 + R * R) - J)


def identity_residual(name: str, grid: RadialGrid) -> float:
    """Relative residual of one identity.

    Max-norm ratio for the ``M`` identities (no differentiation involved) and
    plane ``L^2`` ratio against the sum of absolute operator terms otherwise.
    """
    res, scale, mask = _identity_terms(name, grid)
    if name in MAX_NORM_IDENTITIES:
        return float(np.max(np.abs(res[mask])))
    num = _plane_norm(grid, np.where(mask, res, 0.0))
    den = _plane_norm(grid, np.where(mask, scale, 0.0))
    return num / den if den > 0 else num


@dataclass(frozen=True)
class KernelReport:
    n: int
    residuals: dict
    ladder: dict
    orders: dict
    floor: float

    def rows(self):
        for name in self.residuals:
            yield name, self.residuals[name], self.orders[name]


def kernel_residuals(
    grid: RadialGrid | None = None, names=IDENTITIES, floor: float = 1e-9
) -> KernelReport:
    """Residual table at the grid's resolution plus refinement orders.

    Orders come from the ladder ``n/8, n/4, n/2, n`` on the same interval;
    the reported order is the largest pairwise rate among ladder steps whose
    coarser residual is above ``floor`` (finer levels sit on the roundoff
    floor and carry no rate information). ``inf`` means every level is
    already at the floor.
    """
    grid = grid if grid is not None else build_grid(n=2048)
    levels = [grid.n // 8, grid.n // 4, grid.n // 2]
    grids = [build_grid(grid.r_min, grid.r_max, k, grid.map_kind) for k in levels] + [grid]
    residuals, ladder, orders = {}, {}, {}
    for name in names:
        vals = [identity_residual(name, g) for g in grids]
        ladder[name] = tuple(vals)
        residuals[name] = vals[-1]
        rates = []
        for (g0, v0), (g1, v1) in zip(zip(grids, vals), zip(grids[1:], vals[1:])):
            if v0 > floor and v1 > 0:
                rates.append(math.log(v0 / v1) / math.log(g1.n / g0.n))
        orders[name] = max(rates) if rates else math.inf
    return KernelReport(grid.n, residuals, ladder, orders, floor)


# -- directions ------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionSet:
    M: float
    Phi0M: RadialField
    PhiM: RadialField
    c_M: float
    LstarPhiM: RadialField | None = None

    def pairing(self, g: RadialField) -> float:
        return inner(self.PhiM, g)


def build_Phi_M(M: float, grid: RadialGrid | None = None, with_adjoint: bool = False) -> DirectionSet:
    """``Phi_M = chi_M r^2 + c_M L*(chi_M r^2)`` with ``c_M = -(chi_M r^2, T1)/(chi_M r^2, LambdaQ)``.

    Since ``L T1 = LambdaQ`` the denominator is ``(L*(chi_M r^2), T1)``, which
    makes ``(Phi_M, T1) = 0``.
    """
    if not (np.isfinite(M) and M > 1.0):
        raise ConfigurationError(f"M must exceed 1, got {M}")
    grid = grid if grid is not None else build_grid()
    if grid.r_max < 4.0 * M:
        raise ConfigurationError(f"grid reaches {grid.r_max:.3g} < 4M = {4.0 * M:.3g}")
    r = grid.nodes
    T1 = RadialField(grid, _variation_of_constants(grid, 8.0 * gs.psi0(r))[1], "density")
    phi0 = RadialField(grid, gs.cutoff_chi_scaled(M, r) * r * r)
    lphi0 = apply_Lstar(phi0)
    den = inner(phi0, RadialField(grid, gs.LambdaQ(r)))
    if den == 0.0:
        raise NumericError("degenerate normalization of Phi_M")
    c_M = -inner(phi0, T1) / den
    phi = RadialField(grid, phi0.values + c_M * lphi0.values)
    lphi = apply_Lstar(phi) if with_adjoint else None
    return DirectionSet(M=M, Phi0M=phi0, PhiM=phi, c_M=c_M, LstarPhiM=lphi)


# -- coercivity ------------------------------------------------------------------


@dataclass(frozen=True)
class CoercivityM:
    n: int
    delta0: float
    kernel_eigenvalue: float
    unconstrained_min: float
    asymmetry: float
    minimizer: np.ndarray = field(repr=False)
    constraint_residual: float = 0.0


def _support(grid: RadialGrid, fraction: float = 0.05) -> np.ndarray:
    keep = grid.n - max(int(math.ceil(fraction * grid.n)), 1)
    return np.arange(keep)


def coercivity_M(grid: RadialGrid | None = None) -> CoercivityM:
    """Smallest eigenvalue of ``(M u, u)`` in the ``L^2_Q`` metric on ``{(u,1) = (u,LambdaQ) = 0}``.

    Trial functions vanish on the last 5% of nodes. In the coordinates
    ``v = sqrt(w/Q) u`` (``w`` the plane quadrature weights) the metric is
    the identity, and the form matrix is symmetrized; the relative size of
    its antisymmetric part is reported.
    """
    grid = grid if grid is not None else build_grid(n=1024)
    _guard(grid)
    r = grid.nodes
    idx = _support(grid)
    w = grid.radial_weights
    Mmat = assemble("M", grid).entries
    scale = np.sqrt(w / gs.Q(r))[idx]
    K = (w[idx, None] * Mmat[np.ix_(idx, idx)]) / scale[:, None] / scale[None, :]
    asym = float(np.linalg.norm(K - K.T) / np.linalg.norm(K))
    S = 0.5 * (K + K.T)
    ones_c = w[idx] / scale
    lq_c = w[idx] * gs.LambdaQ(r[idx]) / scale
    try:
        unconstrained = float(eigh(S, eigvals_only=True, subset_by_index=[0, 0])[0])
        Z1 = null_space(ones_c[None, :])
        kernel = float(eigh(Z1.T @ S @ Z1, eigvals_only=True, subset_by_index=[0, 0])[0])
        Z = null_space(np.vstack([ones_c, lq_c]))
        vals, vecs = eigh(Z.T @ S @ Z, subset_by_index=[0, 0])
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigensolver failed: {exc}") from exc
    v = Z @ vecs[:, 0]
    u = np.zeros(grid.n)
    u[idx] = v / scale
    norm_u = math.sqrt(float(np.sum(w * u * u / gs.Q(r))))
    # Cauchy-Schwarz normalization: |(u, g)| <= |u|_{L^2_Q} (int g^2 Q)^(1/2)
    cons = max(
        abs(float(np.dot(w, u * g))) / (norm_u * math.sqrt(float(np.sum(w * g * g * gs.Q(r)))))
        for g in (np.ones(grid.n), gs.LambdaQ(r))
    )
    return CoercivityM(
        n=grid.n,
        delta0=float(vals[0]),
        kernel_eigenvalue=kernel,
        unconstrained_min=unconstrained,
        asymmetry=asym,
        minimizer=u,
        constraint_residual=cons,
    )


@dataclass(frozen=True)
class CoercivityL:
    M: float
    samples: int
    skipped: int
    min_energy_ratio: float
    min_norm_ratio: float
    energy_ratios: np.ndarray = field(repr=False)
    norm_ratios: np.ndarray = field(repr=False)


def _bump_family(grid: RadialGrid, M: float, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    r = grid.nodes
    centers = np.exp(rng.uniform(math.log(0.1), math.log(10.0 * M), count))
    widths = np.exp(rng.uniform(math.log(0.1), math.log(10.0), count))
    return [np.exp(-(((r - c) / w) ** 2)) + np.exp(-(((r + c) / w) ** 2)) for c, w in zip(centers, widths)]


def _sobolev_weight(grid: RadialGrid, e: np.ndarray) -> float:
    r = grid.nodes
    e1 = grid.derivative(e, 1)
    lap = grid.derivative(e, 2) + e1 / r
    return integrate_radial(
        RadialField(grid, (1.0 + r**4) * lap * lap + (1.0 + r * r) * e1 * e1 + e * e)
    )


def coercivity_ratios(eps: RadialField) -> tuple[float, float]:
    """``(M L e, L e)/|L e|^2_{L^2_Q}`` and ``|L e|^2_{L^2_Q}`` over the weighted Sobolev norm."""
    Le = apply_L(eps)
    nrm = l2q_norm(Le) ** 2
    if nrm == 0.0:
        return math.nan, 0.0
    energy = inner(apply_M(Le.like(Le.values, "density")), Le)
    return energy / nrm, nrm / _sobolev_weight(eps.grid, eps.values)


def project_directions(eps: np.ndarray, dirs: DirectionSet, grid: RadialGrid) -> np.ndarray:
    """Remove ``chi_{4M} LambdaQ`` and ``chi_{4M} T1`` components so that ``(e, Phi_M) = (e, L* Phi_M) = 0``."""
    if dirs.LstarPhiM is None:
        raise UsageError("direction set was built without L* Phi_M")
    r = grid.nodes
    cut = gs.cutoff_chi_scaled(4.0 * dirs.M, r)
    T1 = _variation_of_constants(grid, 8.0 * gs.psi0(r))[1]
    basis = [cut * gs.LambdaQ(r), cut * T1]
    tests = [dirs.PhiM, dirs.LstarPhiM]
    A = np.array([[inner(t, RadialField(grid, b)) for b in basis] for t in tests])
    rhs = np.array([inner(t, RadialField(grid, eps)) for t in tests])
    coef = np.linalg.solve(A, rhs)
    return eps - coef[0] * basis[0] - coef[1] * basis[1]


def coercivity_L(
    M: float, grid: RadialGrid | None = None, samples: int = 200, seed: int = 0
) -> CoercivityL:
    """Sampled lower bounds of the two coercivity ratios over projected Gaussian bumps."""
    grid = grid if grid is not None else build_grid(r_max=max(1e4, 40.0 * M), n=2048)
    if grid.r_max < 20.0 * M:
        raise ConfigurationError(f"coercivity_L needs a grid reaching 20M = {20.0 * M:.3g}")
    dirs = build_Phi_M(M, grid, with_adjoint=True)
    energy, norm = [], []
    skipped = 0
    for bump in _bump_family(grid, M, samples, seed):
        e = project_directions(bump, dirs, grid)
        er, nr = coercivity_ratios(RadialField(grid, e, "density"))
        if not np.isfinite(er) or nr <= 1e-14:
            skipped += 1
            continue
        energy.append(er)
        norm.append(nr)
    if not energy:
        raise NumericError("every sample was degenerate")
    energy = np.array(energy)
    norm = np.array(norm)
    return CoercivityL(M, samples, skipped, float(energy.min()), float(norm.min()), energy, norm)
