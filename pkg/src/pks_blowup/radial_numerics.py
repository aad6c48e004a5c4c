"""Radial grids, quadrature, finite differences and interpolation.

Everything works on strictly increasing node sets ``0 < r_1 < ... < r_n``.
Derivatives use local Lagrange stencils on the actual (nonuniform) nodes,
so they are exact on polynomials in ``r`` of degree below the stencil width.
Integrals over each cell ``[r_i, r_{i+1}]`` integrate a local interpolant
exactly; cumulative integrals are running sums of those cell integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import ConfigurationError, NumericError, RangeError, UsageError

ROLES = ("density", "partial_mass", "potential", "generic")
MAP_KINDS = ("log-uniform", "log-uniform-with-origin-refinement", "custom")

TWO_PI = 2.0 * math.pi


def _centered_starts(count: int, n: int, width: int, lead: int) -> np.ndarray:
    """First stencil index for each of ``count`` anchors, clipped inside the grid."""
    return np.clip(np.arange(count) - lead, 0, n - width)


def _vandermonde_solve(t: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``sum_j w_j t_j**k = rhs_k`` for every row of ``t``."""
    width = t.shape[1]
    powers = np.arange(width)
    system = t[:, None, :] ** powers[None, :, None]
    return np.linalg.solve(system, rhs[..., None])[..., 0]


@dataclass(frozen=True, eq=False)
class RadialGrid:
    """Immutable radial node set with cached stencils.

    Attributes:
        nodes: Strictly increasing positive radii.
        map_kind: Descriptive tag of how the nodes were generated.
        fd_points: Stencil width for derivatives (odd, at least 3).
        quad_points: Stencil width of the per-cell quadrature rule (even).
        origin_stride: Near the origin derivative stencils use every
            ``k``-th node with ``k = clip(floor(origin_radius/r), 1, origin_stride)``.
            This bounds roundoff in second differences of O(1) fields while
            keeping the stencils a fixed number of log steps wide, so that
            they still converge on fields with ``r^2 log r`` terms. 0 disables.
        origin_radius: Radius below which strided stencils kick in.
    """

    nodes: np.ndarray
    map_kind: str = "log-uniform"
    fd_points: int = 7
    quad_points: int = 6
    origin_stride: int = 8
    origin_radius: float = 0.22

    def __post_init__(self) -> None:
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 16:
            raise ConfigurationError("a radial grid needs at least 16 nodes")
        if not np.all(np.isfinite(nodes)) or nodes[0] <= 0.0:
            raise ConfigurationError("grid nodes must be finite and positive")
        if np.any(np.diff(nodes) <= 0.0):
            raise ConfigurationError("grid nodes must be strictly increasing")
        if self.map_kind not in MAP_KINDS:
            raise ConfigurationError(f"unknown map kind {self.map_kind!r}")
        if self.fd_points < 3 or self.fd_points % 2 == 0:
            raise ConfigurationError("fd_points must be odd and at least 3")
        if self.quad_points < 2 or self.quad_points % 2 == 1:
            raise ConfigurationError("quad_points must be even and at least 2")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def n(self) -> int:
        return int(self.nodes.size)

    @property
    def r_min(self) -> float:
        return float(self.nodes[0])

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    @property
    def log_step(self) -> float:
        """Mean spacing in ``log r``."""
        return math.log(self.r_max / self.r_min) / (self.n - 1)

    @cached_property
    def _diff_stencils(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        r = self.nodes
        n, width = self.n, self.fd_points
        local = np.empty(n)
        local[:-1] = np.diff(r)
        local[-1] = r[-1] - r[-2]
        stride = np.ones(n, dtype=int)
        if self.origin_stride > 1:
            stride = np.clip(np.floor(self.origin_radius / r), 1, self.origin_stride).astype(int)
            stride = np.minimum(stride, (n - 1) // (width - 1))
        lo = np.arange(n) - stride * (width // 2)
        starts = np.clip(lo, 0, n - 1 - stride * (width - 1))
        idx = starts[:, None] + stride[:, None] * np.arange(width)[None, :]
        spacing = stride * local
        t = (r[idx] - r[:, None]) / spacing[:, None]
        out = {}
        for order in (1, 2):
            rhs = np.zeros((n, width))
            rhs[:, order] = math.factorial(order)
            w = _vandermonde_solve(t, rhs) / spacing[:, None] ** order
            # exact zero row sums: constants differentiate to zero
            near = np.argmin(np.abs(t), axis=1)
            w[np.arange(n), near] -= w.sum(axis=1)
            w.setflags(write=False)
            out[order] = (idx, w)
        return out

    @cached_property
    def _cell_rule(self) -> tuple[np.ndarray, np.ndarray]:
        r = self.nodes
        n, width = self.n, self.quad_points
        starts = _centered_starts(n - 1, n, width, width // 2 - 1)
        idx = starts[:, None] + np.arange(width)[None, :]
        length = np.diff(r)
        t = (r[idx] - r[:-1, None]) / length[:, None]
        moments = np.broadcast_to(1.0 / np.arange(1, width + 1), t.shape)
        w = _vandermonde_solve(t, np.array(moments)) * length[:, None]
        w.setflags(write=False)
        return idx, w

    @cached_property
    def weights(self) -> np.ndarray:
        """Weights ``w`` with ``sum(w * g)`` approximating ``int g dr`` on the grid."""
        idx, w = self._cell_rule
        out = np.zeros(self.n)
        np.add.at(out, idx.ravel(), w.ravel())
        out.setflags(write=False)
        return out

    @cached_property
    def radial_weights(self) -> np.ndarray:
        """Weights for the plane measure ``2 pi r dr`` (origin cap excluded)."""
        out = TWO_PI * self.weights * self.nodes
        out.setflags(write=False)
        return out

    def cell_integrals(self, g: np.ndarray) -> np.ndarray:
        idx, w = self._cell_rule
        return np.einsum("ij,ij->i", w, np.asarray(g, dtype=float)[idx])

    def cumulative(self, g: np.ndarray, origin: float = 0.0) -> np.ndarray:
        """Running integral ``origin + int_{r_min}^{r_i} g dr`` at every node."""
        out = np.empty(self.n)
        out[0] = origin
        out[1:] = origin + np.cumsum(self.cell_integrals(g))
        return out

    def derivative(self, values: np.ndarray, order: int) -> np.ndarray:
        if order not in (1, 2):
            raise ConfigurationError(f"derivative order must be 1 or 2, got {order}")
        idx, w = self._diff_stencils[order]
        return np.einsum("ij,ij->i", w, np.asarray(values, dtype=float)[idx])

    def derivative_magnitude(self, values: np.ndarray, order: int) -> np.ndarray:
        """``sum |w| |f|`` over each stencil: the roundoff scale of :meth:`derivative`."""
        if order not in (1, 2):
            raise ConfigurationError(f"derivative order must be 1 or 2, got {order}")
        idx, w = self._diff_stencils[order]
        return np.einsum("ij,ij->i", np.abs(w), np.abs(np.asarray(values, dtype=float))[idx])

    def derivative_matrix(self, order: int) -> np.ndarray:
        """Dense matrix of :meth:`derivative`."""
        if order not in (1, 2):
            raise ConfigurationError(f"derivative order must be 1 or 2, got {order}")
        idx, w = self._diff_stencils[order]
        mat = np.zeros((self.n, self.n))
        np.put_along_axis(mat, idx, w, axis=1)
        return mat

    def cumulative_matrix(self) -> np.ndarray:
        """Dense lower-triangular matrix of :meth:`cumulative` with zero origin."""
        idx, w = self._cell_rule
        cells = np.zeros((self.n - 1, self.n))
        np.put_along_axis(cells, idx, w, axis=1)
        mat = np.zeros((self.n, self.n))
        mat[1:] = np.cumsum(cells, axis=0)
        return mat

    def sample(self, func: Callable[[np.ndarray], np.ndarray], role: str = "generic") -> "RadialField":
        return RadialField(self, func(self.nodes), role)

    def field(self, values, role: str = "generic") -> "RadialField":
        return RadialField(self, values, role)


@dataclass(frozen=True, eq=False)
class RadialField:
    """Samples of a radial function on a grid, tagged with their role."""

    grid: RadialGrid
    values: np.ndarray
    role: str = "generic"

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise UsageError(f"unknown field role {self.role!r}")
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise ConfigurationError(
                f"field has {values.size} samples but the grid has {self.grid.n} nodes"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def r(self) -> np.ndarray:
        return self.grid.nodes

    def like(self, values, role: str | None = None) -> "RadialField":
        return RadialField(self.grid, values, self.role if role is None else role)


def build_grid(
    r_min: float = 1e-4,
    r_max: float = 1e4,
    n: int = 4096,
    map_kind: str = "log-uniform",
) -> RadialGrid:
    """Log-uniform grid on ``[r_min, r_max]``.

    ``log-uniform-with-origin-refinement`` halves the log step on the first
    decade above ``r_min`` while keeping the total node count ``n``.
    """
    if not (np.isfinite(r_min) and np.isfinite(r_max)) or not 0.0 < r_min < r_max:
        raise ConfigurationError(f"need 0 < r_min < r_max, got ({r_min}, {r_max})")
    if int(n) != n or n < 16:
        raise ConfigurationError(f"need an integer n >= 16, got {n}")
    n = int(n)
    if map_kind == "log-uniform":
        nodes = np.geomspace(r_min, r_max, n)
    elif map_kind == "log-uniform-with-origin-refinement":
        span = math.log(r_max / r_min)
        inner = min(math.log(10.0), 0.5 * span)
        # inner span gets twice the node density of the outer span
        n_in = max(4, int(round((n - 1) * 2 * inner / (inner + span))))
        x_split = math.log(r_min) + inner
        left = np.linspace(math.log(r_min), x_split, n_in + 1)
        right = np.linspace(x_split, math.log(r_max), n - n_in)
        nodes = np.exp(np.concatenate([left[:-1], right]))
        nodes[0], nodes[-1] = r_min, r_max
    else:
        raise ConfigurationError(f"unknown map kind {map_kind!r}")
    return RadialGrid(nodes, map_kind)


def extend_grid(grid: RadialGrid, r_max: float) -> RadialGrid:
    """Append geometric nodes with the grid's last ratio until ``r_max`` is covered."""
    if r_max <= grid.r_max:
        return grid
    ratio = grid.nodes[-1] / grid.nodes[-2]
    extra = int(math.ceil(math.log(r_max / grid.r_max) / math.log(ratio)))
    tail = grid.r_max * ratio ** np.arange(1, extra + 1)
    return RadialGrid(
        np.concatenate([grid.nodes, tail]),
        grid.map_kind,
        grid.fd_points,
        grid.quad_points,
        grid.origin_stride,
        grid.origin_radius,
    )


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite samples in {what}")


def differentiate(f: RadialField, order: int) -> RadialField:
    """First or second radial derivative; one-sided stencils at the ends."""
    if f.grid.n < 5:
        raise ConfigurationError("differentiation needs at least 5 nodes")
    return RadialField(f.grid, f.grid.derivative(f.values, order), "generic")


def even_origin_coefficients(grid: RadialGrid, values: np.ndarray) -> tuple[float, float]:
    """Coefficients ``(a, c)`` of the even model ``a + c r**2`` near the origin.

    The second sample is taken near ``2 r_min`` (when available) so that the
    slope is not dominated by roundoff on a finely spaced grid.
    """
    r = grid.nodes
    k = int(min(max(np.searchsorted(r, 2.0 * r[0]), 1), grid.n - 1))
    r0, r1 = r[0], r[k]
    c = (values[k] - values[0]) / (r1 * r1 - r0 * r0)
    return float(values[0] - c * r0 * r0), float(c)


def origin_moment(grid: RadialGrid, values: np.ndarray) -> float:
    """``int_0^{r_min} f(t) t dt`` for an even smooth ``f``."""
    a, c = even_origin_coefficients(grid, values)
    r0 = grid.nodes[0]
    return a * r0**2 / 2.0 + c * r0**4 / 4.0


def origin_log_moment(grid: RadialGrid, values: np.ndarray) -> float:
    """``int_0^{r_min} log(t) f(t) t dt`` for an even smooth ``f``."""
    a, c = even_origin_coefficients(grid, values)
    r0 = grid.nodes[0]
    lr = math.log(r0)
    return a * (r0**2 * lr / 2.0 - r0**2 / 4.0) + c * (r0**4 * lr / 4.0 - r0**4 / 16.0)


def power_law_tail(grid: RadialGrid, values: np.ndarray, count: int = 8) -> tuple[float, float] | None:
    """Fit ``f ~ c r**(-p)`` on the last ``count`` nodes.

    Returns ``(c, p)`` or ``None`` when the tail vanishes or changes sign.
    """
    r = grid.nodes[-count:]
    v = np.asarray(values, dtype=float)[-count:]
    if np.any(v == 0.0) or not (np.all(v > 0) or np.all(v < 0)):
        return None
    slope, intercept = np.polyfit(np.log(r), np.log(np.abs(v)), 1)
    return float(np.sign(v[-1]) * math.exp(intercept)), float(-slope)


def radial_tail(f: RadialField) -> float:
    """Estimated plane integral ``2 pi int_{r_max}^inf f r dr`` from a power-law fit.

    Returns ``inf`` (with the tail's sign) when the fitted decay is too slow.
    """
    fit = power_law_tail(f.grid, f.values)
    if fit is None:
        return 0.0
    c, p = fit
    if p <= 2.0:
        return math.copysign(math.inf, c)
    return TWO_PI * c * f.grid.r_max ** (2.0 - p) / (p - 2.0)


def integrate_radial(f: RadialField) -> float:
    """Plane integral ``2 pi int_0^{r_max} f(r) r dr``.

    The cap ``[0, r_min]`` uses the even extension of ``f``; the part beyond
    ``r_max`` is not included (see :func:`radial_tail`).
    """
    _check_finite(f.values, "integrate_radial")
    grid = f.grid
    return TWO_PI * (origin_moment(grid, f.values) + float(np.sum(grid.weights * grid.nodes * f.values)))


def inner(f: RadialField, g: RadialField) -> float:
    """Plane scalar product ``(f, g)``."""
    return integrate_radial(f.like(f.values * g.values, "generic"))


def lagrange_basis(nodes: np.ndarray, x: np.ndarray, width: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Local Lagrange interpolation weights at points ``x``.

    Returns ``(idx, w)`` so that ``sum(w * f[idx], axis=1)`` interpolates ``f``.
    Products are formed explicitly so that nodes are reproduced exactly.
    """
    n = nodes.size
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cell = np.clip(np.searchsorted(nodes, x, side="right") - 1, 0, n - 2)
    starts = np.clip(cell - (width // 2 - 1), 0, n - width)
    idx = starts[:, None] + np.arange(width)[None, :]
    xs = nodes[idx]
    w = np.ones_like(xs)
    for j in range(width):
        for k in range(width):
            if k != j:
                w[:, j] *= (x - xs[:, k]) / (xs[:, j] - xs[:, k])
    return idx, w


def interpolate(f: RadialField, r, width: int = 4):
    """Local polynomial interpolation (cubic by default) inside ``[r_min, r_max]``."""
    scalar = np.ndim(r) == 0
    x = np.atleast_1d(np.asarray(r, dtype=float))
    grid = f.grid
    if np.any(x < grid.r_min) or np.any(x > grid.r_max) or not np.all(np.isfinite(x)):
        raise RangeError(f"interpolation point outside [{grid.r_min}, {grid.r_max}]")
    idx, w = lagrange_basis(grid.nodes, x, width)
    out = np.sum(w * f.values[idx], axis=1)
    return float(out[0]) if scalar else out
