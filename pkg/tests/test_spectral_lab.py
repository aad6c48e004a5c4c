import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pks_blowup import ground_state as gs
from pks_blowup.errors import ConfigurationError, UsageError
from pks_blowup.operators import apply_Hk, apply_L, apply_L0, apply_Lstar, apply_M, inner
from pks_blowup.profiles import build_T1
from pks_blowup.radial_numerics import RadialField, RadialGrid, build_grid, integrate_radial
from pks_blowup.spectral_lab import (
    IDENTITIES,
    MAX_DENSE_NODES,
    OPERATORS,
    assemble,
    build_Phi_M,
    coercivity_L,
    coercivity_M,
    coercivity_ratios,
    identity_residual,
    kernel_residuals,
    project_directions,
)

APPLY = {
    "M": (apply_M, "density"),
    "L": (apply_L, "generic"),
    "Lstar": (apply_Lstar, "generic"),
    "L0": (apply_L0, "partial_mass"),
    "H1": (lambda f: apply_Hk(f, 1), "generic"),
}


@pytest.fixture(scope="module")
def g():
    return build_grid(1e-3, 1e3, 1024)


@pytest.fixture(scope="module")
def mats(g):
    return {op: assemble(op, g) for op in OPERATORS}


def plane(grid, v):
    return math.sqrt(float(np.sum(grid.radial_weights * v * v)))


def bump(r, c, w):
    return np.exp(-(((r - c) / w) ** 2)) + np.exp(-(((r + c) / w) ** 2))


def test_assemble_examples():
    g4 = build_grid(n=4096)
    r = g4.nodes
    lq = gs.LambdaQ(r)
    Lm = assemble("L", g4)
    res = Lm @ lq
    l2q = lambda v: math.sqrt(float(np.sum(g4.radial_weights * v * v / gs.Q(r))))
    assert l2q(res) < 1e-5 * l2q(lq)
    Mm = assemble("M", g4)
    assert np.max(np.abs(Mm @ lq + 2.0)) < 1e-5
    R = g4.r_max / 4.0
    taper = gs.cutoff_chi_scaled(R, r) * r * r
    inner_ = r <= 10.0
    assert np.max(np.abs((assemble("Lstar", g4) @ taper)[inner_] + 4.0)) < 1e-5


def test_assemble_rejects_unknown(g):
    with pytest.raises(ConfigurationError):
        assemble("K", g)


def test_memory_guard():
    nodes = np.geomspace(1e-3, 1e3, MAX_DENSE_NODES + 1)
    big = RadialGrid(nodes, "log-uniform")
    with pytest.raises(ConfigurationError):
        assemble("M", big)


def test_apply_checks_grid(g, mats):
    other = build_grid(1e-3, 1e3, 512)
    with pytest.raises(UsageError):
        mats["L"].apply(other.field(np.ones(other.n)))


def test_M_matrix_symmetric_in_plane_measure(g, mats):
    S = g.radial_weights[:, None] * mats["M"].entries
    assert np.linalg.norm(S - S.T) < 1e-8 * np.linalg.norm(S)


@settings(max_examples=20, deadline=None)
@given(
    st.sampled_from(OPERATORS),
    st.floats(min_value=0.2, max_value=20.0),
    st.floats(min_value=0.2, max_value=1.0),
)
def test_matrix_matches_function_level(op, c, frac):
    grid = build_grid(1e-3, 1e3, 1024)
    u = bump(grid.nodes, c, max(frac * c, 0.3))
    fn, role = APPLY[op]
    direct = fn(RadialField(grid, u, role)).values
    mat = assemble(op, grid) @ u
    assert plane(grid, mat - direct) <= 1e-6 * plane(grid, direct)


@settings(max_examples=15, deadline=None)
@given(
    st.floats(min_value=0.5, max_value=20.0),
    st.floats(min_value=0.5, max_value=20.0),
)
def test_matrix_adjointness(c1, c2):
    grid = build_grid(1e-3, 1e3, 1024)
    r = grid.nodes
    u = grid.field(bump(r, c1, max(0.5 * c1, 0.3)))
    v = grid.field(bump(r, c2, max(0.5 * c2, 0.3)))
    gap = abs(inner(assemble("L", grid).apply(u), v) - inner(u, assemble("Lstar", grid).apply(v)))
    assert gap < 1e-6 * math.sqrt(inner(u, u) * inner(v, v))


@settings(max_examples=15, deadline=None)
@given(st.floats(min_value=0.3, max_value=20.0), st.floats(min_value=0.3, max_value=1.0))
def test_L_images_integrate_to_zero(c, frac):
    # the plane integral of L e vanishes for resolved e
    grid = build_grid(1e-3, 1e3, 1024)
    u = bump(grid.nodes, c, max(frac * c, 0.3))
    Lu = assemble("L", grid) @ u
    assert abs(integrate_radial(grid.field(Lu))) < 1e-7 * integrate_radial(grid.field(np.abs(Lu)))


def test_kernel_residuals_report():
    rep = kernel_residuals(build_grid(n=2048))
    assert set(rep.residuals) == set(IDENTITIES)
    for name in IDENTITIES:
        assert rep.residuals[name] < 1e-4, name
        assert rep.orders[name] >= 1.8, name
        ladder = rep.ladder[name]
        assert len(ladder) == 4
    assert rep.residuals["M LambdaQ + 2"] < 1e-6
    assert rep.residuals["M Lambda2Q - (LambdaQ/Q)^2"] < 1e-4


def test_identity_residual_unknown():
    with pytest.raises(ConfigurationError):
        identity_residual("L 42", build_grid(n=256))


# -- directions -------------------------------------------------------------------


@pytest.fixture(scope="module")
def phi_family():
    out = {}
    for M in (16.0, 32.0, 64.0, 128.0):
        grid = build_grid(r_max=max(1e4, 40.0 * M), n=4096)
        out[M] = (grid, build_Phi_M(M, grid))
    return out


def test_Phi0M_exact(phi_family):
    grid, d = phi_family[64.0]
    r = grid.nodes
    assert np.array_equal(d.Phi0M.values, gs.cutoff_chi_scaled(64.0, r) * r * r)


def test_Phi_M_orthogonal_to_T1(phi_family):
    for M, (grid, d) in phi_family.items():
        T1 = RadialField(grid, build_T1(grid)[1].values)
        assert abs(inner(d.PhiM, T1)) < 1e-8 * abs(inner(d.Phi0M, T1)), M


def test_Phi_M_LambdaQ_log_law(phi_family):
    def gap(M):
        grid, d = phi_family[M]
        val = inner(d.PhiM, RadialField(grid, gs.LambdaQ(grid.nodes)))
        return abs(val / (-32.0 * math.pi * math.log(M)) - 1.0)

    assert gap(64.0) < 0.25
    assert gap(128.0) < gap(32.0)


def test_c_M_growth_bounded(phi_family):
    vals = [abs(d.c_M) * math.log(M) / M**2 for M, (_, d) in phi_family.items()]
    assert max(vals) / min(vals) < 2.0


def test_build_Phi_M_guards():
    with pytest.raises(ConfigurationError):
        build_Phi_M(64.0, build_grid(1e-3, 100.0, 512))
    with pytest.raises(ConfigurationError):
        build_Phi_M(0.5)


# -- coercivity -------------------------------------------------------------------


@pytest.fixture(scope="module")
def coer1024():
    return coercivity_M(build_grid(n=1024))


@pytest.mark.slow
def test_coercivity_M_positive_and_stable(coer1024):
    fine = coercivity_M(build_grid(n=2048))
    assert coer1024.delta0 > 0.0 and fine.delta0 > 0.0
    assert abs(fine.delta0 / coer1024.delta0 - 1.0) < 0.1


def test_coercivity_M_kernel_and_constraints(coer1024):
    assert coer1024.delta0 > 0.0
    assert coer1024.kernel_eigenvalue <= 1e-6
    assert coer1024.unconstrained_min < coer1024.kernel_eigenvalue
    assert coer1024.constraint_residual < 1e-8
    assert coer1024.asymmetry < 1e-3


@pytest.fixture(scope="module")
def coerL():
    return {M: coercivity_L(M, samples=200) for M in (32.0, 64.0, 128.0)}


def test_coercivity_L_positive(coerL):
    rep = coerL[64.0]
    assert rep.samples == 200
    assert rep.min_energy_ratio > 0.0 and rep.min_norm_ratio > 0.0
    assert rep.energy_ratios.size + rep.skipped == 200


def test_coercivity_L_decreases_with_M(coerL):
    mins = [coerL[M].min_energy_ratio for M in (32.0, 64.0, 128.0)]
    assert mins[0] > mins[1] > mins[2]


def test_constraints_are_necessary(coerL):
    # the kernel direction of L, kept without projection, sends the second ratio to zero
    grid = build_grid(r_max=1e4, n=2048)
    r = grid.nodes
    e = gs.cutoff_chi_scaled(100.0, r) * gs.LambdaQ(r)
    _, norm_ratio = coercivity_ratios(RadialField(grid, e, "density"))
    assert norm_ratio < 1e-3 * coerL[64.0].min_norm_ratio


def test_projection_enforces_orthogonality():
    grid = build_grid(r_max=1e4, n=2048)
    d = build_Phi_M(32.0, grid, with_adjoint=True)
    e = project_directions(bump(grid.nodes, 3.0, 2.0), d, grid)
    ef = RadialField(grid, e)
    scale = math.sqrt(abs(inner(ef, ef)))
    assert abs(inner(d.PhiM, ef)) < 1e-8 * scale * math.sqrt(abs(inner(d.PhiM, d.PhiM)))
    assert abs(inner(d.LstarPhiM, ef)) < 1e-8 * scale * math.sqrt(abs(inner(d.LstarPhiM, d.LstarPhiM)))
    with pytest.raises(UsageError):
        project_directions(e, build_Phi_M(32.0, grid), grid)


def test_coercivity_L_grid_guard():
    with pytest.raises(ConfigurationError):
        coercivity_L(64.0, grid=build_grid(1e-3, 500.0, 512))
