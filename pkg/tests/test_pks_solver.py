import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson

from pks_blowup import ground_state as gs
from pks_blowup.errors import (
    ConfigurationError,
    DecompositionError,
    InvalidDataError,
    SubcriticalWarning,
)
from pks_blowup.pks_solver import (
    ModulationFrame,
    SolverConfig,
    conservation_report,
    decompose,
    free_energy,
    init_from_profile,
    load_checkpoint,
    mass_quadrature,
    renormalize,
    rescale,
    run,
    save_checkpoint,
    second_moment,
    smoothed_derivative,
    solver_grid,
    steady_state_drift,
    time_step,
    virial_rhs,
)
from pks_blowup.profiles import assemble_profile
from pks_blowup.radial_numerics import RadialField

EIGHT_PI = 8.0 * math.pi
H768 = math.log(1e6) / 767


@pytest.fixture(scope="module")
def g():
    return solver_grid(1e-3, H768, 768)


@pytest.fixture(scope="module")
def q_state(g):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SubcriticalWarning)
        return init_from_profile(0.0, grid=g)


@pytest.fixture(scope="module")
def frame20():
    return ModulationFrame(20.0)


def quiet_init(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SubcriticalWarning)
        return init_from_profile(*args, **kw)


# -- initial data -----------------------------------------------------------------


@pytest.mark.parametrize("b0", [1e-2, 1e-3])
def test_init_mass_excess(g, b0):
    s = init_from_profile(b0, grid=g)
    assert s.total_plane_mass > EIGHT_PI
    # the domain holds the mass of Q up to r_max only
    excess = s.total_plane_mass - 2.0 * math.pi * gs.m0(g.r_max)
    # oracle: Simpson quadrature of the localized correction on the profile's own grid
    prof = assemble_profile(b0, localized=True)
    r = prof.grid.nodes
    oracle = 2.0 * math.pi * simpson(prof.correction(True) * r, x=r)
    assert excess == pytest.approx(oracle, rel=1e-8)


def test_init_ground_state(g, q_state):
    assert np.array_equal(q_state.m.values, gs.m0(g.nodes))
    assert q_state.central_density == pytest.approx(8.0, rel=1e-9)
    assert q_state.pinned_lambda == pytest.approx(1.0, rel=1e-9)
    assert q_state.frame == "original"


def test_init_warns_at_or_below_critical(g):
    with pytest.warns(SubcriticalWarning):
        init_from_profile(0.0, grid=g)
    with pytest.warns(SubcriticalWarning):
        init_from_profile(0.0, grid=g, mass_excess=-0.1)


def test_init_accepts_small_perturbation(g):
    y = g.nodes
    p = RadialField(g, 1e-4 * np.exp(-((y - 2.0) ** 2)), "density")
    s = init_from_profile(1e-2, perturbation=p, grid=g)
    base = init_from_profile(1e-2, grid=g)
    added = 2.0 * math.pi * simpson(p.values * y, x=y)
    assert s.total_plane_mass - base.total_plane_mass == pytest.approx(added, rel=1e-6)


def test_init_rejects_negative_density(g):
    y = g.nodes
    p = RadialField(g, -20.0 * np.exp(-((y - 2.0) ** 2)), "density")
    with pytest.raises(InvalidDataError):
        init_from_profile(1e-2, perturbation=p, grid=g)


@pytest.mark.parametrize("kw", [{"b0": -1e-3}, {"b0": 0.02}, {"b0": 1e-3, "mass_excess": -1.0}])
def test_init_guards(g, kw):
    b0 = kw.pop("b0")
    with pytest.raises(ConfigurationError):
        init_from_profile(b0, grid=g, **kw)


def test_init_needs_log_uniform_grid():
    from pks_blowup.radial_numerics import RadialGrid

    nodes = np.linspace(1e-3, 10.0, 200)
    with pytest.raises(ConfigurationError):
        quiet_init(0.0, grid=RadialGrid(nodes, "log-uniform", origin_stride=0))


# -- stepping ---------------------------------------------------------------------


@pytest.mark.parametrize("dt", [1e-3, 0.1, 10.0])
def test_ground_state_is_steady(q_state, dt):
    m = q_state.m.values
    new = time_step(q_state, dt)
    assert np.max(np.abs(new.m.values - m)) < 1e-8 * np.max(m)


def test_steady_state_drift(g):
    assert steady_state_drift(1000, 1e-2, g) < 1e-6


def test_mass_conserved_per_step(g):
    s = init_from_profile(1e-2, grid=g)
    mq = mass_quadrature(s)
    for _ in range(20):
        new = time_step(s, 5e-3)
        assert abs(new.m.values[-1] / s.m.values[-1] - 1.0) < 1e-10
        assert abs(mass_quadrature(new) / mq - 1.0) < 1e-10
        assert new.total_plane_mass == s.total_plane_mass
        s = new
    assert s.steps == 20 and s.t == pytest.approx(0.1, rel=1e-14)


def test_time_step_guard(q_state):
    for dt in (0.0, -1.0, math.nan):
        with pytest.raises(ConfigurationError):
            time_step(q_state, dt)


@pytest.mark.parametrize("me", [-0.999, -0.5])
def test_small_mass_virial(g, me):
    # d/dt int |x|^2 u = 4M (1 - M/8pi) while the mass stays inside the domain
    s = quiet_init(0.0, grid=g, mass_excess=me)
    m2 = second_moment(s)
    st_ = s
    for _ in range(20):
        st_ = time_step(st_, 5e-3)
    rate = (second_moment(st_) - m2) / st_.t
    assert rate == pytest.approx(virial_rhs(s.total_plane_mass), rel=1e-2)


def test_positivity_along_supercritical_steps(g):
    s = init_from_profile(1e-2, grid=g)
    for _ in range(100):
        s = time_step(s, 5e-3)
        v = s.density()
        assert np.min(v) >= -1e-12 * np.max(np.abs(v))


# -- rescaling --------------------------------------------------------------------


def test_pinned_state_is_left_alone(q_state):
    assert renormalize(q_state, "shift") is q_state


def test_concentrated_state_halves_lambda(g, q_state):
    c = replace(q_state, m=RadialField(g, gs.m0(g.nodes / 0.5), "partial_mass"))
    assert c.central_density == pytest.approx(32.0, rel=1e-8)
    r = renormalize(c, "interpolate")
    assert r.lam == pytest.approx(0.5, rel=1e-8)
    # physical u(0) is unchanged; the frame density is pinned back to 8
    assert r.central_density / r.lam**2 == pytest.approx(32.0, rel=1e-8)
    assert r.central_density == pytest.approx(8.0, rel=1e-8)
    assert r.frame == "renormalized"
    assert r.outer_radius == pytest.approx(c.outer_radius, rel=1e-14)
    s = renormalize(c, "shift")
    # shift mode lands within one log step of the exact factor
    assert abs(math.log(s.lam / 0.5)) <= 0.5 * H768 * (1 + 1e-9)
    assert s.pinned_lambda == pytest.approx(0.5, rel=1e-8)


@pytest.mark.parametrize("mode", ["shift", "interpolate"])
def test_rescale_associative(q_state, mode):
    a, _ = rescale(q_state, 0.8, mode)
    ab, _ = rescale(a, 0.7, mode)
    direct, _ = rescale(q_state, 0.56, mode)
    assert ab.grid.n == direct.grid.n
    assert ab.lam == pytest.approx(direct.lam, rel=1e-10)
    assert np.max(np.abs(ab.m.values - direct.m.values)) < 1e-10 * np.max(direct.m.values)


def test_rescale_guards(q_state):
    with pytest.raises(ConfigurationError):
        rescale(q_state, 0.0)
    with pytest.raises(ConfigurationError):
        rescale(q_state, 2.0, "shift")
    with pytest.raises(ConfigurationError):
        rescale(q_state, 0.5, "warp")


def test_frame_consistency(g):
    s = init_from_profile(1e-2, grid=g)
    for _ in range(50):
        s = time_step(s, 2e-3)
    F = free_energy(s)[0]
    for mode in ("shift", "interpolate"):
        r, info = rescale(s, 0.8, mode)
        assert info.error_estimate < 1e-6
        assert free_energy(r)[0] == pytest.approx(F, rel=1e-8)
        assert second_moment(r) == pytest.approx(second_moment(s), rel=1e-8)
        assert mass_quadrature(r) == pytest.approx(mass_quadrature(s), rel=1e-8)
        assert r.pinned_lambda == pytest.approx(s.pinned_lambda, rel=1e-8)


# -- decomposition ----------------------------------------------------------------


@pytest.mark.parametrize("b0", [1e-2, 1e-3])
def test_decompose_fixed_point(g, frame20, b0):
    d = decompose(init_from_profile(b0, grid=g), frame=frame20)
    assert abs(d.lam - 1.0) < 1e-8
    assert abs(d.b - b0) < 1e-8


def test_decompose_ground_state(q_state, frame20):
    d = decompose(q_state, frame=frame20)
    assert abs(d.lam - 1.0) < 1e-8
    assert abs(d.b) < 1e-8


def test_decompose_rescaled_profile(frame20):
    # the profile seen at scale 0.7: sample it on nodes divided by 0.7, relabel onto the base grid
    base = solver_grid(1e-3, H768, 768)
    stretched = init_from_profile(1e-2, grid=solver_grid(1e-3 / 0.7, H768, 768))
    s = replace(init_from_profile(1e-2, grid=base), m=RadialField(base, stretched.m.values, "partial_mass"))
    d = decompose(s, frame=frame20)
    assert d.lam == pytest.approx(0.7, rel=1e-8)
    assert abs(d.b - 1e-2) < 1e-8


def test_decompose_linear_in_perturbation(g, frame20):
    y = g.nodes
    shape = 8.0 * np.exp(-((y - 2.0) ** 2))
    size = 2.0 * math.pi * simpson(shape * y, x=y)
    slopes = []
    for delta in (1e-4, 1e-5):
        s = init_from_profile(1e-2, perturbation=RadialField(g, delta * shape, "density"), grid=g)
        d = decompose(s, frame=frame20)
        assert abs(d.lam - 1.0) <= delta * size
        assert abs(d.b - 1e-2) <= delta * size
        slopes.append(((d.lam - 1.0) / delta, (d.b - 1e-2) / delta))
    (l1, b1), (l2, b2) = slopes
    assert l1 == pytest.approx(l2, rel=0.05)
    assert b1 == pytest.approx(b2, rel=0.05)


def test_modulation_frame_guard():
    with pytest.raises(ConfigurationError):
        ModulationFrame(10.0)


def test_decompose_reports_failure(g, frame20):
    s = init_from_profile(1e-2, grid=g)
    with pytest.raises(DecompositionError):
        decompose(s, frame=frame20, max_iter=1)
    # a wide blob far from every rescaled profile
    far = replace(s, m=RadialField(g, 30.0 * (1.0 - np.exp(-g.nodes**2 / 50.0)), "partial_mass"))
    with pytest.raises(DecompositionError):
        decompose(far, frame=frame20)


# -- runs -------------------------------------------------------------------------


def test_subcritical_run_decays():
    cfg = SolverConfig(b0=0.0, mass_excess=-0.1, n=768, max_steps=600, record_every=20, decompose=False)
    with pytest.warns(SubcriticalWarning):
        res = run(cfg)
    v0 = np.array([r.central_density for r in res.records])
    late = v0[len(v0) // 2 :]
    assert np.all(np.diff(late) <= 0.0)
    assert v0[-1] < v0[0]
    rep = conservation_report(res.records)
    assert rep.mass_drift_quadrature < 1e-10
    assert rep.energy_max_increase <= 0.0
    assert rep.positivity_min >= -1e-12


def test_checkpoint_resume_bit_identical(tmp_path):
    cfg = dict(b0=1e-2, n=512, max_steps=300, record_every=50, decompose=False, renorm_trigger=0.999, dt0=2e-2)
    path = tmp_path / "state.txt"
    first = run(SolverConfig(**cfg, checkpoint=str(path)))
    second = run(SolverConfig(**cfg), state=load_checkpoint(path))
    full = run(SolverConfig(**{**cfg, "max_steps": 600}))
    assert first.renormalizations + second.renormalizations >= 1
    assert np.array_equal(second.state.m.values, full.state.m.values)
    assert np.array_equal(second.state.y, full.state.y)
    assert (second.state.t, second.state.s, second.state.lam) == (full.state.t, full.state.s, full.state.lam)


def test_checkpoint_round_trip(tmp_path, g):
    s = init_from_profile(1e-3, grid=g)
    s = time_step(s, 1e-3)
    back = load_checkpoint(save_checkpoint(s, tmp_path / "c.txt"))
    assert np.array_equal(back.m.values, s.m.values)
    assert np.array_equal(back.y, s.y)
    assert (back.t, back.s, back.lam, back.steps, back.frame) == (s.t, s.s, s.lam, s.steps, s.frame)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello\n")
    with pytest.raises(ConfigurationError):
        load_checkpoint(p)
    p.write_text("# pks-checkpoint 1\nt = 0\n# y m\n1 2\n")
    with pytest.raises(ConfigurationError):
        load_checkpoint(p)


@pytest.mark.parametrize(
    "kw",
    [
        {"b0": 0.5},
        {"rmin": 0.0},
        {"rmin": 10.0, "rmax": 1.0},
        {"n": 10},
        {"dt0": 0.0},
        {"lambda_stop": 1.5},
        {"record_every": 0},
        {"renorm_trigger": 1.0},
        {"renorm_mode": "warp"},
        {"M": 5.0},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        SolverConfig(**kw).validate()


def test_conservation_report_needs_records():
    with pytest.raises(ConfigurationError):
        conservation_report([])


@settings(max_examples=30, deadline=None)
@given(
    st.floats(min_value=-3.0, max_value=3.0),
    st.floats(min_value=-3.0, max_value=3.0),
    st.floats(min_value=-3.0, max_value=3.0),
)
def test_smoothed_derivative_exact_on_quadratics(a, b, c):
    x = np.sort(np.random.default_rng(0).uniform(0.0, 5.0, 40))
    y = a + b * x + c * x * x
    d = smoothed_derivative(x, y)
    assert np.allclose(d, b + 2.0 * c * x, atol=1e-8 * (1 + abs(b) + abs(c)))
