import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pks_blowup import ground_state as gs
from pks_blowup.errors import ConfigurationError

radii = st.floats(min_value=1e-3, max_value=1e3)


def test_closed_form_values():
    assert gs.eval_closed_form("Q", 0.0) == 8.0
    assert gs.eval_closed_form("Q", 1.0) == 2.0
    assert gs.eval_closed_form("phiQ", 1.0) == pytest.approx(2.0 * math.log(2.0), rel=1e-15)
    assert gs.eval_closed_form("LambdaQ", 1.0) == 0.0
    assert gs.eval_closed_form("LambdaQ", 0.0) == 16.0
    assert gs.eval_closed_form("m0", 1.0) == 2.0
    assert gs.eval_closed_form("psi1", 0.0) == -1.0
    assert gs.eval_closed_form("phiQ", 0.0) == 0.0


def test_unknown_closed_form():
    with pytest.raises(ConfigurationError):
        gs.eval_closed_form("Q2", 1.0)


def _mp_Q(r):
    return 8 / (1 + r * r) ** 2


@pytest.mark.parametrize("r", [0.01, 0.3, 1.0, 2.5, 40.0])
def test_derivatives_against_mpmath(r):
    mp.mp.dps = 30
    x = mp.mpf(r)
    assert gs.dQ(r) == pytest.approx(float(mp.diff(_mp_Q, x)), rel=1e-13)
    assert gs.d2Q(r) == pytest.approx(float(mp.diff(_mp_Q, x, 2)), rel=1e-12)
    lam = 2 * _mp_Q(x) + x * mp.diff(_mp_Q, x)
    assert gs.LambdaQ(r) == pytest.approx(float(lam), rel=1e-12, abs=1e-14)
    m0 = mp.quad(lambda t: _mp_Q(t) * t, [0, x])
    assert gs.m0(r) == pytest.approx(float(m0), rel=1e-13)
    phi = mp.quad(lambda t: mp.quad(lambda s: _mp_Q(s) * s, [0, t]) / t, [0, x])
    assert gs.phiQ(r) == pytest.approx(float(phi), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(radii)
def test_soliton_equation(r):
    assert abs(math.log(gs.Q(r)) + gs.phiQ(r) - math.log(8.0)) < 1e-13 * max(1.0, gs.phiQ(r))
    assert abs(gs.grad_log_Q(r) + gs.dphiQ(r)) < 1e-13 * max(1.0, abs(gs.dphiQ(r)))


@settings(max_examples=50, deadline=None)
@given(radii)
def test_poisson_equation(r):
    lap = gs.d2phiQ(r) + gs.dphiQ(r) / r
    assert lap == pytest.approx(float(gs.Q(r)), rel=1e-11, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(radii)
def test_wronskian(r):
    assert gs.wronskian(r) == pytest.approx(r * float(gs.Q(r)) / 4.0, rel=1e-10, abs=1e-300)


@settings(max_examples=50, deadline=None)
@given(radii)
def test_homogeneous_solutions(r):
    for f, df, d2f in ((gs.psi0, gs.dpsi0, gs.d2psi0), (gs.psi1, gs.dpsi1, gs.d2psi1)):
        res = gs.L0_closed(f(r), df(r), d2f(r), r)
        scale = abs(d2f(r)) + abs(gs.L0_coefficient(r) * df(r)) + abs(gs.Q(r) * f(r))
        assert abs(res) <= 1e-10 * scale


def test_Q_positive_decreasing():
    r = np.geomspace(1e-6, 1e6, 5000)
    q = gs.Q(r)
    assert np.all(q > 0)
    assert np.all(np.diff(q) < 0)


def test_m0_limit():
    assert gs.m0(1e8) == pytest.approx(4.0, rel=1e-15)


def test_LambdaQ_single_sign_change():
    r = np.geomspace(1e-4, 1e4, 20000)
    s = np.sign(gs.LambdaQ(r))
    changes = np.nonzero(np.diff(s))[0]
    assert changes.size == 1
    assert r[changes[0]] <= 1.0 <= r[changes[0] + 1]


def test_psi1_numerator_vanishes_at_one():
    assert gs.psi1(1.0) == 0.0


def test_cutoff_examples():
    assert gs.cutoff_chi_scaled(10.0, 5.0) == 1.0
    assert gs.cutoff_chi_scaled(10.0, 25.0) == 0.0
    mid = gs.cutoff_chi_scaled(10.0, 15.0)
    assert 0.0 < mid < 1.0
    assert mid == gs.chi(1.5)


@pytest.mark.parametrize("B", [0.0, -1.0])
def test_cutoff_rejects_radius(B):
    with pytest.raises(ConfigurationError):
        gs.cutoff_chi_scaled(B, 1.0)


def test_cutoff_smooth_and_monotone():
    x = np.linspace(0.0, 3.0, 30001)
    c = gs.chi(x)
    assert np.all((c >= 0) & (c <= 1))
    assert np.all(np.diff(c) <= 0)
    h = x[1] - x[0]
    fd = np.gradient(c, h)
    assert np.max(np.abs(fd - gs.dchi(x))) < 1e-6
    # second derivative is continuous: its finite-difference jump is bounded by O(h)
    d2 = np.gradient(gs.dchi(x), h)
    assert np.max(np.abs(np.diff(d2))) < 5e-2


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=1.0, max_value=2.0))
def test_cutoff_symmetry(x):
    # the exp blend is symmetric about 3/2
    assert gs.chi(x) + gs.chi(3.0 - x) == pytest.approx(1.0, abs=1e-14)
