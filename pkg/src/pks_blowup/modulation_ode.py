"""Reduced modulation system for the scale ``lambda`` and the parameter ``b``.

In renormalized time ``s`` (``ds/dt = 1/lambda^2``)::

    b_s = -2 b^2 / |log b|,   lambda_s / lambda = -b,   t_s = lambda^2.

The state integrated is ``(b, log lambda, t)``. Close to blow-up ``T - t``
falls far below the resolution of ``t`` itself, so the remaining time is
accumulated separately, backwards from the end of the run and in log form.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, least_squares

from .errors import ConfigurationError, NumericError, RangeError

RTOL = 1e-10
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


@dataclass(frozen=True)
class ModulationState:
    t: float
    s: float
    lam: float
    b: float
    log_lam: float = float("nan")
    log_remaining: float | None = None

    def __post_init__(self):
        if math.isnan(self.log_lam):
            object.__setattr__(self, "log_lam", math.log(self.lam) if self.lam > 0 else -math.inf)


@dataclass
class Trajectory:
    """Time-ordered states; ``terminal_T`` is the blow-up time when known."""

    states: list[ModulationState]
    terminal_T: float | None = None
    solution: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ts = [st.t for st in self.states]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError("trajectory states must be time-ordered")
        if self.terminal_T is not None and self.states and not self.terminal_T > ts[-1]:
            raise ConfigurationError("terminal time must exceed the last recorded time")

    def __len__(self) -> int:
        return len(self.states)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(st, name) for st in self.states], dtype=float)

    @property
    def s(self) -> np.ndarray:
        return self.column("s")

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    @property
    def lam(self) -> np.ndarray:
        return self.column("lam")

    @property
    def log_lam(self) -> np.ndarray:
        return self.column("log_lam")

    @property
    def b(self) -> np.ndarray:
        return self.column("b")

    @property
    def log_remaining(self) -> np.ndarray | None:
        if any(st.log_remaining is None for st in self.states):
            return None
        return self.column("log_remaining")

    def _dense(self):
        if self.solution is None:
            raise ConfigurationError("trajectory carries no dense output")
        return self.solution

    def t_of_s(self, s):
        return self._dense()(np.asarray(s, dtype=float))[2]

    def s_of_t(self, t: float) -> float:
        """Invert ``t(s)`` on the recorded range."""
        sol = self._dense()
        ts, ss = self.t, self.s
        if not ts[0] <= t <= ts[-1]:
            raise RangeError(f"t = {t} lies outside the recorded range")
        # bracket between recorded samples so the tolerance is local in s
        k = int(np.clip(np.searchsorted(ts, t), 1, len(ts) - 1))
        lo, hi = ss[k - 1], ss[k]
        f = lambda x: float(sol(x)[2]) - t
        if f(lo) >= 0:
            return float(lo)
        if f(hi) <= 0:
            return float(hi)
        return brentq(f, lo, hi, xtol=1e-15 * lo, rtol=4e-16, maxiter=400)


def _rhs(s, y):
    b, loglam, _ = y
    lb = abs(math.log(b)) if b > 0 else math.inf
    return [-2.0 * b * b / lb, -b, math.exp(2.0 * loglam)]


def _check_b0(b0: float) -> None:
    if not np.isfinite(b0) or b0 <= 0.0:
        raise ConfigurationError(f"b0 must be positive, got {b0}")
    if b0 >= math.exp(-1.0):
        raise ConfigurationError(f"b0 must lie below 1/e so that |log b| > 1, got {b0}")


def _log_segment(sol, a: float, c: float) -> float:
    """``log int_a^c lambda^2 ds`` by Gauss-Legendre on the dense output."""
    half = 0.5 * (c - a)
    if half <= 0.0:
        return -math.inf
    nodes = 0.5 * (a + c) + half * _GL_X
    ll = 2.0 * sol(nodes)[1]
    top = float(np.max(ll))
    return top + math.log(half * float(np.dot(_GL_W, np.exp(ll - top))))


def integrate_reduced(
    b0: float,
    lambda0: float,
    s_max: float,
    s0: float = 1.0,
    t0: float = 0.0,
    per_decade: int = 40,
) -> Trajectory:
    """Integrate from ``s0`` to ``s_max`` with DOP853 and relative tolerance ``1e-10``.

    Output points are log-spaced in ``s``. Each state also carries
    ``log(T - t)`` obtained by integrating ``lambda^2`` one decade past
    ``s_max`` and closing with ``lambda^2/(2b) (1 + 1/|log b|)``.
    """
    _check_b0(b0)
    if not (np.isfinite(lambda0) and lambda0 > 0.0):
        raise ConfigurationError(f"lambda0 must be positive, got {lambda0}")
    if not (np.isfinite(s_max) and s_max > s0 > 0.0):
        raise RangeError(f"need 0 < s0 < s_max, got s0={s0}, s_max={s_max}")
    s_end = 10.0 * s_max
    y0 = [b0, math.log(lambda0), t0]
    sol = solve_ivp(
        _rhs,
        (s0, s_end),
        y0,
        method="DOP853",
        rtol=RTOL,
        atol=[1e-30, 1e-12, 1e-14],
        dense_output=True,
    )
    if not sol.success:
        raise NumericError(f"reduced system integration failed: {sol.message}")
    dense = sol.sol

    decades = math.log10(s_max / s0)
    count = max(int(math.ceil(decades * per_decade)), 2) + 1
    s_out = np.geomspace(s0, s_max, count)
    s_out[-1] = s_max
    y_out = dense(s_out)

    # Remaining time: segments are solver steps merged with output points.
    knots = np.union1d(sol.t, s_out)
    b_end, ll_end, _ = sol.y[:, -1]
    log_tail = 2.0 * ll_end - math.log(2.0 * b_end) + math.log1p(1.0 / abs(math.log(b_end)))
    log_rem = np.empty(knots.size)
    log_rem[-1] = log_tail
    for k in range(knots.size - 2, -1, -1):
        log_rem[k] = np.logaddexp(log_rem[k + 1], _log_segment(dense, knots[k], knots[k + 1]))
    rem_out = log_rem[np.searchsorted(knots, s_out)]
    terminal = float(sol.y[2, -1]) + math.exp(log_tail)

    states = [
        ModulationState(
            t=float(y_out[2, i]),
            s=float(s_out[i]),
            lam=math.exp(y_out[1, i]),
            b=float(y_out[0, i]),
            log_lam=float(y_out[1, i]),
            log_remaining=float(rem_out[i]),
        )
        for i in range(count)
    ]
    return Trajectory(states, terminal_T=max(terminal, np.nextafter(states[-1].t, math.inf)), solution=dense)


def _integrate_args(args):
    return integrate_reduced(*args)


def integrate_batch(b0s, lambda0: float, s_max: float, workers: int = 1) -> list[Trajectory]:
    """Independent trajectories for several initial ``b0``; parallel when ``workers > 1``."""
    jobs = [(float(b), lambda0, s_max) for b in b0s]
    if workers <= 1 or len(jobs) < 2:
        return [integrate_reduced(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        trajs = list(pool.map(_integrate_args, jobs))
    for traj in trajs:
        traj.solution = None
    return trajs


def b_asymptote(s: float) -> float:
    """Leading-order law ``(log s - log log s) / (2 s)``."""
    if not np.isfinite(s) or s <= math.e:
        raise RangeError(f"b_asymptote needs s > e, got {s}")
    ls = math.log(s)
    return (ls - math.log(ls)) / (2.0 * s)


def log_lambda_asymptote(s: float) -> float:
    """``-(log s)^2/4 (1 - 2 log log s / log s)``."""
    if not np.isfinite(s) or s <= math.e:
        raise RangeError(f"log_lambda_asymptote needs s > e, got {s}")
    ls = math.log(s)
    return -0.25 * ls * ls * (1.0 - 2.0 * math.log(ls) / ls)


def rate_exponent_mean(b1: float, b2: float, s1: float, s2: float) -> float:
    """Mean of ``b_s |log b| / b^2`` over ``[s1, s2]`` for ``0 < b < 1``.

    Exact from the primitive ``F(b) = -(log b + 1)/b`` of ``|log b|/b^2``.
    """
    if s2 == s1:
        raise RangeError("averaging window has zero length")
    F = lambda x: -(math.log(x) + 1.0) / x
    return -(F(b2) - F(b1)) / (s2 - s1)


@dataclass(frozen=True)
class RateReport:
    T: float
    T_source: str
    t: np.ndarray
    log_remaining: np.ndarray
    R: np.ndarray
    window: np.ndarray
    R_min: float
    R_max: float
    R_limit: float
    lambda_drop: float
    inconclusive: bool


def _law_residual(params, t, log_lam):
    T, c = params
    rem = np.maximum(T - t, 1e-300)
    lr = np.log(rem)
    return log_lam - (0.5 * lr - np.sqrt(np.abs(lr) / 2.0) + c)


def extrapolate_T(t: np.ndarray, lam: np.ndarray, log_lam: np.ndarray | None = None) -> float:
    """Blow-up time from the final 20% of the samples.

    A linear fit of ``lambda^(4/3)`` against ``t`` gives a first guess, which
    is refined by fitting ``log lambda = log(T-t)/2 - sqrt(|log(T-t)|/2) + c``
    in ``(T, c)``.
    """
    t = np.asarray(t, dtype=float)
    lam = np.asarray(lam, dtype=float)
    log_lam = np.log(lam) if log_lam is None else np.asarray(log_lam, dtype=float)
    n = t.size
    tail = slice(max(n - max(int(math.ceil(0.2 * n)), 3), 0), n)
    tt, ll = t[tail], log_lam[tail]
    if tt.size < 3 or np.ptp(tt) <= 0.0:
        raise NumericError("too few distinct times to extrapolate the blow-up time")
    slope, icpt = np.polyfit(tt, np.exp(4.0 / 3.0 * ll), 1)
    span = tt[-1] - tt[0]
    T0 = -icpt / slope if slope < 0 else tt[-1] + span
    T0 = max(T0, tt[-1] + 1e-6 * span)
    eps = np.finfo(float).eps * max(abs(tt[-1]), 1.0) * 4.0
    fit = least_squares(
        _law_residual,
        x0=[T0, 0.0],
        args=(tt, ll),
        bounds=([tt[-1] + eps, -np.inf], [np.inf, np.inf]),
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        x_scale=[max(span, eps), 1.0],
        max_nfev=2000,
    )
    return float(fit.x[0])


def rate_law_check(traj: Trajectory, decades: float = 1.0) -> RateReport:
    """Ratio ``R = log(lambda/sqrt(T-t)) / sqrt(|log(T-t)|/2)`` along the trajectory.

    The remaining time is the one carried by the trajectory when present and
    otherwise comes from :func:`extrapolate_T`. The window is the final
    ``decades`` of ``s`` when the trajectory records ``s``, else the final
    decade of ``lambda``. Runs where ``lambda`` drops by less than ``1e3``
    are flagged inconclusive.
    """
    if len(traj) < 4:
        raise NumericError("trajectory too short for a rate-law check")
    t = traj.t
    log_lam = traj.log_lam
    drop = float(log_lam[0] - log_lam[-1])
    inconclusive = drop < math.log(1e3)
    log_rem = traj.log_remaining
    if log_rem is not None:
        T = traj.terminal_T if traj.terminal_T is not None else float("nan")
        source = "integrated"
    else:
        T = extrapolate_T(t, np.exp(log_lam), log_lam)
        source = "extrapolated"
        with np.errstate(divide="ignore"):
            log_rem = np.log(np.maximum(T - t, 0.0))
    ok = np.isfinite(log_rem) & (np.abs(log_rem) > 0.0)
    R = np.full(t.size, np.nan)
    R[ok] = (log_lam[ok] - 0.5 * log_rem[ok]) / np.sqrt(np.abs(log_rem[ok]) / 2.0)
    s = traj.s
    if np.all(np.isfinite(s)) and s[-1] > s[0] * 10.0**decades:
        window = s >= s[-1] / 10.0**decades
    else:
        window = log_lam <= log_lam[-1] + decades * math.log(10.0)
    window &= np.isfinite(R)
    if not np.any(window):
        return RateReport(T, source, t, log_rem, R, window, math.nan, math.nan, math.nan, math.exp(drop), True)
    x = 1.0 / np.sqrt(np.abs(log_rem[window]))
    if np.ptp(x) > 0.0 and window.sum() >= 3:
        limit = float(np.polyfit(x, R[window], 1)[1])
    else:
        limit = float(np.mean(R[window]))
    return RateReport(
        T=T,
        T_source=source,
        t=t,
        log_remaining=log_rem,
        R=R,
        window=window,
        R_min=float(np.min(R[window])),
        R_max=float(np.max(R[window])),
        R_limit=limit,
        lambda_drop=math.exp(drop),
        inconclusive=inconclusive,
    )


def synthetic_law_trajectory(T: float, remaining: np.ndarray, c: float = 0.0, known_T: bool = True) -> Trajectory:
    """States following ``lambda = sqrt(T-t) exp(-sqrt(|log(T-t)|/2) + c)`` exactly.

    With ``known_T`` the states carry ``log(T-t)`` and the trajectory its
    terminal time; otherwise checks must extrapolate ``T`` from ``(t, lambda)``.
    """
    rem = np.sort(np.asarray(remaining, dtype=float))[::-1]
    if np.any(rem <= 0.0):
        raise RangeError("remaining times must be positive")
    t = T - rem
    lr = np.log(rem)
    ll = 0.5 * lr - np.sqrt(np.abs(lr) / 2.0) + c
    states = [
        ModulationState(
            t=float(ti),
            s=math.nan,
            lam=math.exp(li),
            b=math.nan,
            log_lam=float(li),
            log_remaining=float(ri) if known_T else None,
        )
        for ti, li, ri in zip(t, ll, lr)
    ]
    return Trajectory(states, terminal_T=T if known_T else None)
