"""Acceptance criteria at their stated tolerances, one pass/fail line each.

Every subcommand runs once with its default parameters; the supercritical
simulation is shared by the conservation and phenomenology criteria.
"""

import pytest

from pks_blowup import cli_orchestrator as cli

REQUIRED = {"profile": ["b=1e-3"], "simulate": ["b0=1e-2"]}


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    summaries, timings = {}, {}
    for sub in ("profile", "ode", "spectral", "simulate"):
        p = cli.parse_config(sub, None, REQUIRED.get(sub, []), 0).parameters
        t: dict[str, float] = {}
        if sub == "profile":
            summaries[sub], _ = cli.profile_summary(p, t)
        elif sub == "ode":
            summaries[sub], _ = cli.ode_summary(p, t)
        elif sub == "spectral":
            summaries[sub], _ = cli.spectral_summary(p, t, seed=0)
        else:
            summaries[sub], _ = cli.simulate_summary(p, t, out)
        timings[sub] = t
    return {r.id: r for r in cli.evaluate(summaries, timings)}


@pytest.mark.slow
@pytest.mark.parametrize("cid", range(1, 9))
def test_criterion(results, cid, capsys):
    res = results[cid]
    with capsys.disabled():
        print("\n" + res.line())
    assert res.status == "PASS", res.line()
