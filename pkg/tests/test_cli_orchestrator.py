import json
import math
from pathlib import Path

import numpy as np
import pytest

from pks_blowup import cli_orchestrator as cli
from pks_blowup.errors import ConfigurationError
from pks_blowup.pks_solver import init_from_profile, save_checkpoint, solver_grid
from pks_blowup.radial_numerics import RadialField

FAST = {
    "spectral": [
        "ground.n=512",
        "kernel.n=256",
        "directions.M=32",
        "coercivity.n=256",
        "coercivity_L.samples=5",
        "coercivity_L.M=20",
    ],
    "simulate": ["b0=1e-2", "grid.n=256", "max_steps=60", "record_every=10", "steady_steps=10"],
    "profile": ["b=1e-3", "grid.n=1024", "scaling=false"],
    "ode": ["s_max=1e4", "batch=0.01, 0.02"],
}


def run_cli(sub, out, extra=(), seed=None):
    argv = [sub, "--out", str(out)]
    for item in list(FAST.get(sub, [])) + list(extra):
        argv += ["--set", item]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return cli.main(argv)


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for sub in ("profile", "ode", "simulate", "spectral"):
        assert run_cli(sub, out) == 0
    return out


# -- configuration ----------------------------------------------------------------


def test_minimal_simulate_config_fills_defaults(tmp_path):
    path = tmp_path / "sim.cfg"
    path.write_text("# minimal\nb0 = 1e-3\n")
    cfg = cli.parse_config("simulate", path)
    p = cfg.parameters
    assert p["b0"] == 1e-3
    assert p["grid.n"] == 1536 and p["grid.rmin"] == 1e-3 and p["grid.rmax"] == 1e3
    assert p["dt0"] == 5e-3
    assert set(p) == set(cli.PARAMETERS["simulate"])
    assert "dt0 = 0.005" in cfg.echo()


def test_sections_map_to_dotted_keys(tmp_path):
    path = tmp_path / "sim.cfg"
    path.write_text("b0 = 1e-3\n[grid]\nn = 512\nrmax = 1e2\n")
    p = cli.parse_config("simulate", path).parameters
    assert p["grid.n"] == 512 and p["grid.rmax"] == 100.0


def test_overrides_beat_file(tmp_path):
    path = tmp_path / "sim.cfg"
    path.write_text("b0 = 1e-3\ndt0 = 1e-2\n")
    p = cli.parse_config("simulate", path, ["dt0=2e-3"]).parameters
    assert p["dt0"] == 2e-3


def test_misspelled_key_suggests(tmp_path):
    with pytest.raises(ConfigurationError) as exc:
        cli.parse_config("simulate", None, ["bO=1e-3"])
    msg = str(exc.value)
    assert "'bO'" in msg and "'b0'" in msg


def test_type_mismatch_names_key():
    with pytest.raises(ConfigurationError, match="grid.n"):
        cli.parse_config("simulate", None, ["b0=1e-3", "grid.n=many"])


def test_missing_required_key():
    with pytest.raises(ConfigurationError, match="'b'"):
        cli.parse_config("profile", None, [])


@pytest.mark.parametrize("b", ["0.5", "0", "-1e-3", "nan"])
def test_profile_rejects_large_b(b):
    with pytest.raises(ConfigurationError):
        cli.parse_config("profile", None, [f"b={b}"])


@pytest.mark.parametrize(
    "sub, items",
    [
        ("simulate", ["b0=0.5"]),
        ("simulate", ["b0=1e-3", "renorm_mode=warp"]),
        ("simulate", ["b0=1e-3", "grid.n=8"]),
        ("ode", ["b0=-1"]),
        ("ode", ["s_max=0.5"]),
        ("profile", ["b=1e-3", "scaling.bs=1e-3, 0.3"]),
        ("spectral", ["nonsense"]),
        ("warp", []),
    ],
)
def test_invalid_configs(sub, items):
    with pytest.raises(ConfigurationError):
        cli.parse_config(sub, None, items)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.parse_config("ode", tmp_path / "absent.cfg")


@pytest.mark.parametrize("text, value", [("true", True), ("off", False), ("1", True), ("no", False)])
def test_flag_parsing(text, value):
    assert cli.parse_config("profile", None, ["b=1e-3", f"scaling={text}"]).parameters["scaling"] is value


# -- result files -----------------------------------------------------------------


def test_csv_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(7)
    vals = rng.standard_normal((3, 4)) * 10.0 ** rng.integers(-300, 300, (3, 4))
    vals[0, 0] = math.pi
    vals[1, 1] = 1e-320
    records = [{"t": v[0], "s": v[1], "lambda": v[2], "b": v[3]} for v in vals]
    path = tmp_path / "traj.csv"
    man = cli.emit_results(records, "csv", path)
    header, data = cli.read_csv(path)
    assert header == ["t", "s", "lambda", "b"]
    assert data.shape == (3, 4)
    assert np.array_equal(data, vals)
    assert man.verify()
    assert path.read_text().count("\n") == 4


def test_json_emission(tmp_path):
    path = tmp_path / "x.json"
    cli.emit_results([{"a": np.float64(0.1), "b": np.int64(3), "c": np.array([1.0, 2.0])}], "json", path)
    back = json.loads(path.read_text())
    assert back == {"a": 0.1, "b": 3, "c": [1.0, 2.0]}


def test_emit_rejects_bad_input(tmp_path):
    with pytest.raises(ConfigurationError):
        cli.emit_results([], "csv", tmp_path / "a.csv")
    with pytest.raises(ConfigurationError):
        cli.emit_results([{"a": 1}], "xml", tmp_path / "a.xml")
    with pytest.raises(ConfigurationError):
        cli.emit_results([{"a": 1}, {"b": 2}], "csv", tmp_path / "a.csv")


def test_emit_surfaces_io_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ConfigurationError, match="file"):
        cli.emit_results([{"a": 1.0}], "csv", blocker / "sub" / "a.csv")


def test_manifests_match_files(outputs):
    for sub in ("profile", "ode", "simulate", "spectral"):
        data = json.loads((outputs / f"manifest-{sub}.json").read_text())
        assert data["config"]["subcommand"] == sub
        assert data["version"]
        assert data["outputs"]
        for entry in data["outputs"]:
            assert cli.file_digest(outputs / entry["path"]) == entry["sha256"]
        assert data["timings"]["total"] > 0.0


def test_schema_documents_every_field(outputs):
    schema = json.loads((outputs / "schema.json").read_text())
    assert schema == cli.SCHEMA
    for sub in ("profile", "ode", "simulate", "spectral"):
        keys = cli.flatten_keys(json.loads((outputs / f"{sub}.json").read_text()))
        undocumented = keys - set(schema[f"{sub}.json"])
        assert not undocumented, (sub, undocumented)
    for table in ("profile.csv", "ode.csv", "simulate.csv", "kernel.csv"):
        header, _ = cli.read_csv(outputs / table) if table != "kernel.csv" else (_csv_header(outputs / table), None)
        assert set(header) <= set(schema[table]), table


def _csv_header(path: Path) -> list[str]:
    return path.read_text().splitlines()[0].split(",")


def test_simulate_columns(outputs):
    header, data = cli.read_csv(outputs / "simulate.csv")
    assert header == ["t", "s", "lambda", "b_pinned", "b_orth", "mass", "free_energy", "second_moment", "virial_residual"]
    assert data.shape[0] == 7
    assert (outputs / "checkpoint.txt").exists()


@pytest.mark.parametrize("sub", ["profile", "ode", "simulate", "spectral"])
def test_rerun_gives_identical_digests(tmp_path, sub):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(sub, a, seed=3) == 0
    assert run_cli(sub, b, seed=3) == 0
    ma = json.loads((a / f"manifest-{sub}.json").read_text())["outputs"]
    mb = json.loads((b / f"manifest-{sub}.json").read_text())["outputs"]
    assert ma == mb


def test_report_aggregates(outputs, capsys):
    assert cli.main(["report", "--out", str(outputs)]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("criterion")]
    assert len(lines) == 8
    rep = json.loads((outputs / "report.json").read_text())
    ids = [c["id"] for c in rep["criteria"]]
    assert ids == list(range(1, 9))
    assert all(c["status"] in ("PASS", "FAIL", "SKIP") for c in rep["criteria"])
    # the reduced runs cover the ground-state suite at full accuracy
    assert rep["criteria"][0]["status"] == "PASS"


def test_report_without_inputs(tmp_path):
    assert cli.main(["report", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_evaluate_marks_missing_inputs():
    results = cli.evaluate({}, {})
    assert [r.status for r in results] == ["SKIP"] * 8
    assert results[0].line().startswith("criterion 1 [SKIP]")


# -- exit codes -------------------------------------------------------------------


def test_exit_code_config(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--set", "bO=1e-3"]) == 2
    assert "b0" in capsys.readouterr().err


def test_exit_code_numeric(tmp_path, capsys):
    # a resumed state with a negative central density cannot be pinned
    g = solver_grid(1e-3, math.log(1e6) / 255, 256)
    s = init_from_profile(1e-2, grid=g)
    bad = s.__class__(**{**s.__dict__, "m": RadialField(g, s.m.values - 2.0 * s.m.values[0], "partial_mass")})
    ck = save_checkpoint(bad, tmp_path / "bad.txt")
    code = run_cli("simulate", tmp_path / "o", [f"resume={ck}", "checkpoint="])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


def test_resume_continues_run(tmp_path):
    first = tmp_path / "first"
    assert run_cli("simulate", first, ["max_steps=30"]) == 0
    second = tmp_path / "second"
    assert run_cli("simulate", second, [f"resume={first / 'checkpoint.txt'}", "max_steps=30"]) == 0
    full = tmp_path / "full"
    assert run_cli("simulate", full) == 0
    assert (second / "checkpoint.txt").read_text() == (full / "checkpoint.txt").read_text()


def test_workers_env(monkeypatch):
    monkeypatch.setenv("PKS_WORKERS", "3")
    assert cli.worker_count() == 3
    monkeypatch.setenv("PKS_WORKERS", "zero")
    with pytest.raises(ConfigurationError):
        cli.worker_count()
    monkeypatch.setenv("PKS_WORKERS", "0")
    with pytest.raises(ConfigurationError):
        cli.worker_count()
    monkeypatch.delenv("PKS_WORKERS")
    assert cli.worker_count() == 1


def test_batch_independent_of_workers(tmp_path, monkeypatch):
    monkeypatch.setenv("PKS_WORKERS", "2")
    assert run_cli("ode", tmp_path / "w2") == 0
    monkeypatch.setenv("PKS_WORKERS", "1")
    assert run_cli("ode", tmp_path / "w1") == 0
    assert (tmp_path / "w1" / "ode.json").read_bytes() == (tmp_path / "w2" / "ode.json").read_bytes()
