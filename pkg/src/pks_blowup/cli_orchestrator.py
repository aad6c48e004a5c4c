"""Command line front end: configuration, subcommand dispatch and result files.

Usage::

    pks-blowup profile|ode|simulate|spectral|report [--config PATH]
               [--set key=value ...] [--out DIR] [--seed N]

Configuration files are ``key = value`` lines, optionally grouped in
``[section]`` blocks; a key ``n`` in section ``grid`` is addressed as
``grid.n`` (both in files and with ``--set``). Exit codes: 0 success,
2 configuration error, 3 numeric failure. ``PKS_WORKERS`` sets the worker
count for batched reduced-ODE runs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import difflib
import hashlib
import json
import math
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import ConfigurationError, NumericError, PKSError, SubcriticalWarning

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
B_STAR = 1e-2
REQUIRED = object()
SUBCOMMANDS = ("profile", "ode", "simulate", "spectral", "report")


# -- configuration -------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a flag: {text!r}")


def _parse_floats(text: str) -> tuple[float, ...]:
    parts = [p for p in text.replace(",", " ").split() if p]
    return tuple(float(p) for p in parts)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(",", " ").split() if p)


@dataclass(frozen=True)
class Param:
    kind: str
    default: Any
    help: str

    def parse(self, key: str, raw):
        if not isinstance(raw, str):
            return raw
        try:
            if self.kind == "float":
                return float(raw)
            if self.kind == "int":
                return int(raw)
            if self.kind == "bool":
                return _parse_bool(raw)
            if self.kind == "floats":
                return _parse_floats(raw)
            if self.kind == "ints":
                return _parse_ints(raw)
            return raw.strip()
        except ValueError:
            raise ConfigurationError(f"key {key!r} expects {self.kind}, got {raw!r}") from None


_GRID_SOLVER = {
    "grid.rmin": Param("float", 1e-3, "innermost node"),
    "grid.rmax": Param("float", 1e3, "outer radius of the domain"),
    "grid.n": Param("int", 1536, "number of log-uniform nodes"),
}

PARAMETERS: dict[str, dict[str, Param]] = {
    "profile": {
        "b": Param("float", REQUIRED, "profile parameter, 0 < b <= 1e-2"),
        "localized": Param("bool", True, "tabulate the localized profile"),
        "with_error": Param("bool", True, "also compute the profile error"),
        "grid.rmin": Param("float", 1e-4, "innermost node"),
        "grid.rmax": Param("float", 1e4, "outer radius before extension to 4 B1"),
        "grid.n": Param("int", 4096, "number of nodes"),
        "scaling": Param("bool", True, "fit the error scaling over scaling.bs"),
        "scaling.bs": Param("floats", (1e-3, 3e-4, 1e-4, 3e-5), "b values of the scaling fit"),
    },
    "ode": {
        "b0": Param("float", 1e-2, "initial b"),
        "lambda0": Param("float", 1.0, "initial scale"),
        "s_max": Param("float", 1e8, "final renormalized time"),
        "per_decade": Param("int", 40, "output samples per decade of s"),
        "batch": Param("floats", (), "extra initial b values integrated in parallel"),
    },
    "simulate": {
        "b0": Param("float", REQUIRED, "initial profile parameter, 0 <= b0 <= 1e-2"),
        "mass_excess": Param("float", 0.0, "relative mass added to the initial profile"),
        **_GRID_SOLVER,
        "dt0": Param("float", 5e-3, "largest step in units of the pinned scale squared"),
        "cfl": Param("float", 0.1, "bound on |v|_inf times the frame step"),
        "lambda_stop": Param("float", 0.1, "stop when the scale falls below this fraction of its start"),
        "t_max": Param("float", math.inf, "physical time budget"),
        "max_steps": Param("int", 500_000, "step budget"),
        "record_every": Param("int", 100, "steps between diagnostics records"),
        "M": Param("float", 20.0, "cutoff radius of the orthogonality directions"),
        "decompose": Param("bool", True, "compute the orthogonality-based b at each record"),
        "renorm_mode": Param("str", "shift", "shift or interpolate"),
        "checkpoint": Param("str", "checkpoint.txt", "checkpoint file (relative to --out)"),
        "resume": Param("str", "", "checkpoint to resume from"),
        "steady_steps": Param("int", 1000, "steps of the steady-state check (0 skips it)"),
    },
    "spectral": {
        "ground.n": Param("int", 4096, "nodes of the ground-state suite"),
        "kernel.n": Param("int", 2048, "finest grid of the kernel identities"),
        "directions.M": Param("floats", (32.0, 64.0, 128.0), "cutoffs of the directions"),
        "coercivity.n": Param("ints", (1024, 2048), "grid sizes of the energy coercivity problem"),
        "coercivity_L.M": Param("float", 64.0, "cutoff for the sampled flow coercivity"),
        "coercivity_L.samples": Param("int", 200, "number of sampled bumps"),
    },
    "report": {
        "inputs": Param("str", "", "directory holding the subcommand outputs (default --out)"),
    },
}


@dataclass
class RunConfig:
    subcommand: str
    parameters: dict[str, Any]
    seed: int = 0

    def snapshot(self) -> dict[str, Any]:
        return {"subcommand": self.subcommand, "seed": self.seed, "parameters": dict(self.parameters)}

    def echo(self) -> str:
        lines = [f"# {self.subcommand} (seed {self.seed})"]
        for key in sorted(self.parameters):
            lines.append(f"{key} = {_format_value(self.parameters[key])}")
        return "\n".join(lines)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _read_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key if section == "__root__" else f"{section}.{key}"] = value
    return out


def parse_config(
    subcommand: str,
    path=None,
    overrides: list[str] | dict[str, Any] | None = None,
    seed: int = 0,
) -> RunConfig:
    """Merge a config file and ``key=value`` overrides over the defaults and validate."""
    if subcommand not in PARAMETERS:
        raise ConfigurationError(f"unknown subcommand {subcommand!r}; choose from {', '.join(SUBCOMMANDS)}")
    schema = PARAMETERS[subcommand]
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(_read_file(path))
    if isinstance(overrides, dict):
        raw.update(overrides)
    elif overrides:
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"override {item!r} is not of the form key=value")
            raw[key.strip()] = value
    params: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in schema:
            hint = difflib.get_close_matches(key, list(schema), n=1, cutoff=0.5)
            extra = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigurationError(f"unknown key {key!r} for {subcommand}{extra}")
        params[key] = schema[key].parse(key, value)
    for key, spec in schema.items():
        if key not in params:
            if spec.default is REQUIRED:
                raise ConfigurationError(f"missing required key {key!r} for {subcommand}")
            params[key] = spec.default
    cfg = RunConfig(subcommand, params, int(seed))
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    p = cfg.parameters
    if cfg.subcommand == "profile":
        b = p["b"]
        if not (math.isfinite(b) and 0.0 < b <= B_STAR):
            raise ConfigurationError(f"key 'b' = {b} is outside (0, {B_STAR}] (profile only defined for small b)")
        for bb in p["scaling.bs"]:
            if not 0.0 < bb <= B_STAR:
                raise ConfigurationError(f"key 'scaling.bs' holds {bb} outside (0, {B_STAR}]")
    elif cfg.subcommand == "ode":
        if not p["b0"] > 0.0:
            raise ConfigurationError("key 'b0' must be positive")
        if not p["s_max"] > 1.0:
            raise ConfigurationError("key 's_max' must exceed 1")
    elif cfg.subcommand == "simulate":
        if not 0.0 <= p["b0"] <= B_STAR:
            raise ConfigurationError(f"key 'b0' = {p['b0']} is outside [0, {B_STAR}]")
        if p["renorm_mode"] not in ("shift", "interpolate"):
            raise ConfigurationError("key 'renorm_mode' must be 'shift' or 'interpolate'")
        _solver_config(p, None).validate()


# -- result files ---------------------------------------------------------------


@dataclass
class RunManifest:
    config: dict[str, Any]
    version: str
    outputs: list[dict[str, Any]] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)
    path: Path | None = None

    def add(self, path: Path) -> None:
        entry = {"path": path.name, "sha256": file_digest(path)}
        self.outputs = [o for o in self.outputs if o["path"] != path.name] + [entry]

    def to_dict(self) -> dict[str, Any]:
        return {"config": _jsonable(self.config), "version": self.version, "outputs": self.outputs, "timings": self.timings}

    def write(self) -> Path:
        if self.path is None:
            raise ConfigurationError("manifest has no path")
        _write_text(self.path, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return self.path

    def verify(self) -> bool:
        base = self.path.parent
        return all(file_digest(base / o["path"]) == o["sha256"] for o in self.outputs)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise ConfigurationError(f"cannot write {path}: {exc}") from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def format_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_results(records: list[dict[str, Any]], fmt: str, path, manifest: RunManifest | None = None) -> RunManifest:
    """Write ``records`` as CSV (one row per record, columns in first-record order) or JSON.

    Floats carry 17 significant digits, so parsing reproduces them exactly.
    The file's digest is added to ``manifest`` (a fresh one next to ``path``
    when omitted), which is then written.
    """
    path = Path(path)
    if not records:
        raise ConfigurationError(f"no records to write to {path}")
    if fmt == "csv":
        columns = list(records[0])
        for rec in records:
            if list(rec) != columns:
                raise ConfigurationError(f"records for {path} do not share one column order")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(columns)
                for rec in records:
                    writer.writerow([format_cell(rec[c]) for c in columns])
        except OSError as exc:
            raise ConfigurationError(f"cannot write {path}: {exc}") from exc
    elif fmt == "json":
        payload = records[0] if len(records) == 1 else records
        _write_text(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    else:
        raise ConfigurationError(f"unknown output format {fmt!r}")
    if manifest is None:
        manifest = RunManifest({}, __version__, path=path.with_name(path.stem + ".manifest.json"))
    manifest.add(path)
    manifest.write()
    return manifest


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in row] for row in rows[1:]])


def flatten_keys(obj, prefix: str = "") -> set[str]:
    """Dotted key paths of a nested JSON object; list items share their parent's key."""
    keys: set[str] = set()
    if isinstance(obj, dict):
        for k, v in obj.items():
            name = f"{prefix}.{k}" if prefix else str(k)
            if isinstance(v, dict) and not _is_table(v):
                keys |= flatten_keys(v, name)
            else:
                keys.add(name)
    return keys


def _is_table(d: dict) -> bool:
    """Dicts keyed by run labels (M values, grid sizes, identity names) are documented as one field."""
    return bool(d) and all(k.startswith("@") for k in d)


# -- schema ---------------------------------------------------------------------

SCHEMA: dict[str, dict[str, str]] = {
    "profile.csv": {
        "r": "radius",
        "Q": "ground state",
        "T1": "first-order correction",
        "T2": "second-order correction",
        "Sigma_b": "radiation profile",
        "Qb": "unlocalized profile Q + b T1 + b^2 T2",
        "Qb_tilde": "profile localized at B1",
        "Psi_b_tilde": "error of the localized profile (when with_error)",
    },
    "profile.json": {
        "b": "profile parameter",
        "B0": "parabolic radius 1/sqrt(b)",
        "B1": "localization radius |log b|/sqrt(b)",
        "c_b": "radiation normalization",
        "d_b": "radiation offset",
        "c_b_log_b_over_2": "c_b |log b| / 2",
        "min_density": "minimum of the tabulated profile",
        "mass_excess": "plane integral of the localized correction",
        "error.l2_sq": "plane L2 norm squared of the error",
        "error.grad_M_sq": "int Q |grad M Psi|^2",
        "error.L_l2q_sq": "|L Psi|^2 in L2_Q",
        "error.flux": "degenerate flux term",
        "error.noise": "roundoff noise estimate of the error field",
        "scaling.bs": "b values of the scaling fit",
        "scaling.l2_scaled": "int |Psi|^2 |log b|^2 per b",
        "scaling.grad_M_scaled": "int Q |grad M Psi|^2 |log b|^2 / b^4 per b",
        "scaling.slope": "least-squares slope of log l2_scaled against log b",
        "scaling.grad_M_variation": "max/min of grad_M_scaled",
    },
    "ode.csv": {
        "s": "renormalized time",
        "t": "physical time",
        "lambda": "scale",
        "b": "modulation parameter",
        "b_asymptote_ratio": "b over (log s - log log s)/(2 s); nan for s <= e",
        "R": "log(lambda/sqrt(T-t)) / sqrt(|log(T-t)|/2)",
    },
    "ode.json": {
        "b0": "initial b",
        "s_max": "final renormalized time",
        "endpoint_ratio": "b_asymptote_ratio at s_max",
        "log_lambda_ratio": "log lambda over its asymptote at s_max",
        "T": "blow-up time",
        "T_source": "integrated or extrapolated",
        "R_min": "smallest R over the final decade of s",
        "R_max": "largest R over the final decade of s",
        "R_limit": "extrapolated limit of R",
        "lambda_drop": "lambda(0)/lambda(s_max)",
        "inconclusive": "true when lambda dropped less than 1e3",
        "batch": "per extra b0: b0, endpoint_ratio, R_min, R_max",
    },
    "simulate.csv": {
        "t": "physical time",
        "s": "renormalized time from the pinned scale",
        "lambda": "pinned scale sqrt(8/u(0))",
        "b_pinned": "-d log lambda/ds from smoothed differences",
        "b_orth": "b from the orthogonality decomposition (nan on failure)",
        "mass": "total mass",
        "free_energy": "int u log u + (1/2) int u phi_u",
        "second_moment": "int |x|^2 u over the domain",
        "virial_residual": "(d/dt second moment - bulk - boundary)/|bulk| (nan at the first record)",
    },
    "simulate.json": {
        "b0": "initial profile parameter",
        "initial_mass": "total mass at t = 0",
        "stop_reason": "lambda_stop, t_max or max_steps",
        "steps": "time steps taken",
        "renormalizations": "number of frame changes",
        "decomposition_failures": "records without an orthogonality-based b",
        "final.t": "final time",
        "final.lambda": "final pinned scale",
        "conservation.mass_drift": "relative drift of the boundary mass",
        "conservation.mass_drift_quadrature": "relative drift of the quadrature mass",
        "conservation.energy_max_increase": "largest free-energy increase between records",
        "conservation.virial_max_error": "largest relative virial mismatch over resolved records",
        "conservation.virial_checked": "records entering the virial check",
        "conservation.positivity_min": "smallest min(u)/u(0) over records",
        "phenomenology.lambda_drop": "lambda(0)/lambda(end)",
        "phenomenology.lambda_monotone": "lambda strictly decreasing",
        "phenomenology.b_positive": "pinned b positive at every record",
        "phenomenology.b_decreasing": "pinned b strictly decreasing",
        "phenomenology.window": "first and last record index of the final decade of lambda",
        "phenomenology.b_agreement": "largest |b_orth/b_pinned - 1| over the window",
        "phenomenology.b_law_ratio": "window mean of b_s |log b| / b^2 (pinned b)",
        "phenomenology.b_law_ratio_orth": "window mean of b_s |log b| / b^2 (orthogonality b)",
        "steady_drift": "max change of m over the steady-state check (nan when skipped)",
    },
    "spectral.json": {
        "ground.log_identity": "max |log Q + phi_Q - log 8| / max |log Q|",
        "ground.phi": "relative error of the numerical potential of Q",
        "ground.m0": "relative error of the partial mass of Q",
        "ground.mass": "relative error of the plane mass of Q",
        "kernel.n": "finest grid size",
        "kernel.residuals": "per identity: relative residual",
        "kernel.orders": "per identity: measured refinement order (inf at the roundoff floor)",
        "directions": "per M: t1_rel, lambdaq_ratio, c_M",
        "coercivity_M": "per n: delta0, kernel_eigenvalue, unconstrained_min",
        "coercivity_L.M": "cutoff of the directions",
        "coercivity_L.samples": "number of sampled bumps",
        "coercivity_L.skipped": "degenerate samples left out",
        "coercivity_L.min_energy_ratio": "min of (M L e, L e) / |L e|^2 in L2_Q",
        "coercivity_L.min_norm_ratio": "min of |L e|^2 in L2_Q over the weighted Sobolev norm",
    },
    "kernel.csv": {"identity": "identity name", "residual": "relative residual", "order": "refinement order"},
    "report.json": {"criteria": "per criterion: id, title, status, detail"},
}


def write_schema(out: Path, manifest: RunManifest) -> None:
    path = out / "schema.json"
    _write_text(path, json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n")
    manifest.add(path)


# -- subcommands -------------------------------------------------------------


def _timed(timings: dict, key: str, func: Callable, *args, **kwargs):
    t0 = time.perf_counter()
    out = func(*args, **kwargs)
    timings[key] = time.perf_counter() - t0
    return out


def profile_summary(p: dict[str, Any], timings: dict | None = None):
    from .profiles import assemble_profile, error_norms, error_scaling
    from .radial_numerics import build_grid, integrate_radial

    timings = {} if timings is None else timings
    grid = build_grid(p["grid.rmin"], p["grid.rmax"], p["grid.n"])
    prof = _timed(timings, "assemble", assemble_profile, p["b"], p["localized"], grid, p["with_error"])
    g = prof.grid
    r = g.nodes
    rows = []
    cols = {
        "r": r,
        "Q": prof.Qb.values - prof.correction(False),
        "T1": prof.T1.values,
        "T2": prof.T2.values,
        "Sigma_b": prof.Sigma_b.values,
        "Qb": prof.Qb.values,
        "Qb_tilde": prof.Qb_tilde.values,
    }
    if p["with_error"]:
        cols["Psi_b_tilde"] = prof.Psi_b_tilde.values
    for i in range(g.n):
        rows.append({k: float(v[i]) for k, v in cols.items()})
    summary: dict[str, Any] = {
        "b": prof.b,
        "B0": prof.B0,
        "B1": prof.B1,
        "c_b": prof.c_b,
        "d_b": prof.d_b,
        "c_b_log_b_over_2": prof.c_b * abs(math.log(prof.b)) / 2.0,
        "min_density": prof.min_density,
        "mass_excess": integrate_radial(prof.Qb_tilde.like(prof.correction(True), "generic")),
    }
    if p["with_error"]:
        en = error_norms(prof)
        summary["error"] = {k: v for k, v in asdict(en).items() if k != "b"}
    if p["scaling"]:
        fit = _timed(timings, "scaling", error_scaling, tuple(p["scaling.bs"]))
        summary["scaling"] = {
            "bs": list(fit.bs),
            "l2_scaled": list(fit.l2_scaled),
            "grad_M_scaled": list(fit.grad_M_scaled),
            "slope": fit.slope,
            "grad_M_variation": fit.grad_M_variation,
        }
    return summary, {"profile.csv": rows}


def _ode_row_values(traj, report):
    from .modulation_ode import b_asymptote

    rows = []
    for i, st in enumerate(traj.states):
        ratio = st.b / b_asymptote(st.s) if st.s > math.e else math.nan
        rows.append({"s": st.s, "t": st.t, "lambda": st.lam, "b": st.b, "b_asymptote_ratio": ratio, "R": float(report.R[i])})
    return rows


def _ode_endpoint(traj):
    from .modulation_ode import b_asymptote, log_lambda_asymptote

    last = traj.states[-1]
    return last.b / b_asymptote(last.s), last.log_lam / log_lambda_asymptote(last.s)


def worker_count() -> int:
    raw = os.environ.get("PKS_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"PKS_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("PKS_WORKERS must be at least 1")
    return n


def ode_summary(p: dict[str, Any], timings: dict | None = None):
    from .modulation_ode import integrate_batch, integrate_reduced, rate_law_check

    timings = {} if timings is None else timings
    traj = _timed(timings, "integrate", integrate_reduced, p["b0"], p["lambda0"], p["s_max"], per_decade=p["per_decade"])
    rep = rate_law_check(traj)
    end_ratio, loglam_ratio = _ode_endpoint(traj)
    summary: dict[str, Any] = {
        "b0": p["b0"],
        "s_max": p["s_max"],
        "endpoint_ratio": end_ratio,
        "log_lambda_ratio": loglam_ratio,
        "T": rep.T,
        "T_source": rep.T_source,
        "R_min": rep.R_min,
        "R_max": rep.R_max,
        "R_limit": rep.R_limit,
        "lambda_drop": rep.lambda_drop,
        "inconclusive": rep.inconclusive,
    }
    if p["batch"]:
        trajs = _timed(timings, "batch", integrate_batch, p["batch"], p["lambda0"], p["s_max"], worker_count())
        batch = []
        for b0, tr in zip(p["batch"], trajs):
            rr = rate_law_check(tr)
            batch.append({"b0": b0, "endpoint_ratio": _ode_endpoint(tr)[0], "R_min": rr.R_min, "R_max": rr.R_max})
        summary["batch"] = batch
    return summary, {"ode.csv": _ode_row_values(traj, rep)}


def _solver_config(p: dict[str, Any], checkpoint: str | None):
    from .pks_solver import SolverConfig

    return SolverConfig(
        b0=p["b0"],
        mass_excess=p["mass_excess"],
        rmin=p["grid.rmin"],
        rmax=p["grid.rmax"],
        n=p["grid.n"],
        dt0=p["dt0"],
        cfl=p["cfl"],
        lambda_stop=p["lambda_stop"],
        t_max=p["t_max"],
        max_steps=p["max_steps"],
        record_every=p["record_every"],
        M=p["M"],
        decompose=p["decompose"],
        renorm_mode=p["renorm_mode"],
        checkpoint=checkpoint,
    )


def simulate_summary(p: dict[str, Any], timings: dict | None = None, out: Path | None = None):
    from . import pks_solver as ps

    timings = {} if timings is None else timings
    checkpoint = str(out / p["checkpoint"]) if (out is not None and p["checkpoint"]) else None
    cfg = _solver_config(p, checkpoint)
    state = ps.load_checkpoint(p["resume"]) if p["resume"] else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SubcriticalWarning)
        res = _timed(timings, "run", ps.run, cfg, state)
    recs = res.records
    rows = []
    for r in recs:
        bulk = abs(r.virial_rhs)
        vres = (r.virial_lhs - r.virial_rhs - r.virial_boundary) / bulk if bulk > 0 else math.nan
        rows.append(
            {
                "t": r.t,
                "s": r.s,
                "lambda": r.lam,
                "b_pinned": r.b,
                "b_orth": r.b_orth,
                "mass": r.mass,
                "free_energy": r.free_energy,
                "second_moment": r.second_moment,
                "virial_residual": vres,
            }
        )
    summary: dict[str, Any] = {
        "b0": p["b0"],
        "initial_mass": recs[0].mass,
        "stop_reason": res.stop_reason,
        "steps": res.state.steps,
        "renormalizations": res.renormalizations,
        "decomposition_failures": res.decomposition_failures,
        "final": {"t": res.state.t, "lambda": res.state.pinned_lambda},
        "conservation": asdict(ps.conservation_report(recs)) if len(recs) >= 2 else {},
    }
    if len(recs) >= 5:
        summary["phenomenology"] = asdict(ps.phenomenology(recs))
    summary["steady_drift"] = (
        _timed(timings, "steady", ps.steady_state_drift, p["steady_steps"]) if p["steady_steps"] > 0 else math.nan
    )
    return summary, {"simulate.csv": rows}


def spectral_summary(p: dict[str, Any], timings: dict | None = None, seed: int = 0):
    from .operators import ground_state_suite, inner
    from .profiles import build_T1
    from .radial_numerics import build_grid
    from .spectral_lab import build_Phi_M, coercivity_L, coercivity_M, kernel_residuals

    timings = {} if timings is None else timings
    summary: dict[str, Any] = {"ground": _timed(timings, "ground", ground_state_suite, p["ground.n"])}
    kr = _timed(timings, "kernel", kernel_residuals, build_grid(n=p["kernel.n"]))
    summary["kernel"] = {
        "n": kr.n,
        "residuals": {f"@{k}": v for k, v in kr.residuals.items()},
        "orders": {f"@{k}": v for k, v in kr.orders.items()},
    }
    t0 = time.perf_counter()
    directions = {}
    for M in p["directions.M"]:
        d = build_Phi_M(M)
        _, T1 = build_T1(d.PhiM.grid)
        t1_rel = abs(inner(d.PhiM, T1)) / abs(inner(d.Phi0M, T1))
        ratio = inner(d.PhiM, T1.like(_lambdaq(d.PhiM.grid.nodes), "generic")) / (-32.0 * math.pi * math.log(M))
        directions[f"@{M:g}"] = {"t1_rel": t1_rel, "lambdaq_ratio": ratio, "c_M": d.c_M}
    timings["directions"] = time.perf_counter() - t0
    summary["directions"] = directions
    cm = {}
    t0 = time.perf_counter()
    for n in p["coercivity.n"]:
        res = coercivity_M(build_grid(n=n))
        cm[f"@{n}"] = {"delta0": res.delta0, "kernel_eigenvalue": res.kernel_eigenvalue, "unconstrained_min": res.unconstrained_min}
    timings["coercivity_M"] = time.perf_counter() - t0
    summary["coercivity_M"] = cm
    cl = _timed(timings, "coercivity_L", coercivity_L, p["coercivity_L.M"], samples=p["coercivity_L.samples"], seed=seed)
    summary["coercivity_L"] = {
        "M": cl.M,
        "samples": cl.samples,
        "skipped": cl.skipped,
        "min_energy_ratio": cl.min_energy_ratio,
        "min_norm_ratio": cl.min_norm_ratio,
    }
    kernel_rows = [{"identity": k, "residual": v, "order": kr.orders[k]} for k, v in kr.residuals.items()]
    return summary, {"kernel.csv": kernel_rows}


def _lambdaq(r):
    from .ground_state import LambdaQ

    return LambdaQ(r)


# -- acceptance evaluation -------------------------------------------------------


@dataclass(frozen=True)
class CriterionResult:
    id: int
    title: str
    status: str
    detail: str

    def line(self) -> str:
        return f"criterion {self.id} [{self.status}] {self.title}: {self.detail}"


def _within(x, lo, hi) -> bool:
    return x is not None and math.isfinite(x) and lo <= x <= hi


def _c1(S, T):
    g = S["spectral"]["ground"]
    worst = max(g.values())
    ok = worst < 1e-6 and T["spectral"].get("ground", 0.0) < 5.0
    return ok, f"max relative error {worst:.2e} (tol 1e-6), {T['spectral'].get('ground', 0.0):.2f} s"


KERNEL_LIMITS = {"M LambdaQ + 2": 1e-5}
KERNEL_CRITERION = (
    "M LambdaQ + 2",
    "L LambdaQ",
    "L T1 - LambdaQ",
    "Lstar r^2 + 4",
    "L0 psi0",
    "L0 psi1",
    "H1 phiQ'",
)


def _c2(S, T):
    k = S["spectral"]["kernel"]
    res = {name[1:]: v for name, v in k["residuals"].items()}
    orders = {name[1:]: v for name, v in k["orders"].items()}
    bad = []
    for name in KERNEL_CRITERION:
        if name not in res:
            bad.append(f"{name} missing")
            continue
        if not res[name] < KERNEL_LIMITS.get(name, 1e-4):
            bad.append(f"{name} residual {res[name]:.2e}")
        if not orders[name] >= 1.8:
            bad.append(f"{name} order {orders[name]:.2f}")
    rt = T["spectral"].get("kernel", 0.0)
    if rt >= 60.0:
        bad.append(f"runtime {rt:.1f} s")
    worst = max(res[n] for n in KERNEL_CRITERION if n in res)
    low = min(orders[n] for n in KERNEL_CRITERION if n in orders)
    return not bad, (f"max residual {worst:.2e}, min order {low:.2f}, {rt:.2f} s" if not bad else "; ".join(bad))


def _c3(S, T):
    sc = S["profile"]["scaling"]
    slope, var = sc["slope"], sc["grad_M_variation"]
    rt = T["profile"].get("scaling", 0.0)
    ok = abs(slope - 5.0) <= 0.3 and var < 10.0 and rt < 300.0
    return ok, f"slope {slope:.3f} (5.0 +- 0.3), grad M variation {var:.2f}x (< 10x), {rt:.1f} s"


def _c4(S, T):
    d = S["spectral"]["directions"]
    if not all(f"@{M:g}" in d for M in (32.0, 64.0, 128.0)):
        return None, "needs M = 32, 64, 128"
    dev = {M: abs(d[f"@{M:g}"]["lambdaq_ratio"] - 1.0) for M in (32.0, 64.0, 128.0)}
    t1 = max(v["t1_rel"] for v in d.values())
    rt = T["spectral"].get("directions", 0.0)
    ok = t1 < 1e-8 and dev[64.0] < 0.25 and dev[128.0] < dev[32.0] and rt < 120.0
    return ok, (
        f"(Phi_M,T1) rel {t1:.1e}; |ratio-1| = {dev[32.0]:.3f}, {dev[64.0]:.3f}, {dev[128.0]:.3f} "
        f"at M = 32, 64, 128; {rt:.1f} s"
    )


def _c5(S, T):
    c = S["spectral"]["coercivity_M"]
    if "@1024" not in c or "@2048" not in c:
        return None, "needs n = 1024 and 2048"
    a, b = c["@1024"]["delta0"], c["@2048"]["delta0"]
    kern = min(c["@1024"]["kernel_eigenvalue"], c["@2048"]["kernel_eigenvalue"])
    ok = a > 0 and b > 0 and abs(b / a - 1.0) < 0.1 and kern <= 1e-6
    return ok, f"delta0 {a:.5f} / {b:.5f} (change {abs(b / a - 1.0):.1e}), kernel eigenvalue {kern:.1e}"


def _c6(S, T):
    o = S["ode"]
    rt = T["ode"].get("integrate", 0.0)
    ok = (
        _within(o["endpoint_ratio"], 0.95, 1.05)
        and _within(o["R_min"], -1.5, -0.6)
        and _within(o["R_max"], -1.5, -0.6)
        and rt < 30.0
        and o["s_max"] >= 1e8
    )
    return ok, f"endpoint ratio {o['endpoint_ratio']:.4f}, R in [{o['R_min']:.3f}, {o['R_max']:.3f}], {rt:.2f} s"


def _c7(S, T):
    s = S["simulate"]
    c = s["conservation"]
    ph = s.get("phenomenology", {})
    drift = max(c["mass_drift"], c["mass_drift_quadrature"])
    rt = T["simulate"].get("run", 0.0) + T["simulate"].get("steady", 0.0)
    ok = (
        drift < 1e-6
        and c["energy_max_increase"] <= 1e-8
        and c["virial_checked"] > 0
        and c["virial_max_error"] < 0.01
        and s["steady_drift"] < 1e-6
        and ph.get("lambda_drop", 0.0) >= 10.0 * (1.0 - 1e-3)
        and rt < 600.0
    )
    return ok, (
        f"mass drift {drift:.1e}, max F increase {c['energy_max_increase']:.1e}, "
        f"virial error {c['virial_max_error']:.1e} over {c['virial_checked']} records, "
        f"steady drift {s['steady_drift']:.1e}, {rt:.1f} s"
    )


def _c8(S, T):
    ph = S["simulate"].get("phenomenology")
    if not ph:
        return None, "run too short"
    ok = (
        ph["lambda_monotone"]
        and ph["b_positive"]
        and ph["b_decreasing"]
        and _within(ph["b_agreement"], 0.0, 0.2)
        and _within(ph["b_law_ratio"], -4.0, -0.5)
    )
    return ok, (
        f"lambda monotone {ph['lambda_monotone']}, b positive {ph['b_positive']}, "
        f"b decreasing {ph['b_decreasing']}, b agreement {ph['b_agreement']:.3f}, "
        f"b_s|log b|/b^2 {ph['b_law_ratio']:.3f} (orth {ph['b_law_ratio_orth']:.3f})"
    )


CRITERIA = (
    (1, "ground-state suite", ("spectral",), _c1),
    (2, "kernel identities", ("spectral",), _c2),
    (3, "profile error scaling", ("profile",), _c3),
    (4, "direction identities", ("spectral",), _c4),
    (5, "energy coercivity", ("spectral",), _c5),
    (6, "reduced ODE", ("ode",), _c6),
    (7, "solver conservation", ("simulate",), _c7),
    (8, "blow-up phenomenology", ("simulate",), _c8),
)


def evaluate(summaries: dict[str, dict], timings: dict[str, dict]) -> list[CriterionResult]:
    """Pass/fail per acceptance criterion; criteria whose inputs are absent are marked skipped."""
    out = []
    for cid, title, needs, func in CRITERIA:
        if not all(n in summaries for n in needs):
            out.append(CriterionResult(cid, title, "SKIP", f"no {'/'.join(needs)} results"))
            continue
        try:
            ok, detail = func(summaries, {n: timings.get(n, {}) for n in summaries})
        except (KeyError, TypeError) as exc:
            ok, detail = False, f"incomplete results ({exc})"
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        out.append(CriterionResult(cid, title, status, detail))
    return out


def report_summary(inputs: Path):
    summaries, timings = {}, {}
    for name in ("profile", "ode", "simulate", "spectral"):
        path = inputs / f"{name}.json"
        if path.exists():
            summaries[name] = json.loads(path.read_text())
            man = inputs / f"manifest-{name}.json"
            if man.exists():
                timings[name] = json.loads(man.read_text()).get("timings", {})
    if not summaries:
        raise ConfigurationError(f"no subcommand results found in {inputs}")
    results = evaluate(summaries, timings)
    return {"criteria": [asdict(r) for r in results]}, results


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pks-blowup", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="key = value file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out", type=Path, default=Path("."), help="output directory")
        sp.add_argument("--seed", type=int, default=0)
    return parser


def execute(cfg: RunConfig, out: Path) -> RunManifest:
    out = Path(out)
    manifest = RunManifest(cfg.snapshot(), __version__, path=out / f"manifest-{cfg.subcommand}.json")
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    p = cfg.parameters
    if cfg.subcommand == "profile":
        summary, tables = profile_summary(p, timings)
    elif cfg.subcommand == "ode":
        summary, tables = ode_summary(p, timings)
    elif cfg.subcommand == "simulate":
        summary, tables = simulate_summary(p, timings, out)
    elif cfg.subcommand == "spectral":
        summary, tables = spectral_summary(p, timings, cfg.seed)
    else:
        inputs = Path(p["inputs"]) if p["inputs"] else out
        summary, results = report_summary(inputs)
        for r in results:
            print(r.line())
        tables = {}
    timings["total"] = time.perf_counter() - t0
    manifest.timings = timings
    for name, rows in tables.items():
        emit_results(rows, "csv", out / name, manifest)
    emit_results([summary], "json", out / f"{cfg.subcommand}.json", manifest)
    if cfg.subcommand == "simulate" and p["checkpoint"] and (out / p["checkpoint"]).exists():
        manifest.add(out / p["checkpoint"])
    write_schema(out, manifest)
    manifest.write()
    return manifest


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.subcommand, args.config, args.overrides, args.seed)
        print(cfg.echo())
        execute(cfg, args.out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PKSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
