"""Command-line front end: config parsing, experiment runs and report files.

Usage::

    collapse-lab <experiment> --config run.toml [--seed N] [--realizations N] [--out DIR] [--svg]

A run writes, into the output directory, a ``report.json`` (sorted keys,
``"spec_version": 1``), one or more series CSV files (first column ``t``,
17 significant digits), a ``resolved-config.toml`` echo that parses back to
the same configuration, and optional SVG line charts. Exit status: 0 when
every pass criterion in the report holds, 1 when one fails, 2 for usage or
configuration errors, 3 for runtime errors. Errors are written to
``error.json`` (and stderr) with the module, code and seed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from collapse_lab import collapse_harness as ch
from collapse_lab import noise as nz
from collapse_lab import pairing_oracle as po
from collapse_lab import spatial_model as sm
from collapse_lab import temporal_model as tm
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import HermitianOperator, StateVector, TimeGrid, trace_distance_series

_MODULE = "cli"

SPEC_VERSION = 1
EXPERIMENTS = ("simulate-spatial", "lindblad-spatial", "simulate-temporal", "lindblad-temporal", "pairing-check",
               "scaling-probe", "collapse", "hartree-fock", "covariance-diag")
TEMPORAL = ("simulate-temporal", "lindblad-temporal", "pairing-check", "scaling-probe", "collapse", "hartree-fock")
FORMATS = ("csv", "json", "svg")
HERMITICITY_TOL = 1e-10
CLOSED_FORM_RTOL = 1e-6
GAMMA_TOL = 1e-8
HEFF_TOL = 1e-10
CONFIG_CODES = frozenset({"schema-error", "hermiticity-error", "contraction-violated", "dim-mismatch",
                          "grid-misalignment", "insufficient-window", "observable-not-commuting", "usage-error"})
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# Section -> key -> default; None marks a required key, ... an optional one without default.
_SCHEMA = {
    "model": {"dim": None, "use_window": True, "interaction_picture": True, "H0": ..., "channels": []},
    "state": {"psi0": ...},
    "grid": {"t0": 0.0, "t1": None, "h": None},
    "ensemble": {"R": 1000, "base_seed": 0},
    "solver": {"name": "windowed-sweep", "tol": 1e-10, "stepper": "unitary-exp", "control_variate": False},
    "output": {"directory": "collapse-lab-out", "formats": ["csv", "json"]},
    "criteria": {"td_max": 0.02},
    "no_collapse": {"observable": ...},
    "pairing": {"ids": list(po.PAIRING_IDS), "theta0": 0.5, "sample_count": 5, "panels": 4},
    "scaling": {"ell_list": None, "g_list": None},
    "collapse": {"observable": None, "p_c": 0.95, "q_list": [1, 2, 4], "variance_ratio_max": 0.1},
    "covariance": {"matrices": None},
}
_CHANNEL_KEYS = {"N": None, "kernel": "box", "ell": 0.02, "g": 1.0, "omega": 0.0, "envelope": "triangle"}
_SECTIONS_FOR = {
    "simulate-spatial": ("model", "state", "grid", "ensemble", "solver", "output", "criteria", "no_collapse"),
    "lindblad-spatial": ("model", "state", "grid", "output"),
    "simulate-temporal": ("model", "state", "grid", "ensemble", "solver", "output", "criteria"),
    "lindblad-temporal": ("model", "state", "grid", "output"),
    "pairing-check": ("model", "state", "grid", "ensemble", "solver", "output", "pairing"),
    "scaling-probe": ("model", "state", "grid", "ensemble", "solver", "output", "scaling"),
    "collapse": ("model", "state", "grid", "ensemble", "solver", "output", "collapse"),
    "hartree-fock": ("model", "state", "grid", "ensemble", "solver", "output", "collapse"),
    "covariance-diag": ("output", "covariance"),
}


def _schema_error(path: str, message: str) -> CollapseLabError:
    return CollapseLabError("schema-error", f"{path}: {message}", _MODULE, path=path)


def _number(x, path: str, kind=float):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise _schema_error(path, f"expected a number, got {x!r}")
    if kind is int:
        if isinstance(x, float) and not x.is_integer():
            raise _schema_error(path, f"expected an integer, got {x!r}")
        return int(x)
    x = float(x)
    if not math.isfinite(x):
        raise _schema_error(path, "must be finite")
    return x


def _complex_list(x, path: str) -> np.ndarray:
    """List of ``[re, im]`` pairs to a complex vector."""
    if not isinstance(x, list):
        raise _schema_error(path, "expected a list of [re, im] pairs")
    out = np.empty(len(x), dtype=complex)
    for k, pair in enumerate(x):
        if not (isinstance(pair, list) and len(pair) == 2):
            raise _schema_error(f"{path}[{k}]", "expected [re, im]")
        out[k] = complex(_number(pair[0], f"{path}[{k}][0]"), _number(pair[1], f"{path}[{k}][1]"))
    return out


def _matrix(x, d: int, path: str, hermitian: bool = True, what: str = "") -> np.ndarray:
    """Row-major ``[re, im]`` pairs to a ``(d, d)`` matrix, Hermiticity-checked."""
    v = _complex_list(x, path)
    if v.size != d * d:
        raise _schema_error(path, f"expected {d * d} entries, got {v.size}")
    m = v.reshape(d, d)
    if hermitian:
        dev = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
        if dev > HERMITICITY_TOL * max(1.0, float(np.max(np.abs(m)))):
            raise CollapseLabError("hermiticity-error", f"{path}: {what or 'matrix'} is not Hermitian "
                                   f"(deviation {dev:.3e})", _MODULE, path=path, deviation=dev)
    return m


def _pairs(v: np.ndarray) -> list:
    return [[float(z.real), float(z.imag)] for z in np.ravel(v)]


@dataclass
class RunConfig:
    """Validated configuration.

    Attributes:
        experiment: Experiment name.
        resolved: Plain-data configuration with every default filled in; it
            is what ``resolved-config.toml`` contains.
        dim: Hilbert dimension.
        psi0: Initial state.
        grid: Time grid (absent for ``covariance-diag``).
        matrices: Channel kernels ``N`` (or ``M`` for spatial runs).
        H0: Free Hamiltonian or None.
    """

    experiment: str
    resolved: dict
    dim: int = 0
    psi0: StateVector | None = None
    grid: TimeGrid | None = None
    matrices: tuple = ()
    H0: np.ndarray | None = None

    def section(self, name: str) -> dict:
        return self.resolved.get(name, {})

    @property
    def realizations(self) -> int:
        return self.section("ensemble").get("R", 0)

    @property
    def base_seed(self) -> int:
        return self.section("ensemble").get("base_seed", 0)

    def spatial_spec(self) -> sm.SpatialModelSpec:
        m = self.section("model")
        return sm.SpatialModelSpec(self.dim, [HermitianOperator(x) for x in self.matrices],
                                   None if self.H0 is None else HermitianOperator(self.H0), m["interaction_picture"])

    def temporal_spec(self) -> tm.TemporalModelSpec:
        m = self.section("model")
        chans = []
        for c, n in zip(m["channels"], self.matrices):
            kern = tm.KernelProfile(c["kernel"], c["ell"], c["g"], c["omega"], c["envelope"])
            chans.append(tm.Channel(HermitianOperator(n), kern))
        return tm.TemporalModelSpec(self.dim, chans, None if self.H0 is None else HermitianOperator(self.H0),
                                    m["use_window"])


def _fill(section: str, raw: dict, path: str) -> dict:
    if not isinstance(raw, dict):
        raise _schema_error(path, "expected a table")
    schema = _SCHEMA[section]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise _schema_error(f"{path}.{unknown[0]}", "unknown key")
    out = {}
    for key, default in schema.items():
        if key in raw:
            out[key] = copy.deepcopy(raw[key])
        elif default is None:
            raise _schema_error(f"{path}.{key}", "required key missing")
        elif default is not ...:
            out[key] = copy.deepcopy(default)
    return out


def resolve_config(raw: dict, experiment: str | None = None) -> RunConfig:
    """Validates a parsed document and fills defaults.

    Args:
        raw: Parsed TOML document.
        experiment: Experiment from the command line; must match the
            document's ``experiment`` key when both are present.

    Raises:
        CollapseLabError: ``schema-error`` (with the key path),
            ``hermiticity-error`` or ``contraction-violated``.
    """
    if not isinstance(raw, dict):
        raise _schema_error("$", "expected a table")
    doc_exp = raw.get("experiment")
    if experiment is not None and doc_exp is not None and doc_exp != experiment:
        raise _schema_error("experiment", f"config is for {doc_exp!r}, command line asks for {experiment!r}")
    exp = experiment or doc_exp
    if exp not in EXPERIMENTS:
        raise _schema_error("experiment", f"unknown experiment {exp!r}")
    allowed = _SECTIONS_FOR[exp]
    unknown = sorted(set(raw) - set(allowed) - {"experiment"})
    if unknown:
        raise _schema_error(unknown[0], f"section not used by {exp}")
    res: dict = {"experiment": exp}
    for sec in allowed:
        res[sec] = _fill(sec, raw.get(sec, {}), sec)
    cfg = RunConfig(exp, res)

    out = res["output"]
    if not isinstance(out["directory"], str):
        raise _schema_error("output.directory", "expected a string")
    if not isinstance(out["formats"], list) or any(f not in FORMATS for f in out["formats"]):
        raise _schema_error("output.formats", f"expected a list drawn from {FORMATS}")

    if exp == "covariance-diag":
        mats = res["covariance"]["matrices"]
        if not isinstance(mats, list) or not mats:
            raise _schema_error("covariance.matrices", "expected a non-empty list")
        d2 = math.isqrt(len(_complex_list(mats[0], "covariance.matrices[0]")))
        d = math.isqrt(d2)
        if d * d != d2 or d2 * d2 != len(mats[0]):
            raise _schema_error("covariance.matrices[0]", "length must be d^4")
        cfg.dim = d
        cfg.matrices = tuple(_matrix(m, d2, f"covariance.matrices[{a}]", what=f"covariance {a}")
                             for a, m in enumerate(mats))
        return cfg

    model = res["model"]
    d = _number(model["dim"], "model.dim", int)
    if d < 1:
        raise _schema_error("model.dim", "must be >= 1")
    cfg.dim = d
    for key in ("use_window", "interaction_picture"):
        if not isinstance(model[key], bool):
            raise _schema_error(f"model.{key}", "expected true or false")
    if "H0" in model:
        cfg.H0 = _matrix(model["H0"], d, "model.H0", what="H0")
    if not isinstance(model["channels"], list):
        raise _schema_error("model.channels", "expected an array of tables")
    chans, mats = [], []
    for k, c in enumerate(model["channels"]):
        path = f"model.channels[{k}]"
        if not isinstance(c, dict):
            raise _schema_error(path, "expected a table")
        bad = sorted(set(c) - set(_CHANNEL_KEYS))
        if bad:
            raise _schema_error(f"{path}.{bad[0]}", "unknown key")
        if "N" not in c:
            raise _schema_error(f"{path}.N", "required key missing")
        full = {key: copy.deepcopy(c.get(key, default)) for key, default in _CHANNEL_KEYS.items()}
        mats.append(_matrix(full["N"], d, f"{path}.N", what=f"channel {k} kernel"))
        for key in ("ell", "g", "omega"):
            full[key] = _number(full[key], f"{path}.{key}")
        if full["kernel"] not in tm.KERNEL_FORMS:
            raise _schema_error(f"{path}.kernel", f"expected one of {tm.KERNEL_FORMS}")
        if full["envelope"] not in tm.ENVELOPES:
            raise _schema_error(f"{path}.envelope", f"expected one of {tm.ENVELOPES}")
        chans.append(full)
    model["channels"] = chans
    cfg.matrices = tuple(mats)

    st = res["state"]
    if "psi0" in st:
        v = _complex_list(st["psi0"], "state.psi0")
    else:
        v = np.full(d, 1.0 / math.sqrt(d), dtype=complex)
        st["psi0"] = _pairs(v)
    if v.size != d:
        raise _schema_error("state.psi0", f"expected {d} entries, got {v.size}")
    if not np.any(v):
        raise _schema_error("state.psi0", "state is zero")
    cfg.psi0 = StateVector(v)

    g = res["grid"]
    for key in ("t0", "t1", "h"):
        g[key] = _number(g[key], f"grid.{key}")
    try:
        cfg.grid = TimeGrid(g["t0"], g["t1"], g["h"])
    except CollapseLabError as err:
        raise _schema_error("grid", str(err)) from err

    if "ensemble" in res:
        e = res["ensemble"]
        e["R"] = _number(e["R"], "ensemble.R", int)
        e["base_seed"] = _number(e["base_seed"], "ensemble.base_seed", int)
        if e["R"] < 1:
            raise _schema_error("ensemble.R", "must be >= 1")
        if not 0 <= e["base_seed"] < 2 ** 63:
            raise _schema_error("ensemble.base_seed", "must lie in [0, 2^63)")
    if "solver" in res:
        s = res["solver"]
        if s["name"] not in tm.SOLVERS:
            raise _schema_error("solver.name", f"expected one of {tm.SOLVERS}")
        if s["stepper"] not in sm.STEPPERS:
            raise _schema_error("solver.stepper", f"expected one of {sm.STEPPERS}")
        s["tol"] = _number(s["tol"], "solver.tol")
        if not isinstance(s["control_variate"], bool):
            raise _schema_error("solver.control_variate", "expected true or false")
    if "criteria" in res:
        res["criteria"]["td_max"] = _number(res["criteria"]["td_max"], "criteria.td_max")
    if "no_collapse" in res and "observable" in res["no_collapse"]:
        _matrix(res["no_collapse"]["observable"], d, "no_collapse.observable", what="observable")
    if "pairing" in res:
        p = res["pairing"]
        if not isinstance(p["ids"], list) or not p["ids"] or any(i not in po.PAIRING_IDS for i in p["ids"]):
            raise _schema_error("pairing.ids", f"expected a list drawn from {po.PAIRING_IDS}")
        p["theta0"] = _number(p["theta0"], "pairing.theta0")
        p["sample_count"] = _number(p["sample_count"], "pairing.sample_count", int)
        p["panels"] = _number(p["panels"], "pairing.panels", int)
    if "scaling" in res:
        for key in ("ell_list", "g_list"):
            lst = res["scaling"][key]
            if not isinstance(lst, list):
                raise _schema_error(f"scaling.{key}", "expected a list")
            res["scaling"][key] = [_number(x, f"scaling.{key}[{k}]") for k, x in enumerate(lst)]
    if "collapse" in res:
        c = res["collapse"]
        _matrix(c["observable"], d, "collapse.observable", what="observable")
        c["p_c"] = _number(c["p_c"], "collapse.p_c")
        c["variance_ratio_max"] = _number(c["variance_ratio_max"], "collapse.variance_ratio_max")
        if not isinstance(c["q_list"], list):
            raise _schema_error("collapse.q_list", "expected a list")
        c["q_list"] = [_number(q, f"collapse.q_list[{k}]", int) for k, q in enumerate(c["q_list"])]

    if exp in TEMPORAL:
        spec = cfg.temporal_spec()
        spec.support_nodes(cfg.grid)
        spec.check_window_fits(cfg.grid)
        if exp != "lindblad-temporal":
            solver = res["solver"]["name"]
            if exp == "scaling-probe":
                for ell in res["scaling"]["ell_list"]:
                    for gv in res["scaling"]["g_list"]:
                        if gv > 0:
                            tm.check_contraction(po._scaled_spec(spec, ell, gv, None), cfg.grid, solver)
            else:
                tm.check_contraction(spec, cfg.grid, solver)
    else:
        cfg.spatial_spec()
    return cfg


def _load_toml(path) -> dict:
    p = Path(path)
    try:
        text = p.read_bytes().decode("utf-8")
    except (OSError, UnicodeDecodeError) as err:
        raise CollapseLabError("schema-error", f"cannot read config {str(p)!r}: {err}", _MODULE, path=str(p)) from err
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise CollapseLabError("schema-error", f"{p}: {err}", _MODULE, path=str(p)) from err


def parse_config(path, experiment: str | None = None) -> RunConfig:
    """Reads and validates a TOML configuration file.

    Raises:
        CollapseLabError: ``schema-error`` for a missing or malformed file
            and for every validation failure of :func:`resolve_config`.
    """
    return resolve_config(_load_toml(path), experiment)


def dump_config(cfg: RunConfig) -> str:
    """TOML text of the resolved configuration."""
    return tomli_w.dumps(cfg.resolved)


# ------------------------------------------------------------------ output


def _fmt(x) -> str:
    return format(float(x), ".17g")


def series_csv(columns: list[str], rows) -> str:
    """RFC-4180 CSV text with a header row; numbers at 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    return buf.getvalue()


def emit_series_csv(series: dict, path) -> None:
    """Writes ``{"t": ..., name: values, ...}`` (insertion order) as CSV; ``t`` first.

    Raises:
        CollapseLabError: ``io-error`` naming the path.
    """
    if "t" not in series:
        raise CollapseLabError("schema-error", "series needs a 't' column", _MODULE)
    cols = ["t"] + [k for k in series if k != "t"]
    data = [np.asarray(series[k], dtype=float).ravel() for k in cols]
    rows = zip(*data) if data[0].size else []
    _write(path, series_csv(cols, rows))


def density_series(t: np.ndarray, rho: np.ndarray) -> dict:
    """Row-major ``re_sij`` / ``im_sij`` columns of a density series ``(n, d, d)``."""
    d = rho.shape[-1] if rho.ndim == 3 else 0
    out = {"t": t}
    for i in range(d):
        for j in range(d):
            out[f"re_s{i}{j}"] = rho[:, i, j].real
            out[f"im_s{i}{j}"] = rho[:, i, j].imag
    return out


def state_series(t: np.ndarray, psi: np.ndarray) -> dict:
    out = {"t": t}
    for k in range(psi.shape[-1]):
        out[f"re_{k}"] = psi[:, k].real
        out[f"im_{k}"] = psi[:, k].imag
    return out


def to_jsonable(x):
    """Numpy and complex values to plain JSON data (complex as ``[re, im]``)."""
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x)
    if isinstance(x, (complex, np.complexfloating)):
        return [float(x.real), float(x.imag)]
    if x is None or isinstance(x, str):
        return x
    raise TypeError(f"cannot serialize {type(x).__name__}")


def report_json(report: dict) -> str:
    """Stable JSON text: sorted keys, ``spec_version`` added."""
    body = dict(to_jsonable(report))
    body["spec_version"] = SPEC_VERSION
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def emit_report_json(report: dict, path) -> None:
    _write(path, report_json(report))


def svg_chart(t, lines: dict, title: str, width: int = 640, height: int = 360) -> str:
    """Minimal SVG line chart: one polyline per series, shared axes."""
    t = np.asarray(t, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in lines.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] + [np.zeros(0)])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-300:
        lo, hi = lo - 0.5, hi + 0.5
    t0, t1 = (float(t[0]), float(t[-1])) if t.size > 1 else (0.0, 1.0)
    pad = 40
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

    def px(x, y):
        return (pad + (x - t0) / (t1 - t0) * (width - 2 * pad), height - pad - (y - lo) / (hi - lo) * (height - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" '
             f'stroke="#888"/>',
             f'<text x="2" y="{pad + 4}" font-size="10">{hi:.4g}</text>',
             f'<text x="2" y="{height - pad}" font-size="10">{lo:.4g}</text>']
    for k, (name, y) in enumerate(ys.items()):
        ok = np.isfinite(y)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(x, v) for x, v in zip(t[ok], y[ok])))
        col = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 14 * (k + 1)}" font-size="11" fill="{col}">'
                     f'{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _write(path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as err:
        raise CollapseLabError("io-error", f"cannot write {str(path)!r}: {err}", _MODULE, path=str(path)) from err


# ------------------------------------------------------------- experiments


@dataclass
class Outcome:
    """Experiment result: report, named series and charts."""

    report: dict
    series: dict
    charts: dict

    @property
    def passed(self) -> bool:
        return bool(self.report.get("pass", False))


def _commuting_closed_form(spec: sm.SpatialModelSpec, rho0: np.ndarray, t: np.ndarray) -> np.ndarray | None:
    """Exact master-equation solution for commuting kernels in the interaction picture."""
    if spec.h0_active() is not None or not spec.M_channels:
        return None
    basis = sm._common_eigenbasis([m.data for m in spec.M_channels])
    if basis is None:
        return None
    lam = np.array([np.diag(basis.conj().T @ m.data @ basis).real for m in spec.M_channels])
    rate = 0.5 * np.sum((lam[:, :, None] - lam[:, None, :]) ** 2, axis=0)
    r0 = basis.conj().T @ rho0 @ basis
    rho = r0[None] * np.exp(-rate[None] * t[:, None, None])
    return basis[None] @ rho @ basis.conj().T[None]


def _run_lindblad_spatial(cfg: RunConfig) -> Outcome:
    spec = cfg.spatial_spec()
    rho0 = np.outer(cfg.psi0.normalized().data, cfg.psi0.normalized().data.conj())
    t = cfg.grid.times
    rho = sm.integrate_lindblad_spatial(rho0, spec, cfg.grid)
    exact = _commuting_closed_form(spec, rho0, t)
    rep = {"experiment": cfg.experiment, "trace_error": float(np.max(np.abs(np.trace(rho, axis1=1, axis2=2) - 1)))}
    ok = rep["trace_error"] <= 1e-10
    if exact is not None:
        scale = np.maximum(np.abs(exact), 1e-300)
        mask = np.abs(exact) > 1e-12
        rel = float(np.max(np.abs(rho - exact)[mask] / scale[mask])) if mask.any() else 0.0
        rep["closed_form_max_rel_error"] = rel
        rep["closed_form_tol"] = CLOSED_FORM_RTOL
        ok &= rel <= CLOSED_FORM_RTOL
    rep["final_density"] = rho[-1]
    rep["pass"] = bool(ok)
    charts = {}
    if cfg.dim >= 2:
        charts["coherence"] = ("|s01|", {"|s01|": np.abs(rho[:, 0, 1])})
    return Outcome(rep, {"density": density_series(t, rho)}, charts)


def _run_simulate_spatial(cfg: RunConfig) -> Outcome:
    spec = cfg.spatial_spec()
    psi0 = cfg.psi0.normalized()
    stepper = cfg.section("solver")["stepper"]
    t = cfg.grid.times
    acc = np.zeros((cfg.grid.n, cfg.dim, cfg.dim), dtype=complex)
    first = None
    for start, states in sm.iter_ensemble(spec, psi0, cfg.grid, cfg.realizations, cfg.base_seed, stepper):
        if first is None:
            first = states[0]
        acc += sm.density_sum(states)
    rho = acc / cfg.realizations
    lind = sm.integrate_lindblad_spatial(np.outer(psi0.data, psi0.data.conj()), spec, cfg.grid)
    td = trace_distance_series(rho, lind)
    td_max = cfg.section("criteria")["td_max"]
    rep = {"experiment": cfg.experiment, "max_trace_distance": float(td.max()), "td_max": td_max,
           "realizations": cfg.realizations, "base_seed": cfg.base_seed}
    ok = float(td.max()) <= td_max
    series = {"density": density_series(t, rho), "trajectory_0": state_series(t, first),
              "trace_distance": {"t": t, "value": td}}
    charts = {"trace_distance": ("trace distance to master equation", {"td": td})}
    obs = cfg.section("no_collapse").get("observable")
    if obs is not None:
        o = HermitianOperator(_matrix(obs, cfg.dim, "no_collapse.observable"))
        nc = sm.no_collapse_check(spec, o, psi0, cfg.grid, cfg.realizations, cfg.base_seed, stepper)
        rep["no_collapse"] = {"max_drift": nc["max_drift"], "pass": nc["pass"]}
        ok &= nc["pass"]
        series["variance"] = {"t": t, "value": nc["variance_series"], "se": nc["se_series"]}
        charts["variance"] = ("ensemble variance", {"variance": nc["variance_series"]})
    rep["pass"] = bool(ok)
    return Outcome(rep, series, charts)


def _run_simulate_temporal(cfg: RunConfig) -> Outcome:
    spec = cfg.temporal_spec()
    psi0 = cfg.psi0.normalized()
    sol = cfg.section("solver")
    t = cfg.grid.times
    rho0 = np.outer(psi0.data, psi0.data.conj())
    state = {"defect": 0.0, "first": None, "acc": np.zeros((cfg.grid.n, cfg.dim, cfg.dim), dtype=complex)}

    def observe(disc, coef, psi, accumulate=False):
        if state["first"] is None:
            state["first"] = psi[0]
        ip = tm.commutator_ip_series(disc, coef, psi, psi)
        state["defect"] = max(state["defect"], float(np.max(np.abs(ip - 1.0))))
        if accumulate:
            st = tm.transformed_batch(spec, disc, coef, psi)
            state["acc"] += np.einsum("rni,rnj->nij", st, st.conj())

    rep = {"experiment": cfg.experiment, "realizations": cfg.realizations, "base_seed": cfg.base_seed}
    if sol["control_variate"]:
        rho, se = tm.ensemble_density_controlled(spec, psi0, cfg.grid, cfg.realizations, cfg.base_seed,
                                                 solver=sol["name"], tol=sol["tol"], observer=observe)
        rep["max_standard_error"] = float(se.max())
    else:
        disc = tm.Discretization.build(spec, cfg.grid)
        for _, _, coef, psi in tm.iter_temporal_ensemble(spec, psi0, cfg.grid, cfg.realizations, cfg.base_seed,
                                                         sol["name"], sol["tol"]):
            observe(disc, coef, psi, accumulate=True)
        rho = state["acc"] / cfg.realizations
    rep["conservation_defect"] = state["defect"]
    lind = tm.integrate_lindblad_temporal(rho0, spec, cfg.grid)
    td = trace_distance_series(rho, lind)
    td_max = cfg.section("criteria")["td_max"]
    rep.update({"max_trace_distance": float(td.max()), "td_max": td_max, "pass": bool(td.max() <= td_max)})
    series = {"density": density_series(t, rho), "trajectory_0": state_series(t, state["first"]),
              "trace_distance": {"t": t, "value": td}}
    return Outcome(rep, series, {"trace_distance": ("trace distance to master equation", {"td": td})})


def _run_lindblad_temporal(cfg: RunConfig) -> Outcome:
    spec = cfg.temporal_spec()
    psi0 = cfg.psi0.normalized()
    rho = tm.integrate_lindblad_temporal(np.outer(psi0.data, psi0.data.conj()), spec, cfg.grid)
    rates = []
    ok = True
    for ch_ in spec.channels:
        quad_rate = tm.lindblad_rate(ch_)
        closed = tm.lindblad_rate_closed_form(ch_)
        agree = abs(quad_rate - closed) <= GAMMA_TOL * max(1.0, abs(closed))
        ok &= agree
        rates.append({"quadrature": quad_rate, "closed_form": closed, "agree": bool(agree)})
    terms = tm.effective_hamiltonian_terms(0.5 * (cfg.grid.t0 + cfg.grid.t1), spec)
    corr = terms["commutator_1"] + terms["commutator_2"] + terms["third"]
    herm = float(np.max(np.abs(corr - corr.conj().T))) if corr.size else 0.0
    heff = {
        "max_correction": float(np.max(np.abs(corr))) if corr.size else 0.0,
        "commutator_terms_max": float(max(np.max(np.abs(terms["commutator_1"])),
                                          np.max(np.abs(terms["commutator_2"])))) if corr.size else 0.0,
        "hermitian_deviation": herm,
    }
    ok &= herm <= HEFF_TOL
    trace_err = float(np.max(np.abs(np.trace(rho, axis1=1, axis2=2) - 1)))
    ok &= trace_err <= 1e-10
    rep = {"experiment": cfg.experiment, "rates": rates, "effective_hamiltonian": heff, "trace_error": trace_err,
           "final_density": rho[-1], "pass": bool(ok)}
    t = cfg.grid.times
    charts = {"coherence": ("|s01|", {"|s01|": np.abs(rho[:, 0, 1])})} if cfg.dim >= 2 else {}
    return Outcome(rep, {"density": density_series(t, rho)}, charts)


def _pairing_config(cfg: RunConfig) -> po.PairingConfig:
    p, s = cfg.section("pairing"), cfg.section("solver")
    return po.PairingConfig(cfg.temporal_spec(), cfg.grid, cfg.psi0.normalized(), p.get("theta0", 0.5), s["name"],
                            s["tol"], p.get("panels", 4), p.get("sample_count", 5))


def _run_pairing(cfg: RunConfig) -> Outcome:
    pc = _pairing_config(cfg)
    reps = {}
    for pid in cfg.section("pairing")["ids"]:
        reps[pid] = po.verify_pairing_identity(pid, pc, cfg.realizations, cfg.base_seed).to_dict()
    ok = all(r["pass"] for r in reps.values())
    rep = {"experiment": cfg.experiment, "identities": reps, "pass": bool(ok),
           "conjugation_pairs_consistent": po.conjugation_pairs_consistent(pc)}
    return Outcome(rep, {}, {})


def _run_scaling(cfg: RunConfig) -> Outcome:
    sc = cfg.section("scaling")
    pc = _pairing_config(cfg)
    out = po.nonadjacent_scaling_probe(sc["ell_list"], sc["g_list"], pc, cfg.realizations, cfg.base_seed)
    out = dict(out)
    out["ell_ordering"] = {str(k): v for k, v in out["ell_ordering"].items()}
    out["experiment"] = cfg.experiment
    out["pass"] = bool(all(out["slopes_ok"]) and all(out["ell_ordering"].values()))
    return Outcome(out, {}, {})


def _collapse_config(cfg: RunConfig) -> ch.CollapseConfig:
    c, s = cfg.section("collapse"), cfg.section("solver")
    o = HermitianOperator(_matrix(c["observable"], cfg.dim, "collapse.observable"))
    return ch.CollapseConfig(cfg.temporal_spec(), o, cfg.psi0.normalized(), cfg.grid, cfg.realizations,
                             cfg.base_seed, c["p_c"], s["name"], s["tol"])


def _run_collapse(cfg: RunConfig) -> Outcome:
    cc = _collapse_config(cfg)
    r = ch.run_collapse_experiment(cc)
    limit = cfg.section("collapse")["variance_ratio_max"]
    rep = r.to_dict()
    checks = {"variance_reduced": bool(r.variance_ratio <= limit), "born_inside_ci": r.born_ok(),
              "martingale": r.martingale_ok(), "variance_monotone": r.variance_monotone()}
    comp = ch.composite_check(cc)
    rep.update({"experiment": cfg.experiment, "checks": checks, "variance_ratio_max": limit,
                "composite_deviation_from_scalar": comp["deviation_from_scalar"], "pass": all(checks.values())})
    t = r.times
    series = {
        "rescaling": {"t": t, "value": r.c},
        "martingale": {"t": t, "value": r.mean_observable, "se": r.mean_observable_se},
        "variance": {"t": t, "value": r.variance_series, "se": r.variance_se},
    }
    charts = {"variance": ("ensemble variance of the rescaled states", {"variance": r.variance_series}),
              "born": ("Born weights: predicted vs observed", {})}
    return Outcome(rep, series, charts)


def _run_hartree_fock(cfg: RunConfig) -> Outcome:
    cc = _collapse_config(cfg)
    out = ch.hartree_fock_demo(cc, cfg.section("collapse")["q_list"])
    rep = {"experiment": cfg.experiment, "rows": out["rows"], "monotone": out["monotone"],
           "all_resolved_median": out["all_resolved_median"],
           "single_particle_unresolved_fraction": out["single_particle"].unresolved_fraction,
           "pass": bool(out["monotone"] and out["all_resolved_median"])}
    return Outcome(rep, {}, {})


def _run_covariance(cfg: RunConfig) -> Outcome:
    d = cfg.dim
    spec = nz.CovarianceSpec(d, list(cfg.matrices))
    modes = nz.diagonalize_covariance(spec)
    back = nz.reconstruct_covariance(modes, d, spec.channels_a)
    err = max(float(np.max(np.abs(b - c))) for b, c in zip(back, spec.matrices))
    rep = {"experiment": cfg.experiment, "reconstruction_error": err,
           "modes": [{"channel": m.channel, "lam": m.lam, "phi": _pairs(m.phi)} for m in modes],
           "pass": bool(err <= 1e-10 * max(1.0, max(float(np.max(np.abs(c))) for c in spec.matrices)))}
    return Outcome(rep, {}, {})


_RUNNERS = {
    "simulate-spatial": _run_simulate_spatial,
    "lindblad-spatial": _run_lindblad_spatial,
    "simulate-temporal": _run_simulate_temporal,
    "lindblad-temporal": _run_lindblad_temporal,
    "pairing-check": _run_pairing,
    "scaling-probe": _run_scaling,
    "collapse": _run_collapse,
    "hartree-fock": _run_hartree_fock,
    "covariance-diag": _run_covariance,
}


def run_experiment(cfg: RunConfig) -> Outcome:
    """Runs the configured experiment without writing files."""
    return _RUNNERS[cfg.experiment](cfg)


def write_outputs(cfg: RunConfig, outcome: Outcome, out_dir, svg: bool = False) -> list[Path]:
    """Writes report, series, config echo and charts; returns the written paths."""
    d = Path(out_dir)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise CollapseLabError("io-error", f"cannot create {str(d)!r}: {err}", _MODULE, path=str(d)) from err
    formats = cfg.section("output")["formats"]
    written = []
    cfg_path = d / "resolved-config.toml"
    _write(cfg_path, dump_config(cfg))
    written.append(cfg_path)
    if "json" in formats:
        p = d / "report.json"
        emit_report_json(outcome.report, p)
        written.append(p)
    if "csv" in formats:
        for name, series in outcome.series.items():
            p = d / f"{name}.csv"
            emit_series_csv(series, p)
            written.append(p)
    if svg or "svg" in formats:
        for name, (title, lines) in outcome.charts.items():
            if name == "born":
                lines = _born_lines(outcome.report)
                if not lines:
                    continue
                p = d / "born.svg"
                _write(p, _born_bars(lines, title))
            else:
                t = next(iter(outcome.series.values()))["t"]
                p = d / f"{name}.svg"
                _write(p, svg_chart(t, lines, title))
            written.append(p)
    return written


def _born_lines(report: dict) -> list:
    return [(r["eigenvalue"], r["predicted"], r["observed"]) for r in report.get("born_table", [])]


def _born_bars(rows: list, title: str, width: int = 480, height: int = 300) -> str:
    pad = 40
    bw = (width - 2 * pad) / max(1, len(rows))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    for k, (lam, pred, obs) in enumerate(rows):
        x = pad + k * bw
        for j, (v, col) in enumerate(((pred, "#888"), (obs, "#1f77b4"))):
            h = v * (height - 2 * pad)
            parts.append(f'<rect x="{x + 4 + j * bw / 2:.2f}" y="{height - pad - h:.2f}" width="{bw / 2 - 8:.2f}" '
                         f'height="{h:.2f}" fill="{col}"/>')
        parts.append(f'<text x="{x + bw / 2 - 10:.2f}" y="{height - pad + 14}" font-size="11">{lam:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def thread_cap() -> int:
    """Worker cap from ``COLLAPSE_LAB_THREADS`` (default 1).

    Ensembles run sequentially in a fixed reduction order, so any cap of at
    least one gives the same bytes; the value is validated and reported.
    """
    raw = os.environ.get("COLLAPSE_LAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CollapseLabError("usage-error", f"COLLAPSE_LAB_THREADS must be a positive integer, got {raw!r}",
                               _MODULE)
    return n


def error_report(err: CollapseLabError, seed) -> dict:
    det = to_jsonable_safe(err.detail)
    return {"error": {"code": err.code, "module": err.module or _MODULE, "message": str(err),
                      "seed": det.get("seeds", det.get("seed", seed)), "detail": det}}


def to_jsonable_safe(x):
    try:
        return to_jsonable(x)
    except TypeError:
        return {k: repr(v) for k, v in x.items()} if isinstance(x, dict) else repr(x)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="collapse-lab", description="Stochastic nonlocal potential experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", required=True, help="TOML configuration file")
    p.add_argument("--seed", type=int, help="override ensemble.base_seed")
    p.add_argument("--realizations", type=int, help="override ensemble.R")
    p.add_argument("--out", help="override output.directory")
    p.add_argument("--svg", action="store_true", help="also write SVG charts")
    return p


def main(argv=None) -> int:
    """Entry point; returns the exit status."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    seed = args.seed
    out_dir = args.out
    try:
        thread_cap()
        raw = _load_toml(args.config)
        # Deterministic experiments have no ensemble; the overrides do not apply.
        if "ensemble" in _SECTIONS_FOR[args.experiment]:
            if args.seed is not None:
                raw.setdefault("ensemble", {})["base_seed"] = args.seed
            if args.realizations is not None:
                raw.setdefault("ensemble", {})["R"] = args.realizations
        if args.out is not None:
            raw.setdefault("output", {})["directory"] = args.out
        cfg = resolve_config(raw, args.experiment)
        seed = cfg.base_seed
        out_dir = cfg.section("output")["directory"]
        outcome = run_experiment(cfg)
        write_outputs(cfg, outcome, out_dir, args.svg)
    except CollapseLabError as err:
        rep = error_report(err, seed)
        text = report_json(rep)
        sys.stderr.write(text)
        if out_dir is not None:
            try:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                _write(Path(out_dir) / "error.json", text)
            except (OSError, CollapseLabError):
                pass
        return EXIT_CONFIG if err.code in CONFIG_CODES else EXIT_RUNTIME
    status = "PASS" if outcome.passed else "FAIL"
    sys.stdout.write(f"{cfg.experiment}: {status} ({out_dir})\n")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
