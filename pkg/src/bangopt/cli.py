"""Command-line driver: ``bangopt <command> --config run.json [--key value ...]``.

Every run writes ``<output>.csv`` plus a JSON sidecar ``<output>.json``
holding the full effective configuration, the resolved seed, the modelling
constants and the library versions.  Scans append rows as grid points
finish, so an interrupted run resumes without recomputing them.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from bangopt import evolution, experiments, optimizers, protocols
from bangopt.models import critical_gap, lmg_problem, lz_problem
from bangopt.protocols import Crab, ProtocolFamily

log = logging.getLogger("bangopt")

COMMANDS = (
    "optimize", "scan-tau", "scan-size", "scan-gmax", "saturated-scan",
    "constant-scan", "gap", "fit-scaling", "trajectory",
)
EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG = 0, 1, 2
RECORD_COLUMNS = ("model", "N", "tau", "g_max", "family", "fidelity", "seed", "precision_limited")
MODEL_DEFAULTS = {"lz": dict(g0=-5.0, g1=0.0, g_max=10.0), "lmg": dict(g0=0.0, g1=1.0, g_max=1.7)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str
    default: object = None
    doc: str = ""


SCHEMA = {
    "model": Key("str", "lz", "lz or lmg"),
    "N": Key("int", 50, "number of spins (lmg)"),
    "N_list": Key("ints", None, "system sizes for scan-size (default 16..2048) and gap (default [N])"),
    "g0": Key("float", None, "initial coupling (model default if absent)"),
    "g1": Key("float", None, "target coupling (model default if absent)"),
    "g_max": Key("float", None, "bound on |g(t)| (model default if absent)"),
    "g_max_list": Key("floats", [2.0, 4.0, 6.0, 8.0], "bounds for scan-gmax and saturated-scan"),
    "sector": Key("str", None, "lmg parity sector for the dynamics: even, odd or absent"),
    "family": Key("str", "double-bang", "protocol family, e.g. double-bang, n-bang(3), crab(4)"),
    "tau": Key("float", None, "protocol duration (optimize, trajectory)"),
    "taus": Key("floats", None, "duration grid: list, 'a,b,c' or 'start:stop:step'"),
    "restarts": Key("int", None, "optimizer restarts (family default if absent)"),
    "seed": Key("int", None, "master seed; drawn from entropy and recorded if absent"),
    "method": Key("str", None, "powell or nelder-mead (family default if absent)"),
    "maxfev": Key("int", None, "evaluation budget per restart (family default if absent)"),
    "xatol": Key("float", optimizers.XATOL, "parameter tolerance"),
    "fatol": Key("float", optimizers.FATOL, "objective tolerance"),
    "sampled_tol": Key("float", evolution.DEFAULT_TOL, "slice-convergence tolerance"),
    "sampled_rtol": Key("float", optimizers.SAMPLED_RTOL, "relative slice-convergence tolerance during optimization"),
    "jitter": Key("float", optimizers.CRAB_JITTER, "CRAB starting-point jitter"),
    "initial_step": Key("float", optimizers.INITIAL_STEP, "Nelder-Mead simplex size as a fraction of the box"),
    "stop_at": Key("float", None, "stop restarting once this fidelity is reached"),
    "history": Key("bool", False, "write the best-so-far history (optimize)"),
    "level": Key("float", experiments.THRESHOLD_LEVEL, "fidelity level defining tau*"),
    "tau_start": Key("float", 0.5, "first duration of the coarse scan (scan-size)"),
    "growth": Key("float", 1.25, "coarse-scan ratio (scan-size)"),
    "rel_width": Key("float", 1e-3, "bisection relative width (scan-size)"),
    "kink_span": Key("floats", [0.75, 1.35], "kink grid as multiples of the threshold time"),
    "kink_points": Key("int", 31, "kink grid size"),
    "fractions": Key("floats", "0:1:0.01", "switch fractions for saturated-scan"),
    "g_list": Key("floats", "0:1.7:0.05", "constant values for constant-scan"),
    "map_level": Key("float", 0.99, "fidelity level for minimal times read off maps"),
    "params": Key("floats", None, "protocol parameters for trajectory (optimized if absent)"),
    "frequencies": Key("floats", None, "CRAB frequencies matching params (trajectory)"),
    "samples": Key("int", 101, "trajectory samples"),
    "input": Key("str", None, "CSV to fit (fit-scaling)"),
    "criterion": Key("str", "threshold", "threshold or kink (fit-scaling)"),
    "output": Key("str", None, "output path prefix (default bangopt-<command>)"),
    "workers": Key("int", None, "worker processes (default: available CPUs)"),
    "resume": Key("bool", True, "reuse completed grid points of an earlier run"),
}

# settings that do not affect any result; a resumed run may change them freely
_VOLATILE = ("workers", "resume", "output")


# config handling


def _parse_floats(value, key):
    if isinstance(value, str):
        text = value.strip()
        if text.startswith("["):
            value = json.loads(text)
        elif text.count(":") == 2:
            start, stop, step = (float(v) for v in text.split(":"))
            if step <= 0 or stop < start:
                raise ConfigError(f"{key}: range needs start <= stop and a positive step")
            n = int(np.floor((stop - start) / step + 1e-9)) + 1
            return [round(start + i * step, 12) for i in range(n)]
        else:
            value = [v for v in text.split(",") if v.strip()]
    if np.ndim(value) == 0:
        value = [value]
    return [float(v) for v in value]


def _convert(key, value):
    kind = SCHEMA[key].kind
    if value is None:
        return None
    try:
        if kind == "int":
            if isinstance(value, bool):
                raise ValueError
            if isinstance(value, int):
                return value
            try:
                # exact for large seeds, which do not survive a trip through float
                return int(str(value).strip())
            except ValueError:
                if float(value) != int(float(value)):
                    raise
                return int(float(value))
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).lower()
            if text not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return text in ("true", "1", "yes")
        if kind == "floats":
            return _parse_floats(value, key)
        if kind == "ints":
            out = _parse_floats(value, key)
            if any(v != int(v) for v in out):
                raise ValueError
            return [int(v) for v in out]
        return str(value)
    except ConfigError:
        raise
    except (TypeError, ValueError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot read {value!r} as {kind}") from None


def load_config(command: str, path=None, overrides=None) -> dict:
    """Merge defaults, the JSON file and command-line overrides (flags win)."""
    if command not in COMMANDS:
        raise ConfigError(f"command: unknown {command!r}; valid: {', '.join(COMMANDS)}")
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc.msg})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        raw.pop("command", None)
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown config key")
    cfg = {key: _convert(key, raw.get(key, spec.default)) for key, spec in SCHEMA.items()}
    cfg["command"] = command
    validate(cfg)
    return cfg


def _require(cfg, key):
    if cfg[key] is None:
        raise ConfigError(f"{key}: required for {cfg['command']}")
    return cfg[key]


def validate(cfg: dict) -> None:
    """Check every field the command uses and fill model-dependent defaults."""
    cmd = cfg["command"]
    if cfg["model"] not in MODEL_DEFAULTS:
        raise ConfigError(f"model: must be one of {', '.join(MODEL_DEFAULTS)}, got {cfg['model']!r}")
    for key, value in MODEL_DEFAULTS[cfg["model"]].items():
        if cfg[key] is None:
            cfg[key] = value
    if cfg["model"] == "lmg" or cmd in ("scan-size", "scan-gmax", "saturated-scan", "constant-scan", "gap"):
        if cfg["N"] < 2:
            raise ConfigError(f"N: needs at least 2 spins, got {cfg['N']}")
    if cfg["sector"] not in (None, "even", "odd"):
        raise ConfigError(f"sector: must be even, odd or absent, got {cfg['sector']!r}")
    if not cfg["g_max"] > 0:
        raise ConfigError(f"g_max: must be positive, got {cfg['g_max']}")
    for key in ("g0", "g1"):
        if abs(cfg[key]) > cfg["g_max"] and cmd not in ("gap", "constant-scan", "saturated-scan", "scan-gmax"):
            raise ConfigError(f"{key}: |{key}| = {abs(cfg[key])} exceeds g_max = {cfg['g_max']}")
    try:
        family = ProtocolFamily.parse(cfg["family"])
    except ValueError as exc:
        raise ConfigError(f"family: {exc}") from None
    cfg["family"] = str(family)
    if cfg["method"] is not None and cfg["method"].lower() not in ("powell", "nelder-mead"):
        raise ConfigError(f"method: must be powell or nelder-mead, got {cfg['method']!r}")
    for key in ("restarts", "maxfev", "kink_points", "samples", "workers"):
        if cfg[key] is not None and cfg[key] < 1:
            raise ConfigError(f"{key}: must be >= 1, got {cfg[key]}")
    for key in ("xatol", "fatol", "sampled_tol", "rel_width", "tau_start"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key}: must be positive, got {cfg[key]}")
    if cfg["sampled_rtol"] < 0 or cfg["jitter"] < 0 or cfg["initial_step"] <= 0:
        raise ConfigError("sampled_rtol/jitter: must be >= 0; initial_step: must be positive")
    if not cfg["growth"] > 1:
        raise ConfigError(f"growth: must exceed 1, got {cfg['growth']}")
    for key in ("level", "map_level"):
        if not 0 < cfg[key] < 1:
            raise ConfigError(f"{key}: must lie in (0, 1), got {cfg[key]}")
    if cfg["criterion"] not in ("threshold", "kink"):
        raise ConfigError(f"criterion: must be threshold or kink, got {cfg['criterion']!r}")
    if len(cfg["kink_span"]) != 2 or not 0 < cfg["kink_span"][0] < cfg["kink_span"][1]:
        raise ConfigError("kink_span: needs two increasing positive multiples")
    if cmd in ("optimize", "trajectory"):
        if not _require(cfg, "tau") > 0:
            raise ConfigError(f"tau: must be positive, got {cfg['tau']}")
    if cmd in ("scan-tau", "scan-gmax", "saturated-scan", "constant-scan"):
        taus = np.asarray(_require(cfg, "taus"))
        if taus.size == 0 or np.any(taus <= 0) or np.any(np.diff(taus) <= 0):
            raise ConfigError("taus: must be a nonempty, positive, strictly ascending grid")
    if cmd in ("scan-gmax", "saturated-scan"):
        gl = cfg["g_max_list"]
        if not gl or any(g <= 0 for g in gl):
            raise ConfigError("g_max_list: must be a nonempty list of positive bounds")
        if cmd == "scan-gmax":
            for g in gl:
                if abs(cfg["g0"]) > g or abs(cfg["g1"]) > g:
                    raise ConfigError(f"g_max_list: bound {g} is below |g0| or |g1|")
    if cmd == "saturated-scan":
        fr = cfg["fractions"]
        if not fr or any(not 0 <= f <= 1 for f in fr):
            raise ConfigError("fractions: must be a nonempty list within [0, 1]")
    if cmd == "constant-scan" and not cfg["g_list"]:
        raise ConfigError("g_list: must be nonempty")
    if cmd in ("scan-size", "gap"):
        if cfg["N_list"] is None:
            cfg["N_list"] = list(experiments.DEFAULT_N_LIST) if cmd == "scan-size" else [cfg["N"]]
        nl = cfg["N_list"]
        if not nl or any(n < 2 for n in nl) or np.any(np.diff(nl) <= 0):
            raise ConfigError("N_list: must be ascending with every N >= 2")
    if cmd in ("scan-size", "scan-gmax", "saturated-scan", "constant-scan", "gap") and cfg["model"] != "lmg":
        raise ConfigError(f"model: {cmd} needs model lmg")
    if cmd == "fit-scaling":
        path = Path(_require(cfg, "input"))
        if not path.is_file():
            raise ConfigError(f"input: no such file {path}")
    if cmd == "trajectory" and cfg["params"] is not None:
        tmpl = family.template(_problem(cfg), cfg["tau"])
        need = tmpl.parameters()[0].size
        if len(cfg["params"]) != need:
            raise ConfigError(f"params: {cfg['family']} needs {need} parameters, got {len(cfg['params'])}")
        if family.is_crab and (cfg["frequencies"] is None or len(cfg["frequencies"]) != family.size):
            raise ConfigError(f"frequencies: {cfg['family']} needs {family.size} frequencies with params")
    if cfg["output"] is None:
        cfg["output"] = f"bangopt-{cmd}"


def resolve_seed(cfg: dict) -> tuple[int, str]:
    """The configured seed (0 included), or a fresh one drawn from OS entropy."""
    if cfg.get("seed") is not None:
        return int(cfg["seed"]), "config"
    return int(np.random.SeedSequence().entropy % 2**63), "entropy"


def resolve_workers(cfg: dict) -> int:
    env = os.environ.get("BANGOPT_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"BANGOPT_WORKERS: not an integer: {env!r}") from None
        if n < 1:
            raise ConfigError(f"BANGOPT_WORKERS: must be >= 1, got {n}")
        return n
    if cfg.get("workers"):
        return int(cfg["workers"])
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _problem(cfg, g_max=None):
    g_max = cfg["g_max"] if g_max is None else g_max
    if cfg["model"] == "lz":
        return lz_problem(cfg["g0"], cfg["g1"], g_max)
    return lmg_problem(cfg["N"], cfg["g0"], cfg["g1"], g_max, sector=cfg["sector"])


def _optimizer_options(cfg) -> dict:
    return dict(
        method=cfg["method"], maxfev=cfg["maxfev"], xatol=cfg["xatol"], fatol=cfg["fatol"],
        sampled_tol=cfg["sampled_tol"], sampled_rtol=cfg["sampled_rtol"], jitter=cfg["jitter"],
        initial_step=cfg["initial_step"], stop_at=cfg["stop_at"],
    )


# output


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _param_count(cfg) -> int:
    family = ProtocolFamily.parse(cfg["family"])
    problem = _problem(cfg, max(cfg["g_max_list"]) if cfg["command"] == "scan-gmax" else None)
    n = family.template(problem, 1.0).parameters()[0].size
    return n + (family.size if family.is_crab else 0)


def record_row(rec: experiments.ScanRecord) -> list:
    return [rec.model, rec.N, rec.tau, rec.g_max, rec.family, rec.fidelity, rec.seed,
            rec.precision_limited, *rec.params()]


def record_header(n_params: int) -> list:
    return [*RECORD_COLUMNS, *(f"p{i}" for i in range(n_params))]


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


class RowWriter:
    """Single appending CSV writer keyed by grid point, with resume support."""

    def __init__(self, path: Path, header, key_columns, resume: bool):
        self.path = path
        self.header = list(header)
        self.key_idx = [self.header.index(k) for k in key_columns]
        self.rows = {}
        if resume and path.exists():
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                if next(reader, None) == self.header:
                    for row in reader:
                        if len(row) == len(self.header):
                            self.rows[self.key(row)] = row
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(self.header)
        for row in self.rows.values():
            self._w.writerow(row)
        self._fh.flush()

    def key(self, row) -> tuple:
        return tuple(float(row[i]) if _is_number(row[i]) else row[i] for i in self.key_idx)

    def __contains__(self, key) -> bool:
        return tuple(float(k) for k in key) in self.rows

    def add(self, row) -> None:
        row = [_fmt(v) for v in row]
        self.rows[self.key(row)] = row
        self._w.writerow(row)
        self._fh.flush()

    def finish(self, sort_key=None) -> None:
        """Rewrite the file in canonical grid order."""
        self._fh.close()
        rows = sorted(self.rows.values(), key=sort_key or self.key)
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.header)
            w.writerows(rows)


def _is_number(text) -> bool:
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False


def _versions() -> dict:
    import numba
    import scipy

    from bangopt import __version__

    return dict(python=platform.python_version(), numpy=np.__version__, scipy=scipy.__version__,
                numba=numba.__version__, bangopt=__version__)


def _decisions(cfg) -> dict:
    family = ProtocolFamily.parse(cfg["family"])
    defaults = optimizers.CRAB_DEFAULTS if family.is_crab else optimizers.BANG_DEFAULTS
    return dict(
        crab_envelope="b(t) = c t (t - tau), c = 4 / tau^2",
        crab_base_frequency="omega0 = 1 / tau, omega_n = 2 pi n omega0 (1 + xi_n), xi_n ~ U[-1/2, 1/2]",
        crab_coefficient_bound=protocols.CRAB_COEFF_BOUND,
        bound_enforcement="pointwise clamp of g(t) to [-g_max, g_max]",
        objective="1 - F",
        bang_starts="uniform in the parameter box",
        crab_starts="zero coefficients plus gaussian jitter",
        effective_method=cfg["method"] or defaults["method"],
        effective_restarts=cfg["restarts"] or defaults["restarts"],
        effective_maxfev=cfg["maxfev"] or defaults["maxfev"],
        precision_floor=evolution.PRECISION_FLOOR,
        sampled_evolution="midpoint slices doubled from 64 until the fidelity change < max(tol, rtol (1 - F))",
        lmg_basis="Dicke states ordered by decreasing S_z",
    )


def write_sidecar(cfg, seed, source, results, wall_time, outputs, status="complete") -> Path:
    """Write ``<output>.json``; a ``running`` sidecar marks a scan that may be resumed."""
    path = Path(cfg["output"] + ".json")
    effective = {k: v for k, v in cfg.items()}
    effective["seed"] = seed
    doc = dict(
        command=cfg["command"], status=status, config=effective, seed=seed, seed_source=source,
        decisions=_decisions(cfg), versions=_versions(), outputs=outputs,
        results=results, wall_time_seconds=wall_time,
    )
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _previous_run(cfg) -> dict:
    path = Path(cfg["output"] + ".json")
    if not cfg["resume"] or not path.exists():
        return {}
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return {}


def _check_resume(cfg, seed, old):
    """Refuse to mix rows from a run with different settings."""
    if not old:
        return
    old = old.get("config", {})
    for key, value in cfg.items():
        if key in _VOLATILE:
            continue
        if key == "seed":
            value = seed
        if _jsonable(old.get(key)) != _jsonable(value):
            raise ConfigError(
                f"{key}: differs from the earlier run at {cfg['output']}; set resume false or change output"
            )


# commands


def _run_grid(cfg, seed, points, make_problem, writer, workers):
    """Optimize every pending ``(g_max, tau)`` point; rows go through ``writer`` as they finish."""
    family = cfg["family"]
    opts = _optimizer_options(cfg)
    pending = [p for p in points if p not in writer]
    log.info("%d grid points, %d already done", len(points), len(points) - len(pending))
    if workers <= 1 or len(pending) <= 1:
        for g_max, tau in pending:
            rec = experiments.optimize_point(make_problem(g_max), family, tau, cfg["restarts"], seed, **opts)
            writer.add(record_row(rec))
            log.info("g_max=%g tau=%g F=%.12f", g_max, tau, rec.fidelity)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(experiments.optimize_point, make_problem(g), family, t, cfg["restarts"], seed, **opts)
            for g, t in pending
        ]
        for fut in as_completed(futures):
            rec = fut.result()
            writer.add(record_row(rec))
            log.info("g_max=%g tau=%g F=%.12f", rec.g_max, rec.tau, rec.fidelity)


def _record_writer(cfg):
    path = Path(cfg["output"] + ".csv")
    return RowWriter(path, record_header(_param_count(cfg)), ("g_max", "tau"), cfg["resume"])


def _summary_from_rows(rows, header):
    fi = header.index("fidelity")
    ti = header.index("tau")
    return [(float(r[ti]), float(r[fi])) for r in rows]


def cmd_optimize(cfg, seed, workers):
    problem = _problem(cfg)
    res = optimizers.optimize_protocol(
        problem, cfg["family"], cfg["tau"], cfg["restarts"], seed,
        record_history=cfg["history"], **_optimizer_options(cfg),
    )
    rec = experiments.record_from_result(problem, res, cfg["tau"])
    csv_path = Path(cfg["output"] + ".csv")
    write_csv(csv_path, record_header(len(rec.params())), [record_row(rec)])
    outputs = {"records": str(csv_path)}
    if cfg["history"]:
        hist = Path(cfg["output"] + "_history.csv")
        write_csv(hist, ["evaluation", "best_fidelity"], res.history)
        outputs["history"] = str(hist)
    f, flagged = evolution.report_fidelity(res.best_fidelity)
    print(f"F = {f:.15f}{' (precision limited)' if flagged else ''}  1-F = {1 - res.best_fidelity:.3e}")
    print(f"x = {np.array2string(res.best_x, precision=10)}")
    results = dict(
        best_fidelity=f, raw_fidelity=res.best_fidelity, infidelity=1 - res.best_fidelity,
        precision_limited=flagged, best_x=res.best_x, evaluations=res.evaluations,
        restarts_used=res.restarts_used, best_restart=res.best_restart,
        exhausted_restarts=res.exhausted_restarts, settings=res.settings,
        protocol=repr(res.protocol), optimizer_wall_time_seconds=res.wall_time,
    )
    return results, outputs


def cmd_scan_tau(cfg, seed, workers):
    writer = _record_writer(cfg)
    points = [(cfg["g_max"], t) for t in cfg["taus"]]
    _run_grid(cfg, seed, points, lambda g: _problem(cfg, g), writer, workers)
    writer.finish()
    curve = _summary_from_rows(writer.rows.values(), writer.header)
    curve.sort()
    results = dict(curve=curve)
    for crit in ("threshold", "kink"):
        try:
            results[f"tau_star_{crit}"] = experiments.extract_tau_star(curve, crit, cfg["level"])._asdict()
        except ValueError as exc:
            results[f"tau_star_{crit}"] = str(exc)
    for t, f in curve:
        print(f"tau = {t:<10g} F = {f:.12f}")
    return results, {"records": str(writer.path)}


def cmd_scan_gmax(cfg, seed, workers):
    writer = _record_writer(cfg)
    points = [(g, t) for g in cfg["g_max_list"] for t in cfg["taus"]]
    _run_grid(cfg, seed, points, lambda g: _problem(cfg, g), writer, workers)
    writer.finish()
    results = {}
    header = writer.header
    for g in cfg["g_max_list"]:
        rows = [r for r in writer.rows.values() if float(r[header.index("g_max")]) == g]
        curve = sorted(_summary_from_rows(rows, header))
        try:
            star = experiments.extract_tau_star(curve, "threshold", cfg["level"]).tau
        except ValueError as exc:
            star = str(exc)
        results[str(g)] = dict(tau_star_threshold=star, max_fidelity=max(f for _, f in curve))
        print(f"g_max = {g:<6g} tau* = {star}")
    return results, {"records": str(writer.path)}


def cmd_scan_size(cfg, seed, workers):
    path = Path(cfg["output"] + ".csv")
    sizes_path = Path(cfg["output"] + "_sizes.csv")
    n_params = _param_count(cfg)
    header = record_header(n_params) + ["stage"]
    writer = RowWriter(path, header, ("N", "tau", "stage"), cfg["resume"])
    sizes_header = ["N", "gap", "tau_threshold", "tau_kink", "kink_spacing"]
    done = {}
    if cfg["resume"] and sizes_path.exists():
        with open(sizes_path, newline="") as fh:
            for row in csv.DictReader(fh):
                done[int(row["N"])] = row
    todo = [n for n in cfg["N_list"] if n not in done]
    study_kw = dict(
        g_max=cfg["g_max"], family=cfg["family"], restarts=cfg["restarts"], seed=seed,
        level=cfg["level"], tau_start=cfg["tau_start"], growth=cfg["growth"],
        rel_width=cfg["rel_width"], kink_span=tuple(cfg["kink_span"]),
        kink_points=cfg["kink_points"], sector=cfg["sector"] or "even", **_optimizer_options(cfg),
    )

    def store(size):
        for stage, recs in (("bracket", size.records), ("kink", size.kink_records)):
            for rec in recs:
                writer.add(record_row(rec) + [stage])
        done[size.N] = dict(N=size.N, gap=size.gap, tau_threshold=size.threshold.tau,
                            tau_kink=size.kink.tau, kink_spacing=size.kink.spacing)
        write_csv(sizes_path, sizes_header,
                  [[done[n][k] for k in sizes_header] for n in sorted(done)])
        log.info("N=%d done: tau*=%.5g (threshold) %.5g (kink)", size.N, size.threshold.tau, size.kink.tau)

    for chunk in ([todo] if workers > 1 else [[n] for n in todo]):
        if not chunk:
            continue
        study = experiments.scaling_study(chunk, workers=workers, **study_kw)
        for size in study.sizes:
            store(size)
    writer.finish(sort_key=lambda r: (int(r[1]), r[-1], float(r[2])))
    Ns = [n for n in cfg["N_list"]]
    fits = {}
    for crit in ("threshold", "kink"):
        y = [float(done[n]["tau_" + crit]) * float(done[n]["gap"]) for n in Ns]
        fits[crit] = experiments.fit_power_law(Ns, y)
    combined = np.hypot(fits["threshold"].standard_error, fits["kink"].standard_error)
    agree = abs(fits["threshold"].alpha - fits["kink"].alpha) <= combined
    fit_path = Path(cfg["output"] + "_fit.json")
    fit_doc = {c: f.to_dict() for c, f in fits.items()}
    fit_doc["criteria_agree_within_standard_errors"] = bool(agree)
    fit_path.write_text(json.dumps(_jsonable(fit_doc), indent=2, sort_keys=True) + "\n")
    for crit, f in fits.items():
        print(f"alpha ({crit}) = {f.alpha:.4f} +/- {f.standard_error:.4f}")
    return fit_doc, {"records": str(path), "sizes": str(sizes_path), "fit": str(fit_path)}


def cmd_saturated_scan(cfg, seed, workers):
    path = Path(cfg["output"] + ".csv")
    rows, stars = [], {}
    for g in cfg["g_max_list"]:
        fmap = experiments.saturated_scan(cfg["N"], g, cfg["taus"], cfg["fractions"], cfg["sector"])
        for i, t in enumerate(fmap.taus):
            for j, fr in enumerate(fmap.columns):
                rows.append([g, t, fr, fmap.values[i, j]])
        try:
            stars[g] = experiments.min_time_from_map(fmap, cfg["map_level"])
        except ValueError as exc:
            stars[g] = str(exc)
        print(f"g_max = {g:<6g} tau* = {stars[g]}")
    write_csv(path, ["g_max", "tau", "t1_fraction", "fidelity"], rows)
    results = {"tau_star": {str(g): s for g, s in stars.items()}}
    numeric = [(g, s) for g, s in stars.items() if not isinstance(s, str)]
    if len(numeric) >= 2:
        fit = experiments.fit_power_law(*zip(*numeric))
        results["fit"] = dict(a=fit.amplitude, b=fit.slope, standard_error=fit.standard_error)
        print(f"tau* = {fit.amplitude:.4f} g_max^{fit.slope:.4f}")
    return results, {"map": str(path)}


def cmd_constant_scan(cfg, seed, workers):
    path = Path(cfg["output"] + ".csv")
    fmap = experiments.constant_scan(cfg["N"], cfg["g_list"], cfg["taus"], cfg["sector"])
    rows = [[g, t, fmap.values[i, j]] for j, g in enumerate(fmap.columns) for i, t in enumerate(fmap.taus)]
    write_csv(path, ["g", "tau", "fidelity"], rows)
    best = fmap.values.max(axis=0)
    above = fmap.columns[best > cfg["map_level"]]
    results = dict(
        best_per_g={repr(float(g)): float(b) for g, b in zip(fmap.columns, best)},
        g_above_level=above, best_g=float(fmap.columns[np.argmax(best)]),
    )
    print(f"best g = {results['best_g']:g}; F > {cfg['map_level']} for g in {list(map(float, above))}")
    return results, {"map": str(path)}


def cmd_gap(cfg, seed, workers):
    Ns = cfg["N_list"]
    rows = [["lmg", n, critical_gap(n)] for n in Ns]
    path = Path(cfg["output"] + ".csv")
    write_csv(path, ["model", "N", "gap"], rows)
    for _, n, gap in rows:
        print(f"N = {n:<6d} gap = {gap!r}")
    results = dict(gaps={str(n): g for _, n, g in rows})
    if len(rows) >= 2:
        fit = experiments.fit_power_law(Ns, [r[2] for r in rows])
        results["slope"] = fit.slope
        results["standard_error"] = fit.standard_error
        print(f"gap ~ N^{fit.slope:.4f}")
    return results, {"gaps": str(path)}


def cmd_fit_scaling(cfg, seed, workers):
    with open(cfg["input"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"input: {cfg['input']} has no data rows")
    cols = rows[0].keys()
    if {"x", "y"} <= cols:
        x = [float(r["x"]) for r in rows]
        y = [float(r["y"]) for r in rows]
    elif {"N", "gap", f"tau_{cfg['criterion']}"} <= cols:
        x = [float(r["N"]) for r in rows]
        y = [float(r[f"tau_{cfg['criterion']}"]) * float(r["gap"]) for r in rows]
    else:
        raise ConfigError(f"input: needs columns x,y or N,gap,tau_{cfg['criterion']}")
    fit = experiments.fit_power_law(x, y)
    path = Path(cfg["output"] + "_fit.json")
    path.write_text(json.dumps(_jsonable(fit.to_dict()), indent=2, sort_keys=True) + "\n")
    write_csv(Path(cfg["output"] + ".csv"), ["x", "y"], fit.points)
    print(f"alpha = {fit.alpha:.6f} +/- {fit.standard_error:.6f} (least-squares), amplitude = {fit.amplitude:.6g}")
    return fit.to_dict(), {"fit": str(path), "points": cfg["output"] + ".csv"}


def cmd_trajectory(cfg, seed, workers):
    problem = _problem(cfg)
    family = ProtocolFamily.parse(cfg["family"])
    if cfg["params"] is None:
        res = optimizers.optimize_protocol(problem, family, cfg["tau"], cfg["restarts"], seed,
                                           **_optimizer_options(cfg))
        p = res.protocol
    else:
        p = family.template(problem, cfg["tau"])
        if family.is_crab:
            from dataclasses import replace

            p = replace(p, frequencies=tuple(cfg["frequencies"]))
        p = p.with_parameters(cfg["params"])
    states = evolution.trajectory(problem, p, cfg["samples"], cfg["sampled_tol"])
    header = ["t", "fidelity"]
    dim = problem.dim
    header += [f"{part}{i}" for i in range(dim) for part in ("re", "im")]
    if dim == 2:
        header += ["bloch_x", "bloch_y", "bloch_z"]
    rows = []
    for t, psi in states:
        amp = psi.amplitudes
        row = [t, evolution.fidelity(psi, problem.target_state)]
        row += [v for a in amp for v in (a.real, a.imag)]
        if dim == 2:
            row += list(evolution.bloch_vector(psi))
        rows.append(row)
    path = Path(cfg["output"] + ".csv")
    write_csv(path, header, rows)
    final = rows[-1][1]
    print(f"final F = {final:.15f}")
    params = p.parameters()[0]
    results = dict(final_fidelity=final, params=params, protocol=repr(p))
    if isinstance(p, Crab):
        results["frequencies"] = p.frequencies
    return results, {"trajectory": str(path)}


HANDLERS = {
    "optimize": cmd_optimize, "scan-tau": cmd_scan_tau, "scan-size": cmd_scan_size,
    "scan-gmax": cmd_scan_gmax, "saturated-scan": cmd_saturated_scan,
    "constant-scan": cmd_constant_scan, "gap": cmd_gap, "fit-scaling": cmd_fit_scaling,
    "trajectory": cmd_trajectory,
}


def run(cfg: dict) -> int:
    """Execute a validated configuration; returns the exit status."""
    try:
        seed, source = resolve_seed(cfg)
        workers = resolve_workers(cfg)
        Path(cfg["output"]).parent.mkdir(parents=True, exist_ok=True)
        if cfg["command"] in ("scan-tau", "scan-gmax", "scan-size"):
            old = _previous_run(cfg)
            if cfg["seed"] is None and "seed" in old:
                # an entropy seed from the interrupted run keeps the resumed rows consistent
                seed, source = int(old["seed"]), old.get("seed_source", "entropy")
            _check_resume(cfg, seed, old)
            write_sidecar(cfg, seed, source, None, None, {}, status="running")
        start = time.perf_counter()
        results, outputs = HANDLERS[cfg["command"]](cfg, seed, workers)
        write_sidecar(cfg, seed, source, results, time.perf_counter() - start, outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bangopt",
        description="Optimize bang-bang and CRAB protocols for ground-state preparation.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with configuration keys")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    keys = parser.add_argument_group("configuration keys (override the file)")
    for key, spec in SCHEMA.items():
        flags = [f"--{key}"]
        if "_" in key:
            flags.append(f"--{key.replace('_', '-')}")
        keys.add_argument(*flags, dest=f"key_{key}", default=None, metavar=spec.kind.upper(), help=spec.doc)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(message)s"
    )
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
    try:
        cfg = load_config(args.command, args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
