"""Experiment configs, the dispatcher, and report serialisation.

A config names a path, a functional, a partition ladder and an experiment
kind.  ``run_experiment`` returns a :class:`ConvergenceReport` whose rows are
one per level (or per dyadic scale for the remainder kinds).  Reports are
deterministic functions of the config: no timestamps, fixed key order, floats
written with full precision.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from . import calculus as calc
from . import functionals as fn
from . import partitions as parts
from .paths import (ParameterError, SampledPath, generate_brownian, generate_constant, generate_fbm,
                    generate_smooth, holder_estimate, load_path)

KINDS = ("qv", "isometry", "isometry_lebesgue", "uniqueness", "change_of_variable", "remainder",
         "expansion", "decomposition", "ito_mc", "assumptions")

CSV_COLUMNS = ("n", "mesh", "osc", "foscill_max", "lhs", "rhs", "gap", "value_along_approx",
               "value_along_path", "qv_T", "residual")

DEFAULT_M = 2 ** 20
DEFAULT_LADDER = (6, 16)

DEFAULT_TOLERANCES = {
    "qv": {},
    "isometry": {"rel_gap": 0.10, "abs_gap": 1e-12},
    "isometry_lebesgue": {"rel_gap": 0.15, "abs_gap": 1e-12},
    "uniqueness": {"rel_diff": 1e-2},
    "change_of_variable": {"residual": 1e-2},
    "remainder": {"slack": 0.15},
    "expansion": {"slack": 0.2},
    "decomposition": {"qv_ratio": 1e-3},
    "ito_mc": {"stderr_mult": 2.0},
    "assumptions": {},
}


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` is the dotted path of the culprit."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def max_workers(requested: int = 1) -> int:
    cap = os.environ.get("FQV_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


# -- config -----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    kind: str
    path: Dict[str, Any] = field(default_factory=lambda: {"generator": "brownian", "seed": 42})
    functional: Any = "identity"
    partition: Dict[str, Any] = field(default_factory=lambda: {"kind": "dyadic", "n_min": 6, "n_max": 16})
    tolerances: Dict[str, float] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"unknown experiment kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if not isinstance(self.path, dict) or "generator" not in self.path:
            raise ConfigError("path.generator", "missing")
        gen = self.path["generator"]
        if gen not in PATH_GENERATORS:
            raise ConfigError("path.generator", f"unknown generator {gen!r}; choose from {sorted(PATH_GENERATORS)}")
        try:
            self.functional_obj()
        except ParameterError as exc:
            raise ConfigError("functional", str(exc)) from None
        pk = self.partition.get("kind", "dyadic")
        if pk not in ("dyadic", "lebesgue"):
            raise ConfigError("partition.kind", f"must be dyadic or lebesgue, got {pk!r}")
        for key in ("n_min", "n_max"):
            if key in self.partition and not isinstance(self.partition[key], int):
                raise ConfigError(f"partition.{key}", "must be an integer")
        lo, hi = self.ladder()
        if hi < lo:
            raise ConfigError("partition.n_max", f"n_max={hi} below n_min={lo}")
        M = self.grid()
        if pk == "dyadic" and M % (2 ** hi):
            raise ConfigError("partition.n_max", f"2^{hi} does not divide grid size M={M}")
        for name, val in self.tolerances.items():
            if not isinstance(val, (int, float)):
                raise ConfigError(f"tolerances.{name}", "must be a number")

    def grid(self) -> int:
        return int(self.path.get("M", DEFAULT_M))

    def horizon(self) -> float:
        return float(self.path.get("T", 1.0))

    def ladder(self):
        return int(self.partition.get("n_min", DEFAULT_LADDER[0])), int(self.partition.get("n_max", DEFAULT_LADDER[1]))

    def functional_obj(self) -> fn.Functional:
        return fn.from_spec(self.functional)

    def tol(self, name: str) -> float:
        return float(self.tolerances.get(name, DEFAULT_TOLERANCES[self.kind].get(name, math.nan)))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "path": self.path,
            "functional": self.functional,
            "partition": self.partition,
            "tolerances": self.tolerances,
            "options": self.options,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        if not isinstance(obj, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = set(obj) - {"kind", "path", "functional", "partition", "tolerances", "options"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        if "kind" not in obj:
            raise ConfigError("kind", "missing")
        return cls(**copy.deepcopy(obj))


# -- paths from specs -----------------------------------------------------------


def _brownian(p, M, T):
    return generate_brownian(int(p.get("dim", 1)), T, M, int(p.get("seed", 0)))


def _fbm(p, M, T):
    return generate_fbm(int(p.get("dim", 1)), float(p.get("H", 0.5)), T, M, int(p.get("seed", 0)))


def _constant(p, M, T):
    return generate_constant(int(p.get("dim", 1)), T, M, float(p.get("level", 0.0)))


def _linear(p, M, T):
    return generate_smooth(int(p.get("dim", 1)), T, M, {"poly": [0.0, float(p.get("slope", 1.0))]})


def _sine(p, M, T):
    spec = {"sin": [[float(p.get("amp", 1.0)), float(p.get("freq", 1.0)), float(p.get("phase", 0.0))]]}
    return generate_smooth(int(p.get("dim", 1)), T, M, spec)


def _smooth(p, M, T):
    return generate_smooth(int(p.get("dim", 1)), T, M, {k: p[k] for k in ("poly", "sin") if k in p})


def _file(p, M, T):
    return load_path(p["file"])


PATH_GENERATORS = {"brownian": _brownian, "fbm": _fbm, "constant": _constant, "linear": _linear,
                   "sine": _sine, "smooth": _smooth, "file": _file}


def build_path(spec: dict) -> SampledPath:
    gen = spec["generator"]
    M = int(spec.get("M", DEFAULT_M))
    T = float(spec.get("T", 1.0))
    try:
        return PATH_GENERATORS[gen](spec, M, T)
    except ParameterError as exc:
        raise ConfigError(f"path ({gen})", str(exc)) from None


def build_partitions(cfg: ExperimentConfig, path: SampledPath) -> parts.PartitionSequence:
    lo, hi = cfg.ladder()
    if cfg.partition.get("kind", "dyadic") == "lebesgue":
        return parts.lebesgue_sequence(path, lo, hi, float(cfg.partition.get("level_base", 2.0)))
    return parts.dyadic_sequence(path.M, lo, hi, path.horizon)


# -- rates ------------------------------------------------------------------------


@dataclass
class RateFit:
    slope: Optional[float]
    r_squared: Optional[float] = None
    points: int = 0
    reason: str = ""

    def to_dict(self) -> dict:
        if self.slope is None:
            return {"absent": self.reason, "points": self.points}
        return {"slope": self.slope, "r_squared": self.r_squared, "points": self.points}


def fit_rate(levels, min_points: int = 3) -> RateFit:
    """Least-squares slope of log(gap) against log(mesh) over positive gaps."""
    pts = [(m, g) for m, g in levels if m > 0 and g > 0 and np.isfinite(g)]
    if len(pts) < min_points:
        return RateFit(None, None, len(pts), f"only {len(pts)} levels with positive gap (need {min_points})")
    x = np.log([m for m, _ in pts])
    y = np.log([g for _, g in pts])
    if np.ptp(x) == 0:
        return RateFit(None, None, len(pts), "all meshes equal")
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - slope * x - icpt) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(r2), len(pts))


# -- reports ------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    config: ExperimentConfig
    rows: List[Dict[str, Any]]
    fitted_rate: RateFit
    flags: Dict[str, bool]
    diagnostics: Dict[str, Any]
    metadata: Dict[str, Any]
    extra_columns: List[str] = field(default_factory=list)
    partitions: Optional[dict] = None

    @property
    def passed(self) -> bool:
        return all(self.flags.values())

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def row(self, n: int) -> dict:
        for r in self.rows:
            if r["n"] == n:
                return r
        raise KeyError(n)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "metadata": self.metadata,
            "rows": self.rows,
            "columns": list(CSV_COLUMNS) + self.extra_columns,
            "fitted_rate": self.fitted_rate.to_dict(),
            "flags": self.flags,
            "passed": self.passed,
            "diagnostics": self.diagnostics,
            "partitions": self.partitions,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        cols = list(CSV_COLUMNS) + self.extra_columns
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        for r in self.rows:
            buf.write(",".join(_fmt(r.get(c)) for c in cols) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return None
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def input_hash(cfg: ExperimentConfig, path: Optional[SampledPath]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(_jsonable(cfg.to_dict()), sort_keys=True).encode())
    if path is not None:
        h.update(np.ascontiguousarray(path.values, dtype="<f8").tobytes())
    return h.hexdigest()


# -- runners -------------------------------------------------------------------------


def _map_levels(func, seq, workers):
    items = list(seq)
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda lv: func(*lv), items))
    return [func(n, p) for n, p in items]


def _base_row(F, path, n, part):
    return {
        "n": n,
        "mesh": parts.mesh(part),
        "osc": parts.oscillation(path, part),
        "foscill_max": fn.foscill(F, path, part),
    }


def _trend_ok(values, back=3, abs_floor=0.0):
    if len(values) <= back:
        return values[-1] <= abs_floor or len(values) < 2 or values[-1] < values[0]
    return values[-1] < values[-1 - back] or values[-1] <= abs_floor


def _run_qv(cfg, F, path, seq, workers):
    def level(n, part):
        row = _base_row(F, path, n, part)
        row["qv_T"] = float(np.trace(calc.qv_total(path, part)))
        return row

    rows = _map_levels(level, seq, workers)
    flags = {}
    target = cfg.tolerances.get("qv_target")
    if target is not None:
        flags["qv_final"] = abs(rows[-1]["qv_T"] - target) < cfg.tolerances.get("qv_abs", 0.05)
    return rows, flags, {}, []


def _usable_level(seq, min_steps):
    usable = [n for n, p in seq if p.M / p.cells >= min_steps]
    return max(usable) if usable else seq.ns[0]


def _run_isometry(cfg, F, path, seq, workers):
    lebesgue = seq.kind == "lebesgue"

    def level(n, part):
        row = _base_row(F, path, n, part)
        iso = calc.isometry_level(F, path, part, n)
        row.update(lhs=iso.lhs, rhs=iso.rhs, gap=iso.gap, rel_gap=iso.rel_gap,
                   qv_T=float(np.trace(calc.qv_total(path, part))))
        if lebesgue:
            row.update(m=part.cells, count_ratio=seq.thresholds[n] ** 2 * (part.cells - 1),
                       threshold=seq.thresholds[n])
        return row

    rows = _map_levels(level, seq, workers)
    abs_floor = cfg.tol("abs_gap")
    diag = {}
    extra = ["rel_gap"]
    if lebesgue:
        extra += ["m", "count_ratio", "threshold"]
        meshes = [r["mesh"] for r in rows]
        non_vanishing = meshes[-1] >= path.horizon or (len(meshes) > 1 and meshes[-1] >= 0.5 * meshes[0])
        diag["mesh_non_vanishing"] = bool(non_vanishing)
        diag["irregular_finest"] = calc.strictly_increasing_qv(path, seq.finest)
        n_use = _usable_level(seq, int(cfg.options.get("min_cell_steps", 16)))
        diag["finest_usable_level"] = n_use
        judged = next(r for r in rows if r["n"] == n_use)
        flags = {"rel_gap_final": judged["rel_gap"] < cfg.tol("rel_gap") or judged["gap"] <= abs_floor}
    else:
        gaps = [r["gap"] for r in rows]
        flags = {
            "rel_gap_final": rows[-1]["rel_gap"] < cfg.tol("rel_gap") or rows[-1]["gap"] <= abs_floor,
            "gap_trend": _trend_ok(gaps, 3, abs_floor),
        }
    return rows, flags, diag, extra


def _run_integrals(cfg, F, path, seq, workers):
    def level(n, part):
        row = _base_row(F, path, n, part)
        a = calc.riemann_sum(F, path, part, "along_approx", level=n).value
        p = calc.riemann_sum(F, path, part, "along_path", level=n).value
        scale = max(abs(a), abs(p))
        row.update(value_along_approx=a, value_along_path=p, gap=abs(a - p),
                   rel_diff=abs(a - p) / scale if scale > 0 else 0.0,
                   residual=calc.change_of_variable_residual(F, path, part),
                   qv_T=float(np.trace(calc.qv_total(path, part))))
        return row

    rows = _map_levels(level, seq, workers)
    last = rows[-1]
    if cfg.kind == "uniqueness":
        flags = {"rel_diff_final": last["rel_diff"] < cfg.tol("rel_diff")}
    else:
        total = abs(fn.values_at(F, path, [path.M])[0] - fn.values_at(F, path, [0])[0])
        flags = {"residual_final": last["residual"] < cfg.tol("residual") * (1 + total)}
    return rows, flags, {}, ["rel_diff"]


def _run_remainder(cfg, F, path, seq, workers):
    expansion = cfg.kind == "expansion"
    lo, hi = cfg.ladder()
    count = int(cfg.options.get("count", 256))
    seed = int(cfg.options.get("sample_seed", 0))
    scales = list(range(lo, hi + 1))
    try:
        if expansion:
            samples = calc.expansion_samples(F, path, scales, count, seed)
        else:
            samples = calc.remainder_samples(F, path, scales, count, seed)
    except ParameterError as exc:
        raise ConfigError("partition", str(exc)) from None
    fit = calc.remainder_exponent_fit(samples)
    fit_scales = np.asarray(fit.scales)
    rows = []
    for n, part in seq:
        row = _base_row(F, path, n, part)
        row["gap"] = fit.maxima[int(np.argmin(np.abs(fit_scales - path.horizon * 2.0 ** -n)))]
        rows.append(row)
    hold = holder_estimate(path)
    nu = hold.exponent
    bound = 3 * nu * nu + nu if expansion else nu * (1 + nu)
    diag = {"exponent": fit.exponent, "exponent_r_squared": fit.r_squared, "degenerate": fit.degenerate,
            "holder_exponent": nu, "holder_r_squared": hold.r_squared, "bound": bound}
    flags = {"exponent_bound": bool(fit.degenerate or fit.exponent >= bound - cfg.tol("slack"))}
    return rows, flags, diag, []


def _run_decomposition(cfg, F, path, seq, workers):
    irregular = calc.strictly_increasing_qv(path, seq.finest)

    def level(n, part):
        row = _base_row(F, path, n, part)
        d = calc.decompose_level(F, path, part, n, irregular)
        row.update(qv_T=d.qv_target, qv_smooth=d.qv_smooth, qv_ratio=d.qv_ratio,
                   residual=float(np.max(np.abs(d.target - d.rough - d.smooth))))
        return row

    rows = _map_levels(level, seq, workers)
    diag = {"irregular": irregular}
    if not irregular:
        diag["precondition"] = "base path has cells with zero quadratic variation at the finest level"
    return rows, {"qv_ratio_final": rows[-1]["qv_ratio"] < cfg.tol("qv_ratio")}, diag, ["qv_smooth", "qv_ratio"]


def _run_ito(cfg, F, path, seq, workers):
    n_seeds = int(cfg.options.get("seeds", 200))
    first = int(cfg.options.get("first_seed", 0))
    level = cfg.ladder()[1]
    seeds = list(range(first, first + n_seeds))
    try:
        mc = calc.ito_isometry_mc(F, seeds, level, path.M, path.horizon, path.dim, workers)
    except ParameterError as exc:
        raise ConfigError("options.seeds", str(exc)) from None
    part = seq[level]
    row = _base_row(F, path, level, part)
    row.update(lhs=mc.mean_lhs, rhs=mc.mean_rhs, gap=mc.discrepancy)
    diag = {"stderr_lhs": mc.stderr_lhs, "stderr_rhs": mc.stderr_rhs, "combined_stderr": mc.combined_stderr,
            "seeds": seeds[:1] + seeds[-1:], "seed_count": n_seeds}
    flags = {"within_stderr": mc.discrepancy <= cfg.tol("stderr_mult") * mc.combined_stderr}
    return [row], flags, diag, []


def _run_assumptions(cfg, F, path, seq, workers):
    rep = fn.check_assumptions(F, path, seq, int(cfg.options.get("pairs", 256)),
                               int(cfg.options.get("sample_seed", 0)))
    rows = [_base_row(F, path, n, part) for n, part in seq]
    fo = [r["foscill_max"] for r in rows]
    diag = {"lipschitz_K_hat": rep.lipschitz_K_hat, "horiz_lipschitz_C_hat": rep.horiz_lipschitz_C_hat,
            "samples_used": rep.samples_used,
            "foscill_decreasing_tail": bool(len(fo) >= 4 and all(a > b for a, b in zip(fo[-4:], fo[-3:])))}
    return rows, {}, diag, []


RUNNERS = {
    "qv": _run_qv,
    "isometry": _run_isometry,
    "isometry_lebesgue": _run_isometry,
    "uniqueness": _run_integrals,
    "change_of_variable": _run_integrals,
    "remainder": _run_remainder,
    "expansion": _run_remainder,
    "decomposition": _run_decomposition,
    "ito_mc": _run_ito,
    "assumptions": _run_assumptions,
}


def run_experiment(cfg: ExperimentConfig, path: Optional[SampledPath] = None) -> ConvergenceReport:
    """Run one config.  ``path`` overrides the generated path (same grid)."""
    if cfg.kind == "isometry_lebesgue" and cfg.partition.get("kind", "dyadic") != "lebesgue":
        cfg = copy.deepcopy(cfg)
        cfg.partition["kind"] = "lebesgue"
    path = build_path(cfg.path) if path is None else path
    F = cfg.functional_obj()
    seq = build_partitions(cfg, path)
    workers = max_workers(int(cfg.options.get("workers", 1)))
    try:
        rows, flags, diag, extra = RUNNERS[cfg.kind](cfg, F, path, seq, workers)
    except fn.CapabilityError as exc:
        raise fn.CapabilityError(f"{cfg.kind} experiment: {exc}") from exc
    rows = sorted(rows, key=lambda r: r["n"])
    fitted = fit_rate([(r["mesh"], r.get("gap") or 0.0) for r in rows], min_points=4)
    diag["osc_ladder"] = [r["osc"] for r in rows]
    diag["foscill_ladder"] = [r["foscill_max"] for r in rows]
    diag["partition_nested"] = seq.nested
    meta = {"seed": path.seed, "M": path.M, "T": path.horizon, "dim": path.dim, "label": path.label,
            "version": __version__, "input_hash": input_hash(cfg, path)}
    compact = parts.to_json(seq) if seq.kind == "lebesgue" else {
        "kind": seq.kind, "nested": seq.nested, "n_min": seq.ns[0], "n_max": seq.ns[-1]}
    return ConvergenceReport(cfg, rows, fitted, {k: bool(v) for k, v in flags.items()}, diag, meta,
                             extra, compact)


def write_report(report: ConvergenceReport, out_dir, stem: str = "report") -> Dict[str, str]:
    """Write JSON and CSV; returns {filename: sha256}."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {f"{stem}.json": report.to_json(), f"{stem}.csv": report.to_csv()}
    hashes = {}
    for name, text in files.items():
        data = text.encode()
        (out / name).write_bytes(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    return hashes
