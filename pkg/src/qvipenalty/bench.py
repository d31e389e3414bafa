"""Declarative parameter sweeps and the CSV tables / plot data they produce.

A sweep point is ``(mesh exponent, scheme, penalty entry)``.  Points are
independent and may run in a process pool; output rows always follow the
order of the configuration.  Every row carries the hash of the normalised
configuration that produced it.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import random
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import analysis, solvers
from .discretize import Grid1D, assemble
from .model import ModelError, load_problem, problem_from_dict

SCHEMES = ("direct", "penalty", "per-strategy", "ios")
VALUE_FMT = "%.9g"
ERROR_FMT = "%.3e"
_RULE = re.compile(r"^N/(\d+(?:\.\d*)?)(\+continuation)?$")


class ConfigError(ValueError):
    """Schema violation; the message starts with the offending path."""


@dataclass
class ExperimentConfig:
    problem: dict | str = field(default_factory=lambda: {"family": "optimal_switching"})
    mesh_exponents: list = field(default_factory=lambda: [12, 13, 14])
    rho: list = field(default_factory=lambda: [1e5])
    schemes: list = field(default_factory=lambda: ["direct", "penalty"])
    stopping: dict = field(default_factory=lambda: {"tol": 1e-9, "scale": 1.0, "max_iterations": 100_000})
    probe_points: list = field(default_factory=lambda: [1.0])
    probe_regime: int = 0
    curve_regime: int = 1
    ios: dict = field(default_factory=lambda: {"n_max": 50, "inner": "direct", "rho": None})
    regions: bool = False
    solution_stride: int = 1
    output_dir: str = "out"
    jobs: int = 1

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, doc) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config: must be a JSON object")
        known = set(cls.__dataclass_fields__)
        for key in doc:
            if key not in known:
                raise ConfigError(f"config.{key}: unknown field")
        cfg = cls(**{k: v for k, v in doc.items()})
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        if not isinstance(self.problem, (dict, str)):
            raise ConfigError("config.problem: must be an object or a path")
        try:
            problem = self.load_problem()
        except (ModelError, ValueError, OSError) as exc:
            raise ConfigError(f"config.problem: {exc}") from exc
        if not isinstance(self.mesh_exponents, list) or not self.mesh_exponents:
            raise ConfigError("config.mesh_exponents: must be a nonempty list")
        for k, n in enumerate(self.mesh_exponents):
            if isinstance(n, bool) or not isinstance(n, int) or not 1 <= n <= 24:
                raise ConfigError(f"config.mesh_exponents[{k}]: must be an integer in [1, 24]")
        if not isinstance(self.rho, list):
            raise ConfigError("config.rho: must be a list of numbers or rules like 'N/16'")
        for k, r in enumerate(self.rho):
            if isinstance(r, str):
                if not _RULE.match(r):
                    raise ConfigError(f"config.rho[{k}]: unknown rule {r!r}; use 'N/<C>' or 'N/<C>+continuation'")
            elif isinstance(r, bool) or not isinstance(r, (int, float)) or not np.isfinite(r) or r < 0:
                raise ConfigError(f"config.rho[{k}]: must be a nonnegative number or a rule")
        if not isinstance(self.schemes, list) or not self.schemes:
            raise ConfigError("config.schemes: must be a nonempty list")
        for k, s in enumerate(self.schemes):
            if s not in SCHEMES:
                raise ConfigError(f"config.schemes[{k}]: unknown scheme {s!r}; choose from {list(SCHEMES)}")
        if any(s in ("penalty", "per-strategy") for s in self.schemes) and not self.rho:
            raise ConfigError("config.rho: penalty schemes need at least one entry")
        if not isinstance(self.stopping, dict):
            raise ConfigError("config.stopping: must be an object")
        for key in self.stopping:
            if key not in ("tol", "scale", "max_iterations"):
                raise ConfigError(f"config.stopping.{key}: unknown field")
        try:
            self.criterion()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.stopping: {exc}") from exc
        lo, hi = problem.domain
        if not isinstance(self.probe_points, list):
            raise ConfigError("config.probe_points: must be a list")
        for k, x in enumerate(self.probe_points):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not lo <= x <= hi:
                raise ConfigError(f"config.probe_points[{k}]: must be a number in [{lo}, {hi}]")
        for name in ("probe_regime", "curve_regime"):
            r = getattr(self, name)
            if isinstance(r, bool) or not isinstance(r, int) or not 0 <= r < problem.regime_count:
                raise ConfigError(f"config.{name}: must be a regime index in [0, {problem.regime_count})")
        if not isinstance(self.ios, dict):
            raise ConfigError("config.ios: must be an object")
        for key in self.ios:
            if key not in ("n_max", "inner", "rho", "stop_tol"):
                raise ConfigError(f"config.ios.{key}: unknown field")
        n_max = self.ios.get("n_max", 50)
        if isinstance(n_max, bool) or not isinstance(n_max, int) or n_max < 1:
            raise ConfigError("config.ios.n_max: must be a positive integer")
        if self.ios.get("inner", "direct") not in ("direct", "penalty"):
            raise ConfigError("config.ios.inner: must be 'direct' or 'penalty'")
        if self.ios.get("inner") == "penalty" and not self.ios.get("rho"):
            raise ConfigError("config.ios.rho: required when the inner solver is 'penalty'")
        if not isinstance(self.regions, bool):
            raise ConfigError("config.regions: must be true or false")
        for name in ("solution_stride", "jobs"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"config.{name}: must be a positive integer")
        if not isinstance(self.output_dir, str):
            raise ConfigError("config.output_dir: must be a string")
        # normal form, so equivalent documents hash alike
        self.rho = [r if isinstance(r, str) else float(r) for r in self.rho]
        self.probe_points = [float(x) for x in self.probe_points]
        self.stopping = asdict(self.criterion())
        self.ios = {"n_max": n_max, "inner": self.ios.get("inner", "direct"), "rho": self.ios.get("rho"),
                    "stop_tol": self.ios.get("stop_tol")}

    # ------------------------------------------------------------------
    def load_problem(self):
        if isinstance(self.problem, str):
            return load_problem(self.problem)
        return problem_from_dict(self.problem)

    def criterion(self) -> solvers.StoppingCriterion:
        s = self.stopping
        return solvers.StoppingCriterion(float(s.get("tol", 1e-9)), float(s.get("scale", 1.0)),
                                         int(s.get("max_iterations", 100_000)))

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything that affects numbers (not ``output_dir`` or ``jobs``)."""
        doc = self.to_dict()
        doc.pop("output_dir")
        doc.pop("jobs")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, tol=None, max_iter=None, output_dir=None, jobs=None) -> "ExperimentConfig":
        doc = self.to_dict()
        doc["stopping"] = dict(doc["stopping"])
        if tol is not None:
            doc["stopping"]["tol"] = tol
        if max_iter is not None:
            doc["stopping"]["max_iterations"] = max_iter
        if output_dir is not None:
            doc["output_dir"] = output_dir
        if jobs is not None:
            doc["jobs"] = jobs
        return ExperimentConfig.from_dict(doc)


def table1_config(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"mesh_exponents": [12, 13, 14], "rho": [1e5],
                                       "schemes": ["direct", "penalty"], **kw})


def figure1_config(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"mesh_exponents": [14], "rho": [1e2, 1e3, 1e4, 1e5],
                                       "schemes": ["direct", "penalty"], **kw})


def figure2_config(**kw) -> ExperimentConfig:
    return ExperimentConfig.from_dict({"mesh_exponents": list(range(8, 15)),
                                       "rho": [1e3, 1e4, "N/16", "N/16+continuation"],
                                       "schemes": ["direct", "penalty"], **kw})


# ----------------------------------------------------------------------
# sweep execution


def rho_for(entry, N: int) -> tuple[float, bool, str]:
    """``(rho, continuation, label)`` of a penalty entry at system size ``N``."""
    if isinstance(entry, str):
        m = _RULE.match(entry)
        return N / float(m.group(1)), bool(m.group(2)), entry
    return float(entry), False, f"{float(entry):g}"


@dataclass
class PointResult:
    n: int
    N: int
    scheme: str
    label: str
    rho: float | None
    status: str
    iterations: int
    stages: list
    wall_time: float
    equation_residual: float
    solution: np.ndarray | None
    report: dict
    history: list
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == solvers.CONVERGED


@lru_cache(maxsize=4)
def _cached_system(problem_key: str, n: int):
    ref = json.loads(problem_key)
    problem = load_problem(ref) if isinstance(ref, str) else problem_from_dict(ref)
    return assemble(problem, Grid1D.from_exponent(n, problem.domain))


def _system(problem, n):
    return _cached_system(json.dumps(problem, sort_keys=True), n)


def _run_point(task: dict) -> PointResult:
    sys = _system(task["problem"], task["n"])
    crit = solvers.StoppingCriterion(**task["crit"])
    scheme, rho, cont = task["scheme"], task["rho"], task["continuation"]
    extra = {}
    try:
        if scheme == "direct":
            rep = solvers.solve_direct(sys, crit=crit)
        elif scheme == "ios":
            io = task["ios"]
            seq = solvers.iterated_optimal_stopping(sys, io.get("n_max", 50), io.get("inner", "direct"),
                                                    io.get("rho"), crit, io.get("stop_tol"))
            ok = all(s.converged for s in seq.stages)
            rep = solvers.SolveReport(seq.final, len(seq.stages), list(seq.decrements),
                                      solvers.CONVERGED if ok else seq.stages[-1].status,
                                      sum(s.wall_time for s in seq.stages), io.get("rho"), None, "ios",
                                      stages=[s.iterations for s in seq.stages])
            extra["decrements"] = seq.decrements
        else:
            per = scheme == "per-strategy"
            if cont:
                rep = solvers.solve_continuation(sys, rho, crit, per_strategy=per)
            elif per:
                rep = solvers.solve_per_strategy_penalty(sys, rho, crit=crit)
            else:
                rep = solvers.solve_penalized(sys, rho, crit=crit)
            if task.get("double") and rep.converged:
                twice = solvers.solve_penalized(sys, 2 * rho, init=rep.solution, crit=crit)
                extra["double"] = twice.solution if twice.converged else None
    except (RuntimeError, ValueError) as exc:
        return PointResult(task["n"], sys.size, scheme, task["label"], rho, f"Error: {exc}", 0, [], 0.0,
                           np.nan, None, {}, [], extra)
    return PointResult(task["n"], sys.size, scheme, task["label"], rho, rep.status, rep.iterations,
                       list(rep.stages), rep.wall_time, rep.equation_residual, rep.solution,
                       rep.to_dict(task["stride"]), list(rep.residual_history), extra)


def _tasks(cfg: ExperimentConfig, double: bool = False) -> list[dict]:
    crit = asdict(cfg.criterion())
    base = {"problem": cfg.problem, "crit": crit, "ios": cfg.ios, "stride": cfg.solution_stride}
    out = []
    for n in cfg.mesh_exponents:
        N = _system(cfg.problem, n).size
        for scheme in cfg.schemes:
            if scheme in ("penalty", "per-strategy"):
                for entry in cfg.rho:
                    rho, cont, label = rho_for(entry, N)
                    out.append({**base, "n": n, "scheme": scheme, "rho": rho, "continuation": cont,
                                "label": label, "double": double})
            else:
                out.append({**base, "n": n, "scheme": scheme, "rho": None, "continuation": False,
                            "label": scheme if scheme == "direct" else f"ios-{cfg.ios.get('inner', 'direct')}"})
    return out


def _forbid_rng() -> None:
    def refuse(*_a, **_k):
        raise RuntimeError("random number generation is not allowed in a seedless run")

    for name in ("default_rng", "seed", "rand", "randn", "random", "RandomState", "Generator"):
        setattr(np.random, name, refuse)
    for name in ("seed", "random", "randint", "uniform", "gauss", "shuffle", "choice", "Random"):
        setattr(random, name, refuse)


@contextlib.contextmanager
def seedless():
    """Run a block with every common RNG entry point replaced by one that raises."""
    saved_np = {k: getattr(np.random, k) for k in ("default_rng", "seed", "rand", "randn", "random",
                                                   "RandomState", "Generator")}
    saved_py = {k: getattr(random, k) for k in ("seed", "random", "randint", "uniform", "gauss", "shuffle",
                                                "choice", "Random")}
    _forbid_rng()
    try:
        yield
    finally:
        for k, v in saved_np.items():
            setattr(np.random, k, v)
        for k, v in saved_py.items():
            setattr(random, k, v)


def run_sweep(cfg: ExperimentConfig, double: bool = False, forbid_rng: bool = False) -> list[PointResult]:
    tasks = _tasks(cfg, double)
    if cfg.jobs == 1 or len(tasks) == 1:
        return [_run_point(t) for t in tasks]
    init = _forbid_rng if forbid_rng else None
    with ProcessPoolExecutor(max_workers=cfg.jobs, initializer=init) as pool:
        return list(pool.map(_run_point, tasks))


# ----------------------------------------------------------------------
# output helpers


def _fmt(v, fmt=VALUE_FMT) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return fmt % v


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


@dataclass
class BenchResult:
    """Rows written plus the sweep behind them; ``failures`` lists non-converged points."""

    name: str
    config_hash: str
    header: list
    rows: list
    points: list
    files: list
    checks: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [p for p in self.points if not p.ok]

    @property
    def exit_code(self) -> int:
        return 2 if self.failures else 0


def _probe(sys, u, x, regime):
    return float(analysis.interpolate_solution(sys, u, x, regime)) if u is not None else None


# ----------------------------------------------------------------------
# runners


def run_table1(cfg: ExperimentConfig | None = None, out_dir=None, forbid_rng: bool = False) -> BenchResult:
    """Direct and fixed-penalty probe values across meshes, in the layout of the reference table.

    Columns are the meshes; rows are the probe value of each scheme, its
    successive mesh differences, and the sup-norm gap between the schemes.
    """
    cfg = cfg or table1_config()
    h = cfg.hash()
    points = run_sweep(cfg, forbid_rng=forbid_rng)
    x, reg = cfg.probe_points[0], cfg.probe_regime
    ns = cfg.mesh_exponents
    by = {(p.n, p.scheme, p.label): p for p in points}
    series = [("direct", "direct")] if "direct" in cfg.schemes else []
    if "penalty" in cfg.schemes:
        series += [("penalty", rho_for(r, 1)[2]) for r in cfg.rho]
    Ns = [_system(cfg.problem, n).size for n in ns]
    header = ["quantity"] + [f"N={N}" for N in Ns] + ["config_hash"]
    rows, timing = [], []
    vals = {}
    for scheme, label in series:
        name = "direct" if scheme == "direct" else f"penalty(rho={label})"
        probe = []
        for n in ns:
            p = by[(n, scheme, label)]
            probe.append(_probe(_system(cfg.problem, n), p.solution, x, reg) if p.ok else None)
            timing.append([name, f"N={p.N}", p.status, p.iterations, "%.3f" % p.wall_time, h])
        vals[(scheme, label)] = probe
        rows.append([f"{name} u{reg + 1}(x={x:g})"] + [_fmt(v) if v is not None else "failed" for v in probe] + [h])
        diffs = [""] + [_fmt(abs(a - b), ERROR_FMT) if a is not None and b is not None else ""
                        for a, b in zip(probe[1:], probe[:-1])]
        rows.append([f"{name} |u{reg + 1}_N - u{reg + 1}_N/2|(x={x:g})"] + diffs + [h])
    gaps = {}
    if "direct" in cfg.schemes and "penalty" in cfg.schemes:
        for label in [lb for sc, lb in series if sc == "penalty"]:
            cells = []
            for n in ns:
                d, q = by[(n, "direct", "direct")], by[(n, "penalty", label)]
                g = float(np.abs(d.solution - q.solution).max()) if d.ok and q.ok else None
                gaps[(n, label)] = g
                cells.append(_fmt(g, ERROR_FMT) if g is not None else "failed")
            rows.append([f"sup|u_N - u_N^rho|(rho={label})"] + cells + [h])
    out = Path(out_dir or cfg.output_dir)
    files = [out / "table1.csv", out / "table1_timing.csv"]
    _write_csv(files[0], header, rows)
    _write_csv(files[1], ["scheme", "N", "status", "iterations", "wall_time", "config_hash"], timing)
    res = BenchResult("table1", h, header, rows, points, files)
    res.checks = {"values": vals, "gaps": gaps}
    return res


def run_figure1(cfg: ExperimentConfig | None = None, out_dir=None, forbid_rng: bool = False) -> BenchResult:
    """Curves ``u_direct - u^rho`` over ``x`` for each penalty, plus their sup-norms and fitted slope."""
    cfg = cfg or figure1_config()
    h = cfg.hash()
    n = cfg.mesh_exponents[-1]
    sub = ExperimentConfig.from_dict({**cfg.to_dict(), "mesh_exponents": [n], "schemes": ["direct", "penalty"]})
    points = run_sweep(sub, forbid_rng=forbid_rng)
    sys = _system(cfg.problem, n)
    reg = cfg.curve_regime
    direct = points[0]
    pens = points[1:]
    xs = sys.grid.nodes
    out = Path(out_dir or cfg.output_dir)
    checks = {"nonnegative": True, "monotone_in_rho": True}
    header = ["x", f"u{reg + 1}_direct"] + [f"diff_rho={p.label}" for p in pens] + ["config_hash"]
    rows, rate_rows, sups = [], [], []
    if direct.ok and all(p.ok for p in pens):
        ud = sys.regime_block(direct.solution, reg)
        diffs = [ud - sys.regime_block(p.solution, reg) for p in pens]
        for k, x in enumerate(xs):
            rows.append([_fmt(x), _fmt(ud[k])] + [_fmt(d[k], ERROR_FMT) for d in diffs] + [h])
        # the penalised solution lies on the intervention-free side of the direct one
        oriented = [sys.sign * (p.solution - direct.solution) for p in pens]
        checks["nonnegative"] = bool(all(o.min() >= -1e-12 for o in oriented))
        order = np.argsort([p.rho for p in pens])
        checks["monotone_in_rho"] = bool(all(
            np.all(oriented[a] >= oriented[b] - 1e-12) for a, b in zip(order[:-1], order[1:])))
        for p in pens:
            s_all = float(np.abs(direct.solution - p.solution).max())
            s_reg = float(np.abs(ud - sys.regime_block(p.solution, reg)).max())
            sups.append((p.rho, s_all))
            rate_rows.append([_fmt(p.rho), _fmt(s_reg, ERROR_FMT), _fmt(s_all, ERROR_FMT), "", h])
        if len(sups) >= 3 and all(s > 0 for _, s in sups):
            est = analysis.estimate_rate(sorted(sups))
            checks["slope"] = est.slope
            rate_rows.append(["slope", "", "", _fmt(est.slope), h])
    files = [out / "figure1.csv", out / "figure1_rates.csv"]
    _write_csv(files[0], header, rows)
    _write_csv(files[1], ["rho", f"sup_diff_u{reg + 1}", "sup_diff_all", "slope", "config_hash"], rate_rows)
    res = BenchResult("figure1", h, header, rows, points, files, checks)
    res.checks["sup_norms"] = sups
    return res


def run_figure2(cfg: ExperimentConfig | None = None, out_dir=None, forbid_rng: bool = False) -> BenchResult:
    """Iteration counts and wall time per (N, scheme); growth exponents per scheme."""
    cfg = cfg or figure2_config()
    h = cfg.hash()
    points = run_sweep(cfg, forbid_rng=forbid_rng)
    header = ["N", "scheme", "rho", "status", "iterations", "stages", "config_hash", "wall_time"]
    rows = []
    for p in points:
        rows.append([p.N, p.label if p.scheme != "direct" else "direct", _fmt(p.rho), p.status, p.iterations,
                     "+".join(str(s) for s in p.stages), h, "%.4f" % p.wall_time])
    series: dict[str, list] = {}
    for p in points:
        if p.ok:
            series.setdefault(p.label, []).append((p.N, p.iterations))
    rate_rows = []
    slopes = {}
    for label, pts in series.items():
        if len(pts) >= 3:
            slope = float(np.polyfit(np.log([a for a, _ in pts]), np.log([b for _, b in pts]), 1)[0])
            slopes[label] = slope
            rate_rows.append([label, len(pts), _fmt(slope), h])
    out = Path(out_dir or cfg.output_dir)
    files = [out / "figure2.csv", out / "figure2_rates.csv"]
    _write_csv(files[0], header, rows)
    _write_csv(files[1], ["scheme", "points", "iteration_growth_exponent", "config_hash"], rate_rows)
    return BenchResult("figure2", h, header, rows, points, files, {"growth": slopes, "series": series})


def run_custom(cfg: ExperimentConfig, out_dir=None, forbid_rng: bool = False) -> BenchResult:
    """Full bundle: run table, per-run reports and histories, rates, and optionally regions and policies."""
    h = cfg.hash()
    points = run_sweep(cfg, double=cfg.regions, forbid_rng=forbid_rng)
    out = Path(out_dir or cfg.output_dir)
    reg = cfg.probe_regime
    header = ["n", "N", "scheme", "rho", "status", "iterations", "stages", "equation_residual"]
    header += [f"u{reg + 1}(x={x:g})" for x in cfg.probe_points] + ["config_hash", "wall_time"]
    rows, files = [], []
    for p in points:
        sys = _system(cfg.problem, p.n)
        probes = [_fmt(_probe(sys, p.solution, x, reg)) if p.solution is not None else "" for x in cfg.probe_points]
        rows.append([p.n, p.N, p.scheme, p.label, p.status, p.iterations, "+".join(map(str, p.stages)),
                     _fmt(p.equation_residual, ERROR_FMT)] + probes + [h, "%.4f" % p.wall_time])
        stem = f"n{p.n}_{p.scheme}_{_slug(p.label)}"
        if p.report:
            rpath = out / "reports" / f"{stem}.json"
            rpath.parent.mkdir(parents=True, exist_ok=True)
            with open(rpath, "w") as fh:
                json.dump({**p.report, "config_hash": h, "n": p.n, "N": p.N}, fh, indent=1)
            files.append(rpath)
        hpath = out / "histories" / f"{stem}.csv"
        _write_csv(hpath, ["iteration", "criterion"], [[k, f"{r:.6e}"] for k, r in enumerate(p.history, 1)])
        files.append(hpath)
    _write_csv(out / "runs.csv", header, rows)
    files.insert(0, out / "runs.csv")
    rate_rows = _rate_rows(cfg, points, h)
    _write_csv(out / "rates.csv", ["kind", "series", "abscissa", "error", "ratio", "slope", "config_hash"], rate_rows)
    files.append(out / "rates.csv")
    if cfg.regions:
        reg_rows, pol_rows = _region_rows(cfg, points, h)
        _write_csv(out / "regions.csv", ["n", "scheme", "rho", "regime", "x", "in_region", "naive", "omega",
                                         "config_hash"], reg_rows)
        _write_csv(out / "policies.csv", ["n", "scheme", "rho", "regime", "x", "targets", "gap", "ambiguous",
                                          "config_hash"], pol_rows)
        files += [out / "regions.csv", out / "policies.csv"]
    return BenchResult("run", h, header, rows, points, files)


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]", "_", label)


def _rate_rows(cfg, points, h) -> list:
    rows = []
    x, reg = cfg.probe_points[0] if cfg.probe_points else None, cfg.probe_regime
    # mesh rate of the probe value, per series
    series: dict[tuple, list] = {}
    for p in points:
        if p.ok and x is not None:
            series.setdefault((p.scheme, p.label), []).append((p.N, _probe(_system(cfg.problem, p.n), p.solution,
                                                                           x, reg)))
    for (scheme, label), vals in series.items():
        if len(vals) < 3:
            continue
        pts = [(N, abs(b - a)) for (_, a), (N, b) in zip(vals[:-1], vals[1:])]
        pts = [q for q in pts if q[1] > 0]
        if len(pts) < 2:
            continue
        est = analysis.estimate_rate(pts)
        ratios = [""] + [_fmt(r) for r in est.ratios]
        for (N, e), r in zip(pts, ratios):
            rows.append(["mesh", f"{scheme}:{label}", N, _fmt(e, ERROR_FMT), r, "", h])
        rows.append(["mesh", f"{scheme}:{label}", "", "", "", _fmt(est.slope), h])
    # penalty error against the direct solution, per mesh
    for n in cfg.mesh_exponents:
        d = next((p for p in points if p.n == n and p.scheme == "direct" and p.ok), None)
        pens = [p for p in points if p.n == n and p.scheme == "penalty" and p.ok and not p.label.endswith("continuation")]
        if d is None or not pens:
            continue
        pts = sorted((p.rho, float(np.abs(d.solution - p.solution).max())) for p in pens)
        for rho, e in pts:
            rows.append(["penalty", f"n={n}", _fmt(rho), _fmt(e, ERROR_FMT), "", "", h])
        pos = [q for q in pts if q[1] > 0]
        if len(pos) >= 3 and len({q[0] for q in pos}) == len(pos):
            rows.append(["penalty", f"n={n}", "", "", "", _fmt(analysis.estimate_rate(pos).slope), h])
    return rows


def _region_rows(cfg, points, h):
    reg_rows, pol_rows = [], []
    for p in points:
        if not p.ok or p.scheme == "ios":
            continue
        sys = _system(cfg.problem, p.n)
        if p.scheme == "direct":
            omega = analysis.EXACT_REGION_TOL
            region = analysis.action_region(p.solution, sys, omega)
        else:
            other = p.extra.get("double")
            if other is None:
                continue
            omega, _ = analysis.calibrate_modulus(p.solution, other)
            region = analysis.action_region(p.solution, sys, omega, other)
        xs = region.coordinates
        for i in range(sys.regime_count):
            inr = np.zeros(xs.size, dtype=bool)
            inr[region.regions[i]] = True
            nv = np.zeros(xs.size, dtype=bool)
            nv[region.naive[i]] = True
            for l in range(xs.size):
                reg_rows.append([p.n, p.scheme, p.label, i, _fmt(xs[l]), int(inr[l]), int(nv[l]),
                                 _fmt(omega, ERROR_FMT), h])
        for ch in analysis.extract_impulse_policy(p.solution, sys, region, omega):
            pol_rows.append([p.n, p.scheme, p.label, ch.regime, _fmt(ch.x), " ".join(map(str, ch.targets)),
                             _fmt(ch.gap, ERROR_FMT), int(ch.ambiguous), h])
    return reg_rows, pol_rows
