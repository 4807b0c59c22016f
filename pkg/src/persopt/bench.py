"""Experiment harness: run design strategies on a test function and tabulate decision costs.

Every strategy/replicate starts from the same first ``n0`` Sobol' points, adds one run per
iteration, and after each iteration the estimated profile optimum is costed with the true
function on a shared grid. The constant robust decisions are costed once per function.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Optional

import numpy as np
import scipy

from . import __version__, robust, sha, testbed
from .design import sobol_points
from .gp import Dataset, GPConfig, fit_model

log = logging.getLogger(__name__)

STRATEGIES = ("sha1", "sha2", "sobol")
CSV_HEADER = ("function", "strategy", "alpha", "replicate", "iteration", "n", "ce", "cm")
BASELINES = ("uE", "uM")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


def _sig(x) -> float:
    """Round to the 12 significant digits written to CSV, so parsing reproduces the value."""
    return float(f"{float(x):.12g}")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


# --- configuration ---------------------------------------------------------------------


@dataclass(frozen=True)
class StrategySpec:
    name: str
    alpha: Optional[float] = None

    def validate(self) -> None:
        if self.name not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")
        if self.name == "sobol":
            if self.alpha is not None:
                raise ConfigError("the sobol strategy takes no alpha")
        elif self.alpha is None or not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"{self.name} needs alpha in (0, 1), got {self.alpha}")

    @property
    def label(self) -> str:
        return self.name if self.alpha is None else f"{self.name}-a{self.alpha:g}"


def _check_keys(obj: dict, allowed, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _as_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """One function, several strategies, several seeded replicates.

    ``n0`` defaults to 10 when the function has two inputs in total and 20 otherwise.
    Replicate ``r`` uses ``seeds[r]`` when given, else ``seed + r``.
    """

    function: str
    strategies: tuple
    n0: Optional[int] = None
    iterations: int = 30
    replicates: int = 1
    seed: int = 0
    seeds: Optional[tuple] = None
    cost_grid: robust.CostGrid = robust.CostGrid()
    output: str = "results"
    prefix: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.function not in testbed.REGISTRY:
            raise ConfigError(f"unknown function {self.function!r}; known: {', '.join(testbed.REGISTRY)}")
        if not self.strategies:
            raise ConfigError("strategy list is empty")
        for s in self.strategies:
            s.validate()
        if len(set(self.strategies)) != len(self.strategies):
            raise ConfigError("duplicate strategy entries")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.replicates:
            raise ConfigError(f"{len(self.seeds)} seeds given for {self.replicates} replicates")
        d = testbed.get(self.function).domain.d
        if self.initial_size < d + 2:
            raise ConfigError(f"n0 must be >= {d + 2} for {self.function}")

    @property
    def initial_size(self) -> int:
        if self.n0 is not None:
            return self.n0
        return 10 if testbed.get(self.function).domain.d <= 2 else 20

    @property
    def file_prefix(self) -> str:
        return self.prefix or self.function

    def replicate_seeds(self) -> list[int]:
        if self.seeds is not None:
            return [int(s) for s in self.seeds]
        return [self.seed + r for r in range(self.replicates)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Override the base seed; explicit per-replicate seeds are dropped."""
        return replace(self, seed=seed, seeds=None)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        _check_keys(obj, [f.name for f in fields(cls)], "config")
        if "function" not in obj or "strategies" not in obj:
            raise ConfigError("config needs 'function' and 'strategies'")
        raw = obj["strategies"]
        if not isinstance(raw, list):
            raise ConfigError("strategies must be a list")
        strategies = []
        for i, item in enumerate(raw):
            if isinstance(item, str):
                item = {"name": item}
            _check_keys(item, ("name", "alpha"), f"strategies[{i}]")
            if "name" not in item:
                raise ConfigError(f"strategies[{i}] has no name")
            alpha = item.get("alpha")
            if alpha is not None and (isinstance(alpha, bool) or not isinstance(alpha, (int, float))):
                raise ConfigError(f"strategies[{i}].alpha must be a number")
            strategies.append(StrategySpec(str(item["name"]), None if alpha is None else float(alpha)))
        kw = {k: v for k, v in obj.items() if k not in ("strategies", "cost_grid", "seeds")}
        for key in ("n0", "iterations", "replicates", "seed"):
            if kw.get(key) is not None:
                kw[key] = _as_int(kw[key], key)
        if "seeds" in obj and obj["seeds"] is not None:
            if not isinstance(obj["seeds"], list):
                raise ConfigError("seeds must be a list of integers")
            kw["seeds"] = tuple(_as_int(s, "seeds[]") for s in obj["seeds"])
        if "cost_grid" in obj:
            _check_keys(obj["cost_grid"], [f.name for f in fields(robust.CostGrid)], "cost_grid")
            try:
                kw["cost_grid"] = robust.CostGrid(**obj["cost_grid"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"cost_grid: {exc}") from None
        for key in ("function", "output", "prefix"):
            if key in kw and kw[key] is not None and not isinstance(kw[key], str):
                raise ConfigError(f"{key} must be a string")
        return cls(strategies=tuple(strategies), **kw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strategies"] = [{k: v for k, v in asdict(s).items() if v is not None} for s in self.strategies]
        out["seeds"] = None if self.seeds is None else list(self.seeds)
        return out


# --- report ----------------------------------------------------------------------------


class CostRow(NamedTuple):
    function: str
    strategy: str
    alpha: Optional[float]
    replicate: Optional[int]
    iteration: Optional[int]
    n: Optional[int]
    ce: float
    cm: float


class TracePoint(NamedTuple):
    iteration: int  # 0 marks the initial design
    s: tuple
    t: tuple
    lower: Optional[float]
    sd: Optional[float]


@dataclass
class CostReport:
    rows: list
    metadata: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)  # (strategy label, replicate) -> [TracePoint]

    def final(self, strategy: str, alpha=None) -> list[CostRow]:
        """Last-iteration row of every replicate of one strategy."""
        last = {}
        for r in self.rows:
            if r.strategy == strategy and r.alpha == alpha and r.iteration is not None:
                if r.replicate not in last or r.iteration > last[r.replicate].iteration:
                    last[r.replicate] = r
        return [last[k] for k in sorted(last)]

    def baseline(self, name: str) -> CostRow:
        return next(r for r in self.rows if r.strategy == name)


class _TaskResult(NamedTuple):
    rows: list
    trace: list
    failure: Optional[str]


def _decision_costs(model, f, grid, seed, n) -> tuple[float, float]:
    u = robust.PersonalizedDecision.surrogate(model, seed=sha.subseed(seed, n, 3))
    c = robust.cost_estimate(u, f, grid)
    return c.expected, c.maximum


def _run_task(config: ExperimentConfig, strategy: StrategySpec, replicate: int, seed: int, costs: bool) -> _TaskResult:
    """One strategy/replicate; an error stops this task and is returned as a diagnostic."""
    f = testbed.get(config.function)
    dom = f.domain
    n0 = config.initial_size
    X0 = sha.initial_design(dom, n0)
    black_box = testbed.MeteredBlackBox(f, n0 + config.iterations)
    rows, trace = [], [TracePoint(0, tuple(x[: dom.p]), tuple(x[dom.p :]), None, None) for x in X0]

    def record(model, n, iteration):
        if costs:
            ce, cm = _decision_costs(model, f, config.cost_grid, seed, n)
            rows.append(CostRow(f.id, strategy.name, strategy.alpha, replicate, iteration, n, _sig(ce), _sig(cm)))

    try:
        if strategy.name == "sobol":
            y0 = np.array([black_box(*dom.split(x)) for x in X0])
            data = Dataset(X0, y0, dom)
            model = fit_model(data, GPConfig(seed=sha.subseed(seed, data.n, 0)))
            extra = dom.lower + sobol_points(dom.d, config.iterations, skip=1 + n0) * dom.width
            for i, x in enumerate(extra, start=1):
                sd = float(model.predict(x, 1.0).sd[0])
                s, t = dom.split(x)
                data = data.append(x, black_box(s, t))
                model = fit_model(data, GPConfig(seed=sha.subseed(seed, data.n, 0)), warm_start=model.theta)
                trace.append(TracePoint(i, tuple(s), tuple(t), None, sd))
                record(model, data.n, i)
        else:
            cfg = sha.ShaConfig(
                variant=strategy.name, n0=n0, alpha=strategy.alpha, budget=n0 + config.iterations, seed=seed
            )

            def on_iteration(state):
                if state.iteration == 0:
                    return
                acq = state.history[-1]
                trace.append(TracePoint(state.iteration, tuple(acq.s_next), tuple(acq.t_next), acq.lower, acq.sd))
                record(state.model, state.n, state.iteration)

            sha.run(black_box, cfg, dom, X0, on_iteration)
    except Exception as exc:  # recorded, the other tasks proceed
        log.warning("%s replicate %d failed: %s", strategy.label, replicate, exc)
        return _TaskResult(rows, trace, f"{strategy.label} replicate {replicate}: {type(exc).__name__}: {exc}")
    return _TaskResult(rows, trace, None)


def _baseline_rows(config: ExperimentConfig):
    f = testbed.get(config.function)
    sol = robust.robust_baselines(f, config.cost_grid, seed=config.seed)
    rows = [CostRow(f.id, name, None, None, None, None, _sig(c.expected), _sig(c.maximum)) for name, (_, c) in sol.items()]
    meta = {name: {"s": [float(v) for v in u.s], "ce": c.expected, "cm": c.maximum} for name, (u, c) in sol.items()}
    return rows, meta


def run_experiment(config: ExperimentConfig, threads: int = 1, costs: bool = True) -> CostReport:
    """Run every strategy/replicate and append the two constant-decision baseline rows.

    Tasks are independent and seeded, so ``threads > 1`` (a process pool) gives the same
    report; results are merged in config order. ``costs=False`` only records point traces.
    """
    start = time.perf_counter()
    seeds = config.replicate_seeds()
    tasks = [(s, r, seeds[r]) for s in config.strategies for r in range(config.replicates)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_task, config, s, r, seed, costs) for s, r, seed in tasks]
            results = [fut.result() for fut in futures]
    else:
        results = [_run_task(config, s, r, seed, costs) for s, r, seed in tasks]

    rows, traces, failures = [], {}, []
    for (s, r, _), res in zip(tasks, results):
        rows.extend(res.rows)
        traces[(s.label, r)] = res.trace
        if res.failure:
            failures.append(res.failure)
    baselines = {}
    if costs:
        brows, baselines = _baseline_rows(config)
        rows.extend(brows)
    f = testbed.get(config.function)
    metadata = {
        "function": config.function,
        "p": f.p,
        "q": f.q,
        "n0": config.initial_size,
        "config": config.to_dict(),
        "replicate_seeds": seeds,
        "cost_grid": config.cost_grid.describe(f.q),
        "baselines": baselines,
        "failures": failures,
        "wall_clock_seconds": round(time.perf_counter() - start, 3),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }
    return CostReport(rows, metadata, traces)


# --- output ----------------------------------------------------------------------------


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.function, r.strategy] + [_fmt(v) for v in r[2:]])
    return buf.getvalue()


def parse_csv(text: str) -> list[CostRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")

    def opt(v, conv):
        return None if v == "" else conv(v)

    return [
        CostRow(fn, st, opt(a, float), opt(r, int), opt(i, int), opt(n, int), float(ce), float(cm))
        for fn, st, a, r, i, n, ce, cm in reader
    ]


def trace_csv(points, p: int, q: int) -> str:
    names = lambda c, k: [c] if k == 1 else [f"{c}{i + 1}" for i in range(k)]  # noqa: E731
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration"] + names("s", p) + names("t", q) + ["lower", "sd"])
    for pt in points:
        writer.writerow([pt.iteration] + [_fmt(v) for v in (*pt.s, *pt.t, pt.lower, pt.sd)])
    return buf.getvalue()


def _write(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def emit_report(report: CostReport, out_dir: str, fmt: str = "csv", prefix: Optional[str] = None) -> list[str]:
    """Write the cost table (CSV plus JSON metadata sidecar, or a single JSON document).

    Returns the written paths.
    """
    if not report.rows:
        raise ValueError("report has no rows")
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be csv or json, got {fmt!r}")
    prefix = prefix or report.metadata.get("function", "report")
    os.makedirs(out_dir, exist_ok=True)
    meta = json.dumps(report.metadata, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return [
            _write(os.path.join(out_dir, f"{prefix}.csv"), format_csv(report.rows)),
            _write(os.path.join(out_dir, f"{prefix}.meta.json"), meta),
        ]
    doc = {"metadata": report.metadata, "columns": list(CSV_HEADER), "rows": [list(r) for r in report.rows]}
    return [_write(os.path.join(out_dir, f"{prefix}.json"), json.dumps(doc, indent=2) + "\n")]


def emit_traces(report: CostReport, out_dir: str, prefix: Optional[str] = None) -> list[str]:
    """One point-trace CSV per strategy and replicate."""
    prefix = prefix or report.metadata.get("function", "report")
    p, q = report.metadata["p"], report.metadata["q"]
    os.makedirs(out_dir, exist_ok=True)
    return [
        _write(os.path.join(out_dir, f"{prefix}.trace.{label}.r{rep}.csv"), trace_csv(points, p, q))
        for (label, rep), points in report.traces.items()
    ]
