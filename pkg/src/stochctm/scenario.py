"""Scenario files, stability sweeps, and Monte Carlo validation runs.

Scenarios are JSON documents carrying the highway geometry, the Markov
capacity model, an optional default control configuration, and a
``merge_semantics`` tag whose only supported value is "corrected" (the
repaired merge-priority reading; the tag keeps the choice visible in every
scenario file).  Unknown fields are rejected with field-precise messages.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .certify import certify, necessary_check
from .invariant import AssumptionError
from .lp import LpError
from .model import (
    CellParams,
    ControlConfig,
    HighwaySpec,
    HybridState,
    MarkovCapacityModel,
    ModelError,
    merge_flows,
    validate,
)
from .simulate import (
    QueueStats,
    Trajectory,
    fold_seed,
    integrate_batch,
    queue_stats,
    sample_mode_path,
)

__all__ = [
    "ScenarioError",
    "SweepResult",
    "MonteCarloSummary",
    "parse_scenario",
    "parse_scenario_dict",
    "scenario_to_dict",
    "parse_config",
    "sweep",
    "montecarlo",
    "worker_count",
]

MERGE_SEMANTICS = "corrected"
POINT_CAP = 10**6


class ScenarioError(ValueError):
    pass


def worker_count() -> int:
    cap = os.environ.get("STOCHCTM_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError as exc:
            raise ScenarioError(f"STOCHCTM_THREADS must be an integer, got {cap!r}") from exc
    return min(4, os.cpu_count() or 1)


def _number(value, where, allow_inf=False):
    if isinstance(value, str):
        if allow_inf and value in ("inf", "Infinity"):
            return math.inf
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {type(value).__name__}")
    if math.isnan(value):
        raise ScenarioError(f"{where}: NaN is not allowed")
    if math.isinf(value) and not allow_inf:
        raise ScenarioError(f"{where}: must be finite")
    return float(value)


def _number_list(values, where, allow_inf=False):
    if not isinstance(values, list):
        raise ScenarioError(f"{where}: expected a list")
    return [_number(v, f"{where}[{i + 1}]", allow_inf) for i, v in enumerate(values)]


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ScenarioError(f"{where}: expected an object")
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = set(allowed) - set(obj)
    if missing:
        raise ScenarioError(f"{where}: missing field(s) {sorted(missing)}")


CELL_FIELDS = [
    "free_flow_speed",
    "nominal_capacity",
    "capacity_drop",
    "congestion_wave_speed",
    "jam_density",
]


def parse_scenario_dict(
    doc: dict, strict: bool = True
) -> tuple[HighwaySpec, MarkovCapacityModel, ControlConfig | None, list[str]]:
    """Validate and build a scenario from a parsed JSON document.

    With ``strict`` a non-empty invariant report raises; otherwise the
    report is returned alongside the parsed objects.
    """
    top = ["version", "merge_semantics", "highway", "markov"]
    has_default = isinstance(doc, dict) and "default_config" in doc
    _check_keys(doc, top + (["default_config"] if has_default else []), "scenario")
    if doc["version"] != 1:
        raise ScenarioError(f"version: unsupported value {doc['version']!r}")
    if doc["merge_semantics"] != MERGE_SEMANTICS:
        raise ScenarioError(
            f"merge_semantics: only {MERGE_SEMANTICS!r} is supported, "
            f"got {doc['merge_semantics']!r}"
        )

    hw = doc["highway"]
    _check_keys(hw, ["cells", "buffer_capacities", "mainline_ratios", "demand"], "highway")
    if not isinstance(hw["cells"], list) or not hw["cells"]:
        raise ScenarioError("highway.cells: expected a nonempty list")
    cells = []
    for i, cd in enumerate(hw["cells"], start=1):
        _check_keys(cd, CELL_FIELDS, f"highway.cells[{i}]")
        cells.append(
            CellParams(**{f: _number(cd[f], f"highway.cells[{i}].{f}") for f in CELL_FIELDS})
        )
    spec = HighwaySpec(
        cells=tuple(cells),
        buffer_capacities=tuple(_number_list(hw["buffer_capacities"], "highway.buffer_capacities")),
        mainline_ratios=tuple(_number_list(hw["mainline_ratios"], "highway.mainline_ratios")),
        demand=tuple(_number_list(hw["demand"], "highway.demand", allow_inf=True)),
    )

    mk = doc["markov"]
    _check_keys(mk, ["capacity_table", "rate_matrix"], "markov")
    if not isinstance(mk["capacity_table"], list) or not mk["capacity_table"]:
        raise ScenarioError("markov.capacity_table: expected a nonempty list")
    table = tuple(
        tuple(_number_list(row, f"markov.capacity_table[{i + 1}]"))
        for i, row in enumerate(mk["capacity_table"])
    )
    if not isinstance(mk["rate_matrix"], list):
        raise ScenarioError("markov.rate_matrix: expected a list")
    rates = tuple(
        tuple(_number_list(row, f"markov.rate_matrix[{i + 1}]"))
        for i, row in enumerate(mk["rate_matrix"])
    )
    model = MarkovCapacityModel(capacity_table=table, rate_matrix=rates)

    default = None
    if has_default:
        default = parse_config(doc["default_config"], spec, where="default_config")

    report = validate(spec, model, default)
    if strict and report:
        raise ScenarioError("invalid scenario: " + "; ".join(report))
    return spec, model, default, report


def parse_scenario(path: str, strict: bool = True):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: not valid JSON ({exc})") from exc
    return parse_scenario_dict(doc, strict=strict)


def parse_config(obj, spec: HighwaySpec, where: str = "config") -> ControlConfig:
    _check_keys(obj, ["inflows", "metering"], where)
    inflows = _number_list(obj["inflows"], f"{where}.inflows")
    metering = obj["metering"]
    if not isinstance(metering, list) or any(m not in (0, 1) for m in metering):
        raise ScenarioError(f"{where}.metering: expected a list of 0/1")
    config = ControlConfig(inflows=tuple(inflows), metering=tuple(int(m) for m in metering))
    problems = config.violations(spec)
    if problems:
        raise ScenarioError(f"{where}: " + "; ".join(problems))
    return config


def scenario_to_dict(
    spec: HighwaySpec, model: MarkovCapacityModel, default: ControlConfig | None = None
) -> dict:
    doc = {
        "version": 1,
        "merge_semantics": MERGE_SEMANTICS,
        "highway": {
            "cells": [
                {f: getattr(c, f) for f in CELL_FIELDS} for c in spec.cells
            ],
            "buffer_capacities": list(spec.buffer_capacities),
            "mainline_ratios": list(spec.mainline_ratios),
            "demand": ["inf" if math.isinf(d) else d for d in spec.demand],
        },
        "markov": {
            "capacity_table": [list(r) for r in model.capacity_table],
            "rate_matrix": [list(r) for r in model.rate_matrix],
        },
    }
    if default is not None:
        doc["default_config"] = {
            "inflows": list(default.inflows),
            "metering": list(default.metering),
        }
    return doc


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepPoint:
    inflows: tuple[float, ...]
    metering: tuple[int, ...]
    verdict: str                  # stable_certified | violates_necessary | unknown
    throughput: float


@dataclass
class SweepResult:
    axes: dict
    patterns: list[tuple[int, ...]]
    points: list[SweepPoint]

    def to_csv(self) -> str:
        K = len(self.points[0].inflows) if self.points else 0
        header = [f"v{k}" for k in range(1, K + 1)] + ["w_pattern", "verdict", "J"]
        lines = [",".join(header)]
        for p in self.points:
            row = [f"{x:.10g}" for x in p.inflows]
            row.append("".join(str(int(w)) for w in p.metering))
            row.append(p.verdict)
            row.append(f"{p.throughput:.10g}")
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def classify_point(spec, model, config, A) -> str:
    """Verdict pipeline: necessary screen first, then the certificate LP."""
    if not necessary_check(spec, model, config).passes:
        return "violates_necessary"
    try:
        res = certify(spec, model, config, A)
    except (AssumptionError, ModelError, LpError):
        return "unknown"
    return "stable_certified" if res.certified else "unknown"


def sweep(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    grid: dict[int, tuple[float, float, int]],
    patterns: list[tuple[int, ...]],
    A: np.ndarray,
    workers: int | None = None,
) -> SweepResult:
    """Classify every grid point under every metering pattern.

    ``grid`` maps 1-based inflow indices to (lo, hi, count); at most two
    axes; inflows off the grid axes stay at zero.  Points are dispatched to
    a thread pool and emitted in grid order.
    """
    K = spec.K
    if len(grid) > 2:
        raise ScenarioError("sweep supports at most two inflow axes")
    for axis in grid:
        if not (1 <= axis <= K):
            raise ScenarioError(f"grid axis v{axis} out of range")
    axes_vals = {
        axis: np.linspace(lo, hi, n) for axis, (lo, hi, n) in sorted(grid.items())
    }
    counts = [len(v) for v in axes_vals.values()]
    total = int(np.prod(counts)) * max(1, len(patterns))
    if total > POINT_CAP:
        raise ScenarioError(f"grid has {total} points, cap is {POINT_CAP}")

    jobs = []
    for combo in itertools.product(*axes_vals.values()):
        v = [0.0] * K
        for axis, val in zip(axes_vals.keys(), combo):
            v[axis - 1] = float(val)
        for w in patterns:
            jobs.append((tuple(v), tuple(w)))

    def work(job):
        v, w = job
        config = ControlConfig(inflows=v, metering=w)
        verdict = classify_point(spec, model, config, A)
        return SweepPoint(v, w, verdict, float(sum(v)))

    n_workers = workers or worker_count()
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            points = list(pool.map(work, jobs))
    else:
        points = [work(j) for j in jobs]
    return SweepResult(axes=grid, patterns=list(patterns), points=points)


# ---------------------------------------------------------------------------
# Monte Carlo validation


@dataclass
class MonteCarloSummary:
    runs: int
    horizon: float
    stats: list[QueueStats]
    mean_slope: float
    slope_ci: tuple[float, float]    # 95% normal approximation
    mean_avg_queue: float
    mean_throughput: float


def montecarlo(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    config: ControlConfig,
    runs: int,
    horizon: float,
    base_seed: int,
    step: float = 2e-3,
    record_interval: float = 0.5,
) -> MonteCarloSummary:
    """Independent seeded replications with batched integration.

    Run j uses the seed fold of (base_seed, j); the batch advances in
    lockstep, which is arithmetically identical to running each seed alone.
    """
    if runs < 1:
        raise ModelError("need at least one run")
    if horizon <= 0:
        raise ModelError("horizon must be positive")
    K = spec.K
    paths = [
        sample_mode_path(model, horizon, fold_seed(base_seed, j)) for j in range(runs)
    ]
    zeros = np.zeros((runs, K))
    times, modes, qs, ns, corr = integrate_batch(
        spec, model, config, zeros, zeros.copy(), paths, horizon, step, record_interval
    )
    stats = []
    for j in range(runs):
        T = times.size
        ramp = np.empty((T, K))
        cell = np.empty((T, K))
        for idx in range(T):
            st = HybridState(
                mode=int(modes[idx, j]),
                queues=tuple(qs[idx, j]),
                densities=tuple(ns[idx, j]),
            )
            fl = merge_flows(spec, model.F[st.mode], config, st)
            ramp[idx] = fl.ramp_flow
            cell[idx] = fl.cell_flow
        traj = Trajectory(
            times=times,
            modes=modes[:, j],
            queues=qs[:, j],
            densities=ns[:, j],
            ramp_flows=ramp,
            cell_flows=cell,
            jumps=paths[j],
            projection_correction=float(corr[j]),
        )
        stats.append(queue_stats(traj))
    slopes = np.array([s.tail_growth_slope for s in stats])
    mean = float(slopes.mean())
    if runs > 1:
        half = 1.96 * float(slopes.std(ddof=1)) / math.sqrt(runs)
    else:
        half = 0.0
    return MonteCarloSummary(
        runs=runs,
        horizon=horizon,
        stats=stats,
        mean_slope=mean,
        slope_ci=(mean - half, mean + half),
        mean_avg_queue=float(np.mean([s.time_avg_total_queue for s in stats])),
        mean_throughput=float(np.mean([s.discharged_throughput for s in stats])),
    )
