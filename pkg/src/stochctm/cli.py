"""Command-line interface.

Exit codes: 0 on success (verdicts live in the JSON payload and never
drive nonzero exits), 1 for usage or schema errors, 2 for internal
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .certify import build_A, certify, necessary_check
from .invariant import AssumptionError
from .lp import LpError
from .model import ControlConfig, ModelError
from .optimize import NotApplicableError, hotspot_algorithm, maximize_throughput
from .scenario import (
    ScenarioError,
    montecarlo,
    parse_config,
    parse_scenario,
    sweep,
    worker_count,
)
from .simulate import SimConfig, integrate, trajectory_csv

A_KINDS = {"uniform": "uniform", "weighted": "position_weighted", "hotspot": "hotspot"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _load_config(raw: str, spec):
    if os.path.exists(raw):
        with open(raw, "r", encoding="utf-8") as fh:
            raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"--config is not valid JSON ({exc})") from exc
    return parse_config(doc, spec)


def _parse_grid(raw: str):
    grid = {}
    for part in raw.split(","):
        try:
            name, rng = part.split("=")
            lo, hi, n = rng.split(":")
            axis = int(name.strip().lstrip("v"))
            grid[axis] = (float(lo), float(hi), int(n))
        except ValueError as exc:
            raise ScenarioError(
                f"bad grid component {part!r}; expected vK=lo:hi:n"
            ) from exc
    return grid


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stochctm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("validate", help="check a scenario file")
    q.add_argument("scenario")

    q = sub.add_parser("simulate", help="integrate one trajectory to CSV")
    q.add_argument("scenario")
    q.add_argument("--config", required=True)
    q.add_argument("--horizon", type=float, required=True)
    q.add_argument("--dt", type=float, default=1e-3)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--record", type=float, default=0.1)
    q.add_argument("--out", required=True)

    q = sub.add_parser("certify", help="drift-certificate verdict for a configuration")
    q.add_argument("scenario")
    q.add_argument("--config", required=True)
    q.add_argument("--A", choices=sorted(A_KINDS), default="uniform")
    q.add_argument("--gamma", type=float, default=1.0)

    q = sub.add_parser("optimize", help="maximize admitted inflow")
    q.add_argument("scenario")
    q.add_argument("--A", choices=sorted(A_KINDS), default="hotspot")
    q.add_argument("--gamma", type=float, default=1.0)

    q = sub.add_parser("hotspot", help="metering vector from the hotspot recursion")
    q.add_argument("scenario")

    q = sub.add_parser("sweep", help="stability verdicts over an inflow grid")
    q.add_argument("scenario")
    q.add_argument("--grid", required=True)
    q.add_argument("--w", nargs="*", default=None, help="metering patterns like 10 11")
    q.add_argument("--A", choices=sorted(A_KINDS), default="uniform")
    q.add_argument("--gamma", type=float, default=1.0)
    q.add_argument("--out", required=True)

    q = sub.add_parser("montecarlo", help="replicated simulations of one configuration")
    q.add_argument("scenario")
    q.add_argument("--config", required=True)
    q.add_argument("--runs", type=int, required=True)
    q.add_argument("--horizon", type=float, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--dt", type=float, default=2e-3)
    return p


def run(args) -> int:
    if args.command == "validate":
        spec, model, default, report = parse_scenario(args.scenario, strict=False)
        print(json.dumps({"valid": not report, "violations": report}))
        return 0

    spec, model, default, _ = parse_scenario(args.scenario)

    if args.command == "simulate":
        config = _load_config(args.config, spec)
        sim = SimConfig(
            horizon=args.horizon, step=args.dt, seed=args.seed, record_interval=args.record
        )
        traj = integrate(spec, model, config, sim)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(trajectory_csv(traj, spec))
        print(json.dumps({
            "rows": int(traj.times.size),
            "projection_correction": traj.projection_correction,
            "out": args.out,
        }))
        return 0

    if args.command == "certify":
        config = _load_config(args.config, spec)
        A = build_A(spec, A_KINDS[args.A], args.gamma)
        nec = necessary_check(spec, model, config)
        payload = {"necessary": nec.verdict, "witnesses": list(nec.witnesses)}
        try:
            res = certify(spec, model, config, A)
            payload["verdict"] = res.verdict
            if res.certificate is not None:
                payload["certificate"] = json.loads(res.certificate.to_json(res.verdict))
        except AssumptionError as exc:
            payload["verdict"] = "rejected"
            payload["reason"] = str(exc)
        print(json.dumps(payload))
        return 0

    if args.command == "optimize":
        A = build_A(spec, A_KINDS[args.A], args.gamma)
        res = maximize_throughput(spec, model, A)
        print(res.to_json())
        return 0

    if args.command == "hotspot":
        d = spec.demand
        if any(math.isinf(x) for x in d):
            raise ScenarioError("hotspot recursion needs finite demand in the scenario")
        w = hotspot_algorithm(spec, model, d)
        print(json.dumps({"w": list(w)}))
        return 0

    if args.command == "sweep":
        grid = _parse_grid(args.grid)
        K = spec.K
        if args.w:
            patterns = []
            for raw in args.w:
                if len(raw) != K or any(c not in "01" for c in raw):
                    raise ScenarioError(f"bad metering pattern {raw!r}")
                patterns.append(tuple(int(c) for c in raw))
        else:
            import itertools

            patterns = list(itertools.product((0, 1), repeat=K))
        A = build_A(spec, A_KINDS[args.A], args.gamma)
        result = sweep(spec, model, grid, patterns, A, workers=worker_count())
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(result.to_csv())
        counts = {}
        for pt in result.points:
            counts[pt.verdict] = counts.get(pt.verdict, 0) + 1
        print(json.dumps({"points": len(result.points), "verdicts": counts, "out": args.out}))
        return 0

    if args.command == "montecarlo":
        config = _load_config(args.config, spec)
        summary = montecarlo(
            spec, model, config, runs=args.runs, horizon=args.horizon,
            base_seed=args.seed, step=args.dt,
        )
        print(json.dumps({
            "runs": summary.runs,
            "mean_slope": summary.mean_slope,
            "slope_ci": list(summary.slope_ci),
            "mean_avg_queue": summary.mean_avg_queue,
            "mean_throughput": summary.mean_throughput,
        }))
        return 0

    raise ScenarioError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args)
    except (ScenarioError, NotApplicableError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
