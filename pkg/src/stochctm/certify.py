"""Drift-inequality stability certificates for on-ramp queues.

A configuration is certified stable when a quadratic-plus-linear Lyapunov
function of the combined occupancy y = C q + D n decreases on average at
every vertex of the backlogged part of the invariant set, simultaneously in
every capacity mode.  With the weight matrix A fixed, the unknown per-mode
offsets b^(i) enter linearly, so the certificate is a plain LP feasibility
problem:

    A (C G + D H) + sum_j nu_ij (b^(j) - b^(i)) <= -1   per (mode, vertex).

Rows are evaluated directly from A, C, D and the merge flows at the vertex;
the expanded per-coefficient forms floating around the problem disagree on
where the mainline ratios sit, so the matrix form is the single source of
truth here (see also the symbolic generator in ``optimize``, which is tested
against this evaluator).

The pairing matrices: C couples each queue with the upstream cell feeding
the same merge (first row [rho_1, 1, 0, ...], ones on the superdiagonal,
and a lone 1 in the bottom-right corner), D scales densities by the
fraction that continues downstream (diag(rho_1, ..., rho_{K-1}, 1)).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .invariant import AssumptionError, InvariantBounds, Vertex, compute_bounds, vertex_set
from .lp import LinearProgram, feasible, solve
from .model import (
    ControlConfig,
    HighwaySpec,
    MarkovCapacityModel,
    ModelError,
    cumulative_ratio,
    flow_rates,
    merge_flows,
    validate,
)

__all__ = [
    "ConstructionError",
    "DriftCertificate",
    "CertifyResult",
    "NecessaryResult",
    "drift_matrices",
    "build_A",
    "drift_row",
    "certify",
    "necessary_check",
    "refine_A_alternating",
]

DEFAULT_OFFSET_BOX = 1e6


class ConstructionError(ValueError):
    """A-matrix construction violates the admissibility conditions."""


def drift_matrices(spec: HighwaySpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairing matrices C, D and the all-ones vector e."""
    K = spec.K
    rho = spec.rho
    C = np.zeros((K, K))
    if K == 1:
        C[0, 0] = 1.0
    else:
        C[0, 0] = rho[0]
        C[0, 1] = 1.0
        for k in range(1, K - 1):
            C[k, k + 1] = 1.0
        C[K - 1, K - 1] = 1.0
    D = np.diag(np.append(rho[: K - 1], 1.0))
    return C, D, np.ones(K)


def check_A(spec: HighwaySpec, A: np.ndarray, tol: float = 1e-9) -> list[str]:
    """Admissibility: symmetry, the ratio ladder, positivity, normalization."""
    K = spec.K
    out = []
    if A.shape != (K, K):
        return [f"A must be {K}x{K}"]
    if not np.allclose(A, A.T, atol=tol):
        out.append("A must be symmetric")
    rho = spec.rho
    for k in range(K - 1):
        bad = A[k] - rho[k + 1] * A[k + 1] < -tol
        if bad.any():
            out.append(f"ladder condition fails in row {k + 1}")
    if not A[K - 1, K - 1] > 0:
        out.append("bottom-right entry must be positive")
    if (A[K - 1] < 1.0 - tol).any():
        out.append("last row must be >= 1 (normalization)")
    return out


def build_A(spec: HighwaySpec, kind: str, gamma: float = 1.0) -> np.ndarray:
    """Named Lyapunov weight constructions.

    - "uniform": every entry gamma.
    - "position_weighted": gamma (K-k+1)(K-h+1), penalizing upstream mass.
    - "hotspot": cumulative-ratio products tuned to a last-cell bottleneck;
      entry (k, h) is the product of the ratio chains from k+1 and h+1 to
      the last cell (reading the chain of an index at the last cell as 1).
    """
    if gamma < 1:
        raise ConstructionError("gamma must be at least 1")
    K = spec.K
    if kind == "uniform":
        A = gamma * np.ones((K, K))
    elif kind == "position_weighted":
        wgt = np.array([K - k + 1 for k in range(1, K + 1)], dtype=float)
        A = gamma * np.outer(wgt, wgt)
    elif kind == "hotspot":
        chain = np.array(
            [cumulative_ratio(spec, k + 1, K) for k in range(1, K)] + [1.0]
        )
        A = np.outer(chain, chain)
        A[K - 1, K - 1] = 1.0
    else:
        raise ConstructionError(f"unknown construction {kind!r}")
    problems = check_A(spec, A)
    if problems:
        raise ConstructionError(f"{kind} construction rejected: " + "; ".join(problems))
    return A


@dataclass(frozen=True)
class DriftCertificate:
    A: np.ndarray
    offsets: np.ndarray            # (modes, K)
    slacks: np.ndarray             # per-row drift value + 1 (<= 0 when valid)
    vacuous: bool = False

    def to_json(self, verdict: str) -> str:
        return json.dumps(
            {
                "A": self.A.tolist(),
                "b": self.offsets.tolist(),
                "slacks": self.slacks.tolist(),
                "verdict": verdict,
                "vacuous": self.vacuous,
            }
        )


@dataclass(frozen=True)
class CertifyResult:
    verdict: str                     # stable_certified | no_certificate
    certificate: DriftCertificate | None
    rows: int
    hit_offset_box: bool = False

    @property
    def certified(self) -> bool:
        return self.verdict == "stable_certified"


def drift_row(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    A: np.ndarray,
    b: np.ndarray,
    config: ControlConfig,
    mode: int,
    vertex: Vertex,
) -> np.ndarray:
    """Left-hand side of the drift inequality at one (mode, vertex)."""
    C, D, _ = drift_matrices(spec)
    flows = merge_flows(spec, model.F[mode], config, vertex.state(mode))
    G, H = flow_rates(spec, config.v, flows)
    base = A @ (C @ G + D @ H)
    nu = model.nu
    jump = np.zeros(spec.K)
    for j in range(model.mode_count):
        if j != mode and nu[mode, j] > 0:
            jump += nu[mode, j] * (b[j] - b[mode])
    return base + jump


def _certificate_rows(spec, model, A, config, vertices):
    """LP rows over the flat offset vector b (modes*K variables)."""
    m, K = model.mode_count, spec.K
    C, D, _ = drift_matrices(spec)
    nu = model.nu
    rows, rhs, tags = [], [], []
    for vertex in vertices:
        for i in range(m):
            flows = merge_flows(spec, model.F[i], config, vertex.state(i))
            G, H = flow_rates(spec, config.v, flows)
            base = A @ (C @ G + D @ H)
            for h in range(K):
                coeff = np.zeros(m * K)
                for j in range(m):
                    if j == i:
                        continue
                    coeff[j * K + h] += nu[i, j]
                    coeff[i * K + h] -= nu[i, j]
                rows.append(coeff)
                rhs.append(-1.0 - base[h])
                tags.append((i, vertex, h))
    return np.array(rows), np.array(rhs), tags


def certify(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    config: ControlConfig,
    A: np.ndarray,
    offset_box: float = DEFAULT_OFFSET_BOX,
) -> CertifyResult:
    """Decide the drift-certificate LP for a fixed weight matrix.

    An empty vertex set (every queue provably stays empty) certifies
    vacuously.  A certificate whose offsets sit on the search box is
    retried once with a ten times larger box.
    """
    report = validate(spec, model, config)
    if report:
        raise ModelError("invalid scenario: " + "; ".join(report))
    bounds = compute_bounds(spec, model, config)
    vertices = vertex_set(bounds)
    m, K = model.mode_count, spec.K
    if not vertices:
        cert = DriftCertificate(
            A=A, offsets=np.zeros((m, K)), slacks=np.zeros(0), vacuous=True
        )
        return CertifyResult("stable_certified", cert, rows=0)

    rows, rhs, tags = _certificate_rows(spec, model, A, config, vertices)
    box = offset_box
    for attempt in range(2):
        lp = LinearProgram(
            objective=np.zeros(m * K),
            rows=rows,
            rhs=rhs,
            bounds=((-box, box),) * (m * K),
        )
        ok, witness = feasible(lp)
        if not ok:
            return CertifyResult("no_certificate", None, rows=len(rhs))
        hit = bool(np.any(np.abs(witness) >= 0.999 * box))
        if not hit or attempt == 1:
            b = witness.reshape(m, K)
            # slack convention: drift value + 1, nonpositive when satisfied
            slacks = rows @ witness - rhs
            cert = DriftCertificate(A=A, offsets=b, slacks=slacks)
            return CertifyResult(
                "stable_certified", cert, rows=len(rhs), hit_offset_box=hit
            )
        box *= 10.0
    raise RuntimeError("unreachable")


@dataclass(frozen=True)
class NecessaryResult:
    verdict: str                 # passes | violates
    witnesses: tuple[str, ...]

    @property
    def passes(self) -> bool:
        return self.verdict == "passes"


def is_stationary_hotspot(spec: HighwaySpec) -> bool:
    """Only the last cell carries a capacity perturbation."""
    drops = spec.capacity_drop
    return bool(np.all(drops[:-1] == 0.0) and drops[-1] > 0.0)


def mean_bottleneck_capacity(spec: HighwaySpec, model: MarkovCapacityModel) -> float:
    """Steady-state average capacity of the last cell."""
    p = model.steady_state_probs
    return float(p @ model.F[:, spec.K - 1])


def necessary_check(
    spec: HighwaySpec, model: MarkovCapacityModel, config: ControlConfig
) -> NecessaryResult:
    """Cheap screens no stabilizing certificate can bypass.

    Violations: an inflow above its own buffer capacity, or (for a
    stationary hotspot) total inflow routed to the last cell above its
    steady-state mean capacity.
    """
    witnesses = []
    v = config.v
    for k in range(spec.K):
        if v[k] > spec.buffer_capacities[k]:
            witnesses.append(
                f"buffer capacity: v_{k + 1}={v[k]:g} > R_{k + 1}="
                f"{spec.buffer_capacities[k]:g}"
            )
    if is_stationary_hotspot(spec):
        routed = sum(
            cumulative_ratio(spec, k, spec.K) * v[k - 1] for k in range(1, spec.K + 1)
        )
        mean_cap = mean_bottleneck_capacity(spec, model)
        if routed > mean_cap:
            witnesses.append(f"hotspot mean-capacity: {routed:g} > {mean_cap:g}")
    verdict = "violates" if witnesses else "passes"
    return NecessaryResult(verdict, tuple(witnesses))


def _max_slack_given_A(spec, model, config, A, vertices, box) -> tuple[float, np.ndarray]:
    """min-max drift slack over offsets b for a fixed A."""
    m, K = model.mode_count, spec.K
    rows, rhs, _ = _certificate_rows(spec, model, A, config, vertices)
    nvar = m * K
    # variables (b, t): rows - t <= rhs  with  t = max slack shift
    lp_rows = np.hstack([rows, -np.ones((rows.shape[0], 1))])
    obj = np.zeros(nvar + 1)
    obj[-1] = -1.0  # maximize -t
    res = solve(
        LinearProgram(
            objective=obj,
            rows=lp_rows,
            rhs=rhs,
            bounds=((-box, box),) * nvar + ((-box, box),),
        )
    )
    if res.status != "optimal":
        raise ModelError(f"offset subproblem came back {res.status}")
    return float(res.x[-1]), res.x[:nvar].reshape(m, K)


def _max_slack_given_b(spec, model, config, b, vertices, box) -> tuple[float, np.ndarray]:
    """min-max drift slack over admissible symmetric A for fixed offsets."""
    K = spec.K
    m = model.mode_count
    C, D, _ = drift_matrices(spec)
    nu = model.nu
    pairs = [(k, h) for k in range(K) for h in range(k, K)]
    idx = {p: i for i, p in enumerate(pairs)}
    nvar = len(pairs) + 1  # plus t

    rows, rhs = [], []
    for vertex in vertices:
        for i in range(m):
            flows = merge_flows(spec, model.F[i], config, vertex.state(i))
            G, H = flow_rates(spec, config.v, flows)
            x = C @ G + D @ H
            jump = np.zeros(K)
            for j in range(m):
                if j != i:
                    jump += nu[i, j] * (b[j] - b[i])
            for h in range(K):
                coeff = np.zeros(nvar)
                for k in range(K):
                    coeff[idx[(min(h, k), max(h, k))]] += x[k]
                coeff[-1] = -1.0
                rows.append(coeff)
                rhs.append(-1.0 - jump[h])
    # ladder rows: rho_{k+1} A[k+1,h] - A[k,h] <= 0
    rho = spec.rho
    for k in range(K - 1):
        for h in range(K):
            coeff = np.zeros(nvar)
            coeff[idx[(min(k + 1, h), max(k + 1, h))]] += rho[k + 1]
            coeff[idx[(min(k, h), max(k, h))]] -= 1.0
            rows.append(coeff)
            rhs.append(0.0)
    # normalization: A[K-1, h] >= 1
    for h in range(K):
        coeff = np.zeros(nvar)
        coeff[idx[(min(K - 1, h), max(K - 1, h))]] = -1.0
        rows.append(coeff)
        rhs.append(-1.0)
    obj = np.zeros(nvar)
    obj[-1] = -1.0
    res = solve(
        LinearProgram(
            objective=obj,
            rows=np.array(rows),
            rhs=np.array(rhs),
            bounds=((-box, box),) * nvar,
        )
    )
    if res.status != "optimal":
        raise ModelError(f"weight subproblem came back {res.status}")
    A = np.zeros((K, K))
    for (k, h), i in idx.items():
        A[k, h] = A[h, k] = res.x[i]
    return float(res.x[-1]), A


def refine_A_alternating(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    config: ControlConfig,
    A0: np.ndarray,
    max_iters: int = 20,
    offset_box: float = DEFAULT_OFFSET_BOX,
) -> tuple[np.ndarray, CertifyResult, list[float]]:
    """Alternate offset and weight LPs, driving the worst slack down.

    The worst slack is non-increasing across iterations by construction
    (each half-step re-optimizes the same objective over one variable
    block).  Stops as soon as a certificate exists or the iteration cap is
    reached; returns the best A, its certify result, and the slack history.
    """
    problems = check_A(spec, A0)
    if problems:
        raise ConstructionError("; ".join(problems))
    first = certify(spec, model, config, A0, offset_box)
    if first.certified:
        return A0, first, []

    bounds = compute_bounds(spec, model, config)
    vertices = vertex_set(bounds)
    A = A0.copy()
    history = []
    slack, b = _max_slack_given_A(spec, model, config, A, vertices, offset_box)
    history.append(slack)
    for _ in range(max_iters):
        if slack <= 0:
            break
        slack_a, A_new = _max_slack_given_b(spec, model, config, b, vertices, offset_box)
        slack_b, b_new = _max_slack_given_A(spec, model, config, A_new, vertices, offset_box)
        # keep the monotone envelope
        if slack_b > slack + 1e-9:
            break
        A, b, slack = A_new, b_new, slack_b
        history.append(slack)
    result = certify(spec, model, config, A, offset_box)
    return A, result, history
