"""Stability-constrained throughput maximization and hotspot shortcuts.

The mixed-integer program is solved by exhaustive enumeration of the binary
metering vector (the auxiliary relaxation binaries are dominance-pruned to
zero and logged): for each metering pattern a linear subproblem maximizes
total admitted inflow subject to drift-certificate feasibility.

Subproblems are solved by outer approximation rather than by materializing
the full auxiliary-flow LP: for fixed (v, b) each (mode, queue-pattern,
congestion-pattern) block decouples into a tiny LP over its own auxiliary
flows, whose optimal value is convex in (v, b); violated blocks contribute
dual-based cuts to a small master LP.  A closed-form evaluation of each
block (auxiliary flows pushed to their bound-maximal values) screens for
violations cheaply and is exact away from degenerate clipping.

``build_milp`` still materializes the complete constraint system of the
big-M reformulation for a fixed binary assignment; it shares the symbolic
drift-row generator with the outer-approximation path, and the two are
cross-checked in the tests.

Queue patterns enumerated per subproblem are the single-queue patterns at
metered ramps: patterns with a queue at an unmetered ramp are dropped
(exactly what the big-M relaxation achieves), and multi-queue patterns are
implied by the single-queue ones because they only relax bounds.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .certify import (
    CertifyResult,
    check_A,
    certify,
    drift_matrices,
    is_stationary_hotspot,
    mean_bottleneck_capacity,
    necessary_check,
)
from .invariant import AssumptionError
from .lp import LinearProgram, LpError, solve
from .model import (
    ControlConfig,
    HighwaySpec,
    MarkovCapacityModel,
    ModelError,
    cumulative_ratio,
)

__all__ = [
    "MilpInstance",
    "OptResult",
    "SubproblemLog",
    "NotApplicableError",
    "drift_coefficients",
    "build_milp",
    "solve_fixed_metering",
    "maximize_throughput",
    "margin_criterion",
    "infinite_demand_optimum",
    "hotspot_algorithm",
]

OFFSET_BOX = 1e6
CUT_TOL = 1e-7


class NotApplicableError(ValueError):
    """Structural preconditions of a closed-form result are not met."""


def drift_coefficients(spec: HighwaySpec, A: np.ndarray):
    """Linear coefficients of the drift rows over (v, r, f).

    Row h of the drift block reads  Cv[h].v + Cr[h].r + Cf[h].f  plus the
    mode-coupling offset terms.  Derived from the matrix form:
    G = v - r and H = Mf f + r with Mf carrying -1 on the diagonal and the
    mainline ratios on the subdiagonal.
    """
    K = spec.K
    C, D, _ = drift_matrices(spec)
    Mf = -np.eye(K)
    for k in range(1, K):
        Mf[k, k - 1] = spec.mainline_ratios[k - 1]
    Cv = A @ C
    Cr = A @ (D - C)
    Cf = A @ D @ Mf
    return Cv, Cr, Cf


def _jump_coefficients(model: MarkovCapacityModel, K: int):
    """Per-mode coefficient matrix over the flat offset vector (modes*K)."""
    m = model.mode_count
    nu = model.nu
    out = []
    for i in range(m):
        J = np.zeros((K, m * K))
        for j in range(m):
            if j == i:
                continue
            for h in range(K):
                J[h, j * K + h] += nu[i, j]
                J[h, i * K + h] -= nu[i, j]
        out.append(J)
    return out


# ---------------------------------------------------------------------------
# explicit big-M reformulation for a fixed binary assignment


@dataclass(frozen=True)
class MilpInstance:
    lp: LinearProgram
    metering: tuple[int, ...]
    relax: tuple[int, ...]                       # the xi binaries
    blocks: tuple[tuple[int, tuple[int, ...], tuple[int, ...]], ...]
    dropped_blocks: int
    var_slices: dict
    big_m2: float


def _block_list(spec: HighwaySpec, model: MarkovCapacityModel):
    K = spec.K
    ys = [y for y in itertools.product((0, 1), repeat=K) if any(y)]
    zs = list(itertools.product((0, 1), repeat=K))
    return [(i, y, z) for i in range(model.mode_count) for y in ys for z in zs]


def build_milp(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    A: np.ndarray,
    w: tuple[int, ...],
    xi: tuple[int, ...],
    m1_mode: str = "drop",
    m1: float = 1e7,
    offset_box: float = OFFSET_BOX,
) -> MilpInstance:
    """Materialize the fixed-binaries LP of the big-M reformulation.

    ``m1_mode="drop"`` removes drift blocks deactivated by queue-at-
    unmetered-ramp patterns exactly; ``"bigM"`` keeps them with the M1 term
    on the right-hand side (equivalent for M1 large enough).
    """
    problems = check_A(spec, A)
    if problems:
        raise ModelError("; ".join(problems))
    K = spec.K
    if len(w) != K or len(xi) != K:
        raise ModelError("metering and relax vectors must have length K")
    m = model.mode_count
    blocks = _block_list(spec, model)
    Cv, Cr, Cf = drift_coefficients(spec, A)
    jumps = _jump_coefficients(model, K)
    Fmin = model.min_capacity
    d = np.array(spec.demand)
    finite_d = d[np.isfinite(d)]
    M2 = float(spec.R.sum() + spec.capacity.sum() + (finite_d.max() if finite_d.size else 0.0))

    nb = len(blocks)
    nvar = K + m * K + nb * 2 * K
    sl_v = slice(0, K)
    sl_b = slice(K, K + m * K)

    def f_idx(bi, k):
        return K + m * K + bi * 2 * K + k

    def r_idx(bi, k):
        return K + m * K + bi * 2 * K + K + k

    rows, rhs = [], []
    dropped = 0
    for bi, (i, y, z) in enumerate(blocks):
        relaxed = any(yk and wk for yk, wk in zip(y, w))
        if relaxed and m1_mode == "drop":
            dropped += 1
        else:
            extra = m1 * sum(yk * wk for yk, wk in zip(y, w)) if relaxed else 0.0
            for h in range(K):
                row = np.zeros(nvar)
                row[sl_v] = Cv[h]
                row[sl_b] = jumps[i][h]
                for k in range(K):
                    row[f_idx(bi, k)] = Cf[h, k]
                    row[r_idx(bi, k)] = Cr[h, k]
                rows.append(row)
                rhs.append(-1.0 + extra)
        # r bounds
        for k in range(K):
            if y[k] == 0:
                row = np.zeros(nvar)
                row[r_idx(bi, k)] = 1.0
                row[k] = -1.0
                rows.append(row)
                rhs.append(0.0)
        # f families; chains feed on the block's own discharges (see module
        # docstring: identical to the inflow chain on empty-queue patterns)
        for k in range(K):
            if z[k] == 0:
                row = np.zeros(nvar)
                row[f_idx(bi, k)] = 1.0
                row[r_idx(bi, k)] = -1.0
                for l in range(k):
                    row[r_idx(bi, l)] -= cumulative_ratio(spec, l + 1, k + 1)
                rows.append(row)
                rhs.append(0.0)
                for h in range(k):
                    row = np.zeros(nvar)
                    row[f_idx(bi, k)] = 1.0
                    row[r_idx(bi, k)] = -1.0
                    for l in range(h + 1, k):
                        row[r_idx(bi, l)] -= cumulative_ratio(spec, l + 1, k + 1)
                    rows.append(row)
                    rhs.append(cumulative_ratio(spec, h + 1, k + 1) * Fmin[h])
            if k + 1 < K and z[k + 1] == 1:
                row = np.zeros(nvar)
                row[f_idx(bi, k)] = spec.mainline_ratios[k]
                row[f_idx(bi, k + 1)] = -1.0
                row[r_idx(bi, k + 1)] = 1.0
                rows.append(row)
                rhs.append(0.0)
        # relax-gated inflow caps
        for k in range(1, K):
            row = np.zeros(nvar)
            row[k] = 1.0
            row[f_idx(bi, k)] = -1.0
            row[f_idx(bi, k - 1)] = spec.mainline_ratios[k - 1]
            rows.append(row)
            rhs.append(M2 * w[k] + M2 * (1 - xi[k]))
            row = np.zeros(nvar)
            row[k] = 1.0
            row[f_idx(bi, k)] = -1.0
            rows.append(row)
            rhs.append(M2 * (1 - w[k]) + M2 * (1 - xi[k]))

    bounds = []
    for k in range(K):
        bounds.append((0.0, d[k] if math.isfinite(d[k]) else math.inf))
    bounds.extend([(-offset_box, offset_box)] * (m * K))
    for bi, (i, y, z) in enumerate(blocks):
        for k in range(K):
            bounds.append((0.0, float(model.F[i, k])))   # f caps, family (f)
        for k in range(K):
            bounds.append((0.0, float(spec.R[k])))       # r caps
    obj = np.zeros(nvar)
    obj[sl_v] = 1.0
    lp = LinearProgram(objective=obj, rows=np.array(rows), rhs=np.array(rhs), bounds=tuple(bounds))
    return MilpInstance(
        lp=lp,
        metering=tuple(w),
        relax=tuple(xi),
        blocks=tuple(blocks),
        dropped_blocks=dropped,
        var_slices={"v": sl_v, "b": sl_b},
        big_m2=M2,
    )


# ---------------------------------------------------------------------------
# outer-approximation subproblem for one metering pattern


class _Block:
    """One (mode, queue-pattern, congestion-pattern) drift block."""

    def __init__(self, spec, model, i, y, z, Cv, Cr, Cf, jump):
        self.spec = spec
        self.model = model
        self.i, self.y, self.z = i, y, z
        self.Cv, self.Cr, self.Cf = Cv, Cr, Cf
        self.jump = jump
        K = spec.K
        self.K = K
        self.Fmin = model.min_capacity
        self.Fi = model.F[i]
        self.R = spec.R
        # f-bound descriptions: list per k of (const, v-grad, uses_r, g_chain)
        self.ratio = np.array(
            [[cumulative_ratio(spec, l + 1, k + 1) if l < k else 0.0 for l in range(K)] for k in range(K)]
        )

    def r_max(self, v):
        r = np.where(self.y, self.R, np.minimum(v, self.R))
        grad = np.zeros((self.K, self.K))
        for k in range(self.K):
            if not self.y[k] and v[k] < self.R[k]:
                grad[k, k] = 1.0
        return r, grad

    def f_max(self, v, r, rgrad):
        """Bound-maximal auxiliary cell flows; returns values, gradients, clip flag.

        Chain bounds feed on the block's own buffer discharges r rather
        than the admitted inflows: identical for empty-queue coordinates
        (where r is capped by v) and conservation-consistent for
        backlogged ones.
        """
        K = self.K
        f = np.zeros(K)
        grad = np.zeros((K, K))
        clipped = False
        for k in range(K - 1, -1, -1):
            cands = [(float(self.Fi[k]), np.zeros(K))]
            if self.z[k] == 0:
                base = r[k] + float(self.ratio[k, :k] @ r[:k]) if k else r[k]
                g = rgrad[k] + self.ratio[k, :k] @ rgrad[:k]
                cands.append((base, g))
                for h in range(k):
                    c = self.ratio[k, h] * self.Fmin[h] + r[k]
                    g2 = rgrad[k].copy()
                    for l in range(h + 1, k):
                        c += self.ratio[k, l] * r[l]
                        g2 += self.ratio[k, l] * rgrad[l]
                    cands.append((c, g2))
            if k + 1 < K and self.z[k + 1] == 1:
                rho = self.spec.mainline_ratios[k]
                cands.append(((f[k + 1] - r[k + 1]) / rho, (grad[k + 1] - rgrad[k + 1]) / rho))
            val, g = min(cands, key=lambda t: t[0])
            if val < 0.0:
                clipped = True
                val, g = 0.0, np.zeros(K)
            f[k] = val
            grad[k] = g
        return f, grad, clipped

    def evaluate(self, v, bflat):
        """Row values at the bound-maximal flows; upper bound on the block optimum."""
        r, rgrad = self.r_max(v)
        f, fgrad, clipped = self.f_max(v, r, rgrad)
        rows = self.Cv @ v + self.Cr @ r + self.Cf @ f + self.jump @ bflat
        return rows, (r, rgrad, f, fgrad, clipped)

    def cut(self, v, bflat):
        """Exact block optimum and a supporting cut via the block LP duals.

        Returns (phi, cut_v, cut_b, cut_rhs) with the valid inequality
        cut_v . v + cut_b . b <= cut_rhs equivalent to the tangent of the
        convex block value at (v, bflat); phi <= 0 means the block holds.
        """
        K = self.K
        nvar = 2 * K + 1  # f, r, t
        rows, rhs, vgrads = [], [], []
        base = self.Cv @ v + self.jump @ bflat
        for h in range(K):
            row = np.zeros(nvar)
            row[:K] = self.Cf[h]
            row[K : 2 * K] = self.Cr[h]
            row[-1] = -1.0
            rows.append(row)
            rhs.append(-1.0 - base[h])
            g = np.zeros(K + self.jump.shape[1])
            g[:K] = -self.Cv[h]
            g[K:] = -self.jump[h]
            vgrads.append(g)
        for k in range(K):
            if not self.y[k]:
                row = np.zeros(nvar)
                row[K + k] = 1.0
                rows.append(row)
                rhs.append(v[k])
                g = np.zeros(K + self.jump.shape[1])
                g[k] = 1.0
                vgrads.append(g)
            if self.z[k] == 0:
                row = np.zeros(nvar)
                row[k] = 1.0
                row[K + k] = -1.0
                row[K : K + k] -= self.ratio[k, :k]
                rows.append(row)
                rhs.append(0.0)
                vgrads.append(np.zeros(K + self.jump.shape[1]))
                for h in range(k):
                    row = np.zeros(nvar)
                    row[k] = 1.0
                    row[K + k] = -1.0
                    for l in range(h + 1, k):
                        row[K + l] -= self.ratio[k, l]
                    rows.append(row)
                    rhs.append(self.ratio[k, h] * self.Fmin[h])
                    vgrads.append(np.zeros(K + self.jump.shape[1]))
            if k + 1 < K and self.z[k + 1] == 1:
                row = np.zeros(nvar)
                row[k] = self.spec.mainline_ratios[k]
                row[k + 1] = -1.0
                row[K + k + 1] = 1.0
                rows.append(row)
                rhs.append(0.0)
                vgrads.append(np.zeros(K + self.jump.shape[1]))
        bounds = [(0.0, float(self.Fi[k])) for k in range(K)]
        bounds += [(0.0, float(self.R[k])) for k in range(K)]
        bounds.append((-math.inf, math.inf))
        obj = np.zeros(nvar)
        obj[-1] = -1.0
        res = solve(
            LinearProgram(objective=obj, rows=np.array(rows), rhs=np.array(rhs), bounds=tuple(bounds))
        )
        if res.status != "optimal":
            raise LpError(f"block subproblem came back {res.status}")
        phi = float(res.x[-1])
        grad = np.zeros(K + self.jump.shape[1])
        for mult, g in zip(res.dual, vgrads):
            if mult > 0:
                grad -= mult * g
        point = np.concatenate([v, bflat])
        cut_rhs = float(grad @ point) - phi
        return phi, grad, cut_rhs


@dataclass
class SubproblemLog:
    metering: tuple[int, ...]
    relax: tuple[int, ...]
    status: str
    throughput: float | None
    inflows: tuple[float, ...] | None
    certified: bool | None = None
    necessary: str | None = None


def _kelley_blocks(spec, model, A, w):
    K = spec.K
    Cv, Cr, Cf = drift_coefficients(spec, A)
    if (Cr > 1e-9).any() or (Cf > 1e-9).any():
        raise ModelError("weight matrix yields positive flow coefficients; "
                         "use a construction with non-increasing columns")
    jumps = _jump_coefficients(model, K)
    blocks = []
    for j in range(K):
        if w[j] == 1:
            continue  # queue pattern at an unmetered ramp: dropped
        y = tuple(1 if k == j else 0 for k in range(K))
        for z in itertools.product((0, 1), repeat=K):
            for i in range(model.mode_count):
                blocks.append(_Block(spec, model, i, y, z, Cv, Cr, Cf, jumps[i]))
    return blocks


def solve_fixed_metering(
    spec: HighwaySpec,
    model: MarkovCapacityModel,
    A: np.ndarray,
    w: tuple[int, ...],
    screens: bool = True,
    offset_box: float = OFFSET_BOX,
    max_rounds: int = 300,
):
    """Max total inflow for one metering pattern via outer approximation.

    With ``screens`` the subproblem also carries the necessary-condition
    rows (buffer caps, hotspot mean capacity) and, for unmetered ramps, the
    inflow caps that keep the no-queue assumption valid; these make every
    subproblem bounded even under infinite demand.

    Returns (J, v, rounds) or None when the subproblem is infeasible.
    """
    K = spec.K
    m = model.mode_count
    blocks = _kelley_blocks(spec, model, A, w)
    d = np.array(spec.demand)
    Fmin = model.min_capacity

    bounds = []
    for k in range(K):
        ub = d[k]
        if screens:
            ub = min(ub, spec.R[k])
            if w[k] == 1:
                ub = min(ub, Fmin[k])
        bounds.append((0.0, ub if math.isfinite(ub) else math.inf))
    bounds.extend([(-offset_box, offset_box)] * (m * K))

    nvar = K + m * K
    static_rows, static_rhs = [], []
    if screens and is_stationary_hotspot(spec):
        row = np.zeros(nvar)
        for k in range(K):
            row[k] = cumulative_ratio(spec, k + 1, K)
        static_rows.append(row)
        static_rhs.append(mean_bottleneck_capacity(spec, model))

    cuts_rows = list(static_rows)
    cuts_rhs = list(static_rhs)

    def run(objective, extra_rows, extra_rhs):
        rounds = 0
        while True:
            rounds += 1
            if rounds > max_rounds:
                raise LpError("outer approximation did not converge")
            lp = LinearProgram(
                objective=objective,
                rows=np.array(cuts_rows + extra_rows) if cuts_rows or extra_rows else np.zeros((0, nvar)),
                rhs=np.array(cuts_rhs + extra_rhs),
                bounds=tuple(bounds),
            )
            res = solve(lp)
            if res.status == "infeasible":
                return None, rounds
            if res.status == "unbounded":
                raise LpError("subproblem unbounded; supply demand caps or screens")
            v, bflat = res.x[:K], res.x[K:]
            violated = []
            for blk in blocks:
                rows, _ = blk.evaluate(v, bflat)
                worst = float(rows.max() + 1.0)
                if worst > CUT_TOL:
                    violated.append((worst, blk))
            if not violated:
                return res, rounds
            violated.sort(key=lambda t: -t[0])
            added = 0
            for _, blk in violated:
                phi, grad, cut_rhs = blk.cut(v, bflat)
                if phi > CUT_TOL:
                    cuts_rows.append(grad)
                    cuts_rhs.append(cut_rhs)
                    added += 1
                if added >= max(4, K):
                    break
            if added == 0:
                # screening was conservative; all confirmed satisfied
                return res, rounds

    obj = np.zeros(nvar)
    obj[:K] = 1.0
    res, rounds = run(obj, [], [])
    if res is None:
        return None
    J = float(res.objective)
    # lexicographic refinement for a deterministic representative
    fixed_rows, fixed_rhs = [], []
    row = np.zeros(nvar)
    row[:K] = -1.0
    fixed_rows.append(row.copy())
    fixed_rhs.append(-(J - 1e-7))
    v = res.x[:K]
    for k in range(K):
        obj_k = np.zeros(nvar)
        obj_k[k] = 1.0
        res_k, extra = run(obj_k, fixed_rows, fixed_rhs)
        rounds += extra
        if res_k is None:
            break
        v = res_k.x[:K]
        row = np.zeros(nvar)
        row[k] = -1.0
        fixed_rows.append(row)
        fixed_rhs.append(-(float(v[k]) - 1e-7))
    v = np.clip(v, 0.0, [b[1] for b in bounds[:K]])
    return float(v.sum()), v, rounds


# ---------------------------------------------------------------------------
# closed-form hotspot results


def _margin_sets(spec: HighwaySpec, model: MarkovCapacityModel):
    if spec.K != 2:
        raise NotApplicableError("margin criterion needs a two-cell highway")
    if spec.mainline_ratios[0] != 1.0:
        raise NotApplicableError("margin criterion assumes no off-ramp (rho_1 = 1)")
    if spec.capacity_drop[0] != 0.0:
        raise NotApplicableError("margin criterion needs the perturbation at cell 2 only")
    if spec.cells[0].nominal_capacity != spec.buffer_capacities[0]:
        raise NotApplicableError("margin criterion assumes R_1 = F_1")


def margin_criterion(
    spec: HighwaySpec, model: MarkovCapacityModel, d: tuple[float, float]
) -> list[ControlConfig]:
    """Prop-style metering rule for the two-cell hotspot at feasible demand.

    Compares the mainline margin F_1 - d_1 against the ramp margin
    R_2 - d_2: the larger margin keeps priority.  Both configurations are
    returned at equality.
    """
    _margin_sets(spec, model)
    if any(not math.isfinite(x) for x in d):
        raise NotApplicableError("margin criterion needs finite demand")
    F1 = spec.cells[0].nominal_capacity
    R2 = spec.buffer_capacities[1]
    main_margin = F1 - d[0]
    ramp_margin = R2 - d[1]
    out = []
    if main_margin >= ramp_margin:
        out.append(ControlConfig(inflows=tuple(d), metering=(1, 1)))
    if main_margin <= ramp_margin:
        out.append(ControlConfig(inflows=tuple(d), metering=(1, 0)))
    return out


@dataclass(frozen=True)
class IntervalSet:
    """Inflow pairs on the mean-capacity line with one-sided margin bounds."""

    metering: tuple[int, int]
    total: float
    v1_max: float               # strict for the metered variant, see strict_axis
    v2_max: float
    strict_axis: int            # which coordinate's cap is strict

    def contains(self, v: tuple[float, float], tol: float = 1e-9) -> bool:
        if abs(v[0] + v[1] - self.total) > max(tol, 1e-9 * max(1.0, self.total)):
            return False
        if v[0] < -tol or v[1] < -tol:
            return False
        caps = (self.v1_max, self.v2_max)
        for axis in (0, 1):
            if axis == self.strict_axis:
                if not v[axis] < caps[axis] - 0.0:
                    return False
            elif v[axis] > caps[axis] + tol:
                return False
        return True

    @property
    def empty(self) -> bool:
        lo = self.total - (self.v2_max if self.strict_axis == 0 else self.v1_max)
        cap = self.v1_max if self.strict_axis == 0 else self.v2_max
        return lo >= cap

    def representative(self) -> tuple[float, float] | None:
        if self.empty:
            return None
        if self.strict_axis == 0:
            v1 = min(self.v1_max - 1e-6 * max(1.0, self.v1_max), self.total)
            v1 = max(v1, self.total - self.v2_max, 0.0)
            return (v1, self.total - v1)
        v2 = min(self.v2_max - 1e-6 * max(1.0, self.v2_max), self.total)
        v2 = max(v2, self.total - self.v1_max, 0.0)
        return (self.total - v2, v2)


@dataclass(frozen=True)
class InfiniteDemandOptimum:
    mean_capacity: float
    metered_set: IntervalSet      # paired with metering (1, 0)
    unmetered_set: IntervalSet    # paired with metering (1, 1)

    def optimal_configs(self) -> list[ControlConfig]:
        out = []
        for s in (self.unmetered_set, self.metered_set):
            rep = s.representative()
            if rep is not None:
                out.append(ControlConfig(inflows=rep, metering=s.metering))
        return out


def infinite_demand_optimum(
    spec: HighwaySpec, model: MarkovCapacityModel
) -> InfiniteDemandOptimum:
    """Optimal inflow sets for the two-cell hotspot with unlimited demand.

    The achievable throughput is the mean bottleneck capacity; the two sets
    describe which splits of it across the two inflows admit a certificate
    under each metering choice.
    """
    _margin_sets(spec, model)
    F1 = spec.cells[0].nominal_capacity
    F2 = spec.cells[1].nominal_capacity
    D2 = spec.cells[1].capacity_drop
    R2 = spec.buffer_capacities[1]
    fbar = mean_bottleneck_capacity(spec, model)
    gap = F2 - fbar
    metered = IntervalSet(
        metering=(1, 0),
        total=fbar,
        v1_max=min(F1, F2 - D2),
        v2_max=R2 - gap,
        strict_axis=0,
    )
    unmetered = IntervalSet(
        metering=(1, 1),
        total=fbar,
        v1_max=F1 - gap,
        v2_max=min(R2, F2 - D2),
        strict_axis=1,
    )
    return InfiniteDemandOptimum(fbar, metered, unmetered)


def hotspot_algorithm(
    spec: HighwaySpec, model: MarkovCapacityModel, d: tuple[float, ...]
) -> tuple[int, ...]:
    """Metering vector from the backward/forward margin recursion.

    Conventions: ramp 1 is the mainline source and is never metered; the
    supply symbol in the admit test is the worst-case backward supply; the
    sweep runs through the last cell, skipping the free-flow shortcut
    there; a cell whose downstream demand fits even the worst supply keeps
    its ramp unmetered and its guaranteed-discharge value from the demand
    chain (metering is pointless where no queue can form).
    """
    K = spec.K
    if not is_stationary_hotspot(spec):
        raise NotApplicableError("hotspot recursion needs a stationary hotspot")
    if any(not math.isfinite(x) for x in d) or len(d) != K:
        raise NotApplicableError("needs a finite demand vector of length K")
    F = spec.capacity
    R = spec.R
    rho = spec.mainline_ratios
    drop = spec.capacity_drop[K - 1]

    T = np.zeros(K)
    T[K - 1] = F[K - 1] - drop - d[K - 1]
    for k in range(K - 2, -1, -1):
        T[k] = max(T[k + 1] - d[k + 1], 0.0)

    w = [1] * K
    f = np.zeros(K)
    f[0] = F[0]
    for k in range(1, K):
        routed = sum(cumulative_ratio(spec, j + 1, k + 1) * d[j] for j in range(k))
        f[k] = min(rho[k - 1] * f[k - 1] + d[k], routed + R[k])
        free_flow = False
        if k + 1 < K:
            through = routed + d[k] + d[k + 1]
            free_flow = through < T[k + 1] / rho[k]
        if free_flow:
            pass  # no contention at this merge; keep the ramp unmetered
        elif R[k] - d[k] > rho[k - 1] * (F[k - 1] - f[k - 1]):
            w[k] = 0
            if routed + d[k] <= T[k]:
                f[k] = routed + R[k]
        else:
            w[k] = 1
            f[k] = f[k - 1] + d[k]
    return tuple(w)


# ---------------------------------------------------------------------------
# the enumerating optimizer


@dataclass
class OptResult:
    throughput: float
    inflows: tuple[float, ...]
    metering: tuple[int, ...]
    relax: tuple[int, ...]
    certificate: CertifyResult | None
    log: list[SubproblemLog]
    subproblem_count: int
    pruned_count: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "J": self.throughput,
                "v": list(self.inflows),
                "w": list(self.metering),
                "xi": list(self.relax),
                "certificate": (
                    json.loads(self.certificate.certificate.to_json(self.certificate.verdict))
                    if self.certificate and self.certificate.certificate
                    else None
                ),
                "subproblem_count": self.subproblem_count,
                "pruned_count": self.pruned_count,
            }
        )


def _margin_preference(spec, model, J, v, d) -> set[tuple[int, ...]] | None:
    """Prescribed metering patterns when the two-cell margin rule applies."""
    try:
        configs = margin_criterion(spec, model, tuple(d))
    except NotApplicableError:
        return None
    if abs(J - float(np.sum(d))) > 1e-6 * (1.0 + abs(J)):
        return None
    if np.max(np.abs(np.asarray(v) - np.asarray(d))) > 1e-6 * (1.0 + float(np.max(d))):
        return None
    return {c.metering for c in configs}


def maximize_throughput(
    spec: HighwaySpec, model: MarkovCapacityModel, A: np.ndarray
) -> OptResult:
    """Enumerate metering patterns, solve each subproblem, certify the winner.

    Relaxation binaries are pruned by dominance (zero relaxes both gated
    rows, so a maximizer never prefers anything else) and counted in
    ``pruned_count``.  Candidates are ranked by throughput, then by the
    two-cell margin rule whenever it applies at full admission, then by
    fewest metered ramps, then lexicographically.  The winner is the first
    candidate that passes the necessary screens and re-certifies; if none
    does, the all-off zero-inflow fallback is returned.
    """
    K = spec.K
    if K > 8:
        raise ModelError("binary enumeration is guarded at K <= 8")
    d = np.array(spec.demand)
    log: list[SubproblemLog] = []
    candidates = []
    for w in itertools.product((0, 1), repeat=K):
        out = solve_fixed_metering(spec, model, A, w)
        if out is None:
            log.append(SubproblemLog(w, (0,) * K, "infeasible", None, None))
            continue
        J, v, _ = out
        log.append(SubproblemLog(w, (0,) * K, "optimal", J, tuple(v)))
        candidates.append((J, tuple(v), w))

    def sort_key(cand):
        J, v, w = cand
        pref = _margin_preference(spec, model, J, v, d)
        margin_rank = 0
        if pref is not None:
            margin_rank = 0 if w in pref else 1
        metered = sum(1 - x for x in w)
        return (-J, margin_rank, metered, w)

    pruned = (2 ** K) * (2 ** K - 1)  # non-zero relax assignments, dominated
    winner = None
    for J, v, w in sorted(candidates, key=sort_key):
        config = ControlConfig(inflows=v, metering=w)
        entry = next(e for e in log if e.metering == w)
        nec = necessary_check(spec, model, config)
        entry.necessary = nec.verdict
        if not nec.passes:
            entry.certified = False
            continue
        try:
            cert = certify(spec, model, config, A)
        except (AssumptionError, ModelError):
            entry.certified = False
            continue
        entry.certified = cert.certified
        if cert.certified:
            winner = OptResult(
                throughput=J,
                inflows=v,
                metering=w,
                relax=(0,) * K,
                certificate=cert,
                log=log,
                subproblem_count=len(log),
                pruned_count=pruned,
            )
            break
    if winner is None:
        fallback = ControlConfig(inflows=(0.0,) * K, metering=(1,) * K)
        cert = certify(spec, model, fallback, A)
        winner = OptResult(
            throughput=0.0,
            inflows=(0.0,) * K,
            metering=(1,) * K,
            relax=(0,) * K,
            certificate=cert,
            log=log,
            subproblem_count=len(log),
            pruned_count=pruned,
        )
    return winner
