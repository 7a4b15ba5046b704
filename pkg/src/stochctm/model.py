"""Highway model: static scenario data and deterministic flow equations.

A highway segment is divided into K mainline cells, each fed by one on-ramp
buffer and drained by one off-ramp.  Cell capacities switch between a nominal
value and a reduced value according to a finite-state Markov chain ("modes").

UNIT CONVENTIONS
----------------
  - rates (capacities, flows, demands, inflows): veh/hr
  - speeds (free-flow, congestion wave): km/hr
  - densities: veh/km
  - queues: veh
  - time: hr
  - cell length is fixed at 1 km, so density change rates equal flow
    differences numerically.

MERGE SEMANTICS
---------------
Ramp k merges into cell k and competes with the flow arriving from cell k-1
for cell k's receiving capacity.  The metering state of ramp k decides the
priority at that merge:

  - w_k = 0 ("metering on"): mainline first.  f_{k-1} takes as much of
    T_k as it can (divided by rho_{k-1} since only that fraction of the
    cell k-1 outflow continues); the ramp gets the leftover.
  - w_k = 1 ("metering off"): the ramp discharges first, up to T_k; the
    mainline flow is limited by the leftover supply.

Buffer 1 has no mainline competitor, so r_1 = min{D_1, T_1} regardless of
w_1.  The last cell discharges freely: f_K = S_K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "CellParams",
    "HighwaySpec",
    "MarkovCapacityModel",
    "ControlConfig",
    "HybridState",
    "FlowSnapshot",
    "ModelError",
    "cumulative_ratio",
    "sending_flow",
    "receiving_flow",
    "buffer_demand",
    "merge_flows",
    "vector_field",
    "steady_state",
    "validate",
]

INF = math.inf


class ModelError(ValueError):
    """Raised for malformed scenario data (reducible chain, bad indices...)."""


@dataclass(frozen=True)
class CellParams:
    """Triangular fundamental diagram parameters of one mainline cell."""

    free_flow_speed: float      # alpha, km/hr
    nominal_capacity: float     # F, veh/hr
    capacity_drop: float        # Delta, veh/hr (0 = deterministic cell)
    congestion_wave_speed: float  # beta, km/hr
    jam_density: float          # n_max, veh/km

    def violations(self, k: int) -> list[str]:
        out = []
        if not self.free_flow_speed > 0:
            out.append(f"cell {k}: free_flow_speed must be positive")
        if not self.congestion_wave_speed > 0:
            out.append(f"cell {k}: congestion_wave_speed must be positive")
        if not self.jam_density > 0:
            out.append(f"cell {k}: jam_density must be positive")
        if not (0 <= self.capacity_drop <= self.nominal_capacity):
            out.append(f"cell {k}: capacity_drop must lie in [0, nominal_capacity]")
        if self.free_flow_speed > 0 and self.jam_density > 0:
            if not self.nominal_capacity / self.free_flow_speed < self.jam_density:
                out.append(
                    f"cell {k}: critical density must be below jam density "
                    "(nominal_capacity / free_flow_speed < jam_density)"
                )
        return out


@dataclass(frozen=True)
class HighwaySpec:
    """Static geometry of a K-cell highway with K on-ramp buffers.

    ``mainline_ratios[k]`` is the fraction of cell k+1's outflow continuing
    to the next cell (1-based cell k); the terminal ratio is 0 because all
    flow out of the last cell leaves the highway.  ``demand`` entries may be
    ``math.inf`` for unlimited upstream demand.
    """

    cells: tuple[CellParams, ...]
    buffer_capacities: tuple[float, ...]   # R_k, veh/hr
    mainline_ratios: tuple[float, ...]     # rho_k, rho_K = 0
    demand: tuple[float, ...]              # d_k, veh/hr, may be +inf

    @property
    def K(self) -> int:
        return len(self.cells)

    @cached_property
    def alpha(self) -> np.ndarray:
        return np.array([c.free_flow_speed for c in self.cells])

    @cached_property
    def beta(self) -> np.ndarray:
        return np.array([c.congestion_wave_speed for c in self.cells])

    @cached_property
    def n_max(self) -> np.ndarray:
        return np.array([c.jam_density for c in self.cells])

    @cached_property
    def capacity(self) -> np.ndarray:
        return np.array([c.nominal_capacity for c in self.cells])

    @cached_property
    def capacity_drop(self) -> np.ndarray:
        return np.array([c.capacity_drop for c in self.cells])

    @cached_property
    def R(self) -> np.ndarray:
        return np.array(self.buffer_capacities, dtype=float)

    @cached_property
    def rho(self) -> np.ndarray:
        return np.array(self.mainline_ratios, dtype=float)

    def violations(self) -> list[str]:
        out = []
        K = self.K
        for lengths, name in (
            (self.buffer_capacities, "buffer_capacities"),
            (self.mainline_ratios, "mainline_ratios"),
            (self.demand, "demand"),
        ):
            if len(lengths) != K:
                out.append(f"{name} must have length {K}")
        for k, cell in enumerate(self.cells, start=1):
            out.extend(cell.violations(k))
        if len(self.mainline_ratios) == K and K > 0:
            if self.mainline_ratios[-1] != 0.0:
                out.append("terminal ratio must be zero (rho_K = 0)")
            for k, r in enumerate(self.mainline_ratios[:-1], start=1):
                if not (0 < r <= 1):
                    out.append(f"mainline_ratios[{k}] must lie in (0, 1]")
        if len(self.buffer_capacities) == K:
            for k, r in enumerate(self.buffer_capacities, start=1):
                if not r > 0:
                    out.append(f"buffer_capacities[{k}] must be positive")
        if len(self.demand) == K:
            for k, d in enumerate(self.demand, start=1):
                if not d >= 0:
                    out.append(f"demand[{k}] must be nonnegative")
        return out


@dataclass(frozen=True)
class MarkovCapacityModel:
    """Markov-modulated capacities: per-mode capacity vectors and jump rates.

    ``capacity_table[i][k]`` is cell k+1's capacity in mode i and must equal
    either the nominal capacity or nominal minus the cell's capacity drop.
    ``rate_matrix[i][j]`` is the jump rate i -> j (1/hr), with zero diagonal.
    """

    capacity_table: tuple[tuple[float, ...], ...]
    rate_matrix: tuple[tuple[float, ...], ...]

    @property
    def mode_count(self) -> int:
        return len(self.capacity_table)

    @cached_property
    def F(self) -> np.ndarray:
        return np.array(self.capacity_table, dtype=float)

    @cached_property
    def nu(self) -> np.ndarray:
        return np.array(self.rate_matrix, dtype=float)

    @cached_property
    def min_capacity(self) -> np.ndarray:
        """Worst-case capacity of each cell over all modes."""
        return self.F.min(axis=0)

    @cached_property
    def steady_state_probs(self) -> np.ndarray:
        return steady_state(self)

    def violations(self, spec: HighwaySpec | None = None) -> list[str]:
        out = []
        m = self.mode_count
        if m == 0:
            return ["at least one mode required"]
        widths = {len(row) for row in self.capacity_table}
        if len(widths) != 1:
            out.append("capacity_table rows must have equal length")
        if len(self.rate_matrix) != m or any(len(r) != m for r in self.rate_matrix):
            out.append(f"rate_matrix must be {m}x{m}")
            return out
        for i in range(m):
            if self.rate_matrix[i][i] != 0.0:
                out.append(f"rate_matrix diagonal must be zero (mode {i})")
            for j in range(m):
                if self.rate_matrix[i][j] < 0:
                    out.append(f"rate_matrix[{i}][{j}] must be nonnegative")
        if spec is not None and not out and len(widths) == 1:
            if widths.pop() != spec.K:
                out.append(f"capacity_table rows must have length {spec.K}")
            else:
                for i, row in enumerate(self.capacity_table):
                    for k, f in enumerate(row):
                        lo = spec.cells[k].nominal_capacity - spec.cells[k].capacity_drop
                        hi = spec.cells[k].nominal_capacity
                        if not (math.isclose(f, lo) or math.isclose(f, hi)):
                            out.append(
                                f"capacity_table[{i}][{k}] must be the nominal "
                                "capacity or nominal minus the capacity drop"
                            )
        if m > 1 and not _irreducible(np.array(self.rate_matrix, dtype=float)):
            out.append("rate_matrix must be irreducible")
        return out


@dataclass(frozen=True)
class ControlConfig:
    """Control decision u = (v, w): admitted inflows and metering states.

    ``metering[k] = 1`` means metering off (ramp has merge priority),
    ``metering[k] = 0`` means metering on (mainline has priority).
    """

    inflows: tuple[float, ...]
    metering: tuple[int, ...]

    @cached_property
    def v(self) -> np.ndarray:
        return np.array(self.inflows, dtype=float)

    @cached_property
    def w(self) -> np.ndarray:
        return np.array(self.metering, dtype=int)

    def violations(self, spec: HighwaySpec | None = None) -> list[str]:
        out = []
        if len(self.inflows) != len(self.metering):
            out.append("inflows and metering must have equal length")
        for k, w in enumerate(self.metering, start=1):
            if w not in (0, 1):
                out.append(f"metering[{k}] must be 0 or 1")
        for k, v in enumerate(self.inflows, start=1):
            if not v >= 0:
                out.append(f"inflows[{k}] must be nonnegative")
            if math.isinf(v):
                out.append(f"inflows[{k}] must be finite")
        if spec is not None and len(self.inflows) == spec.K:
            for k, (v, d) in enumerate(zip(self.inflows, spec.demand), start=1):
                if v > d + 1e-9:
                    out.append(f"inflows[{k}] exceeds demand")
        return out


@dataclass(frozen=True)
class HybridState:
    """Instantaneous state (mode, queue vector, density vector)."""

    mode: int
    queues: tuple[float, ...]
    densities: tuple[float, ...]

    @cached_property
    def q(self) -> np.ndarray:
        return np.array(self.queues, dtype=float)

    @cached_property
    def n(self) -> np.ndarray:
        return np.array(self.densities, dtype=float)

    def violations(self, spec: HighwaySpec | None = None) -> list[str]:
        out = []
        for k, q in enumerate(self.queues, start=1):
            if not q >= 0:
                out.append(f"queues[{k}] must be nonnegative")
        if spec is not None:
            for k, (n, cell) in enumerate(zip(self.densities, spec.cells), start=1):
                if not (0 <= n <= cell.jam_density):
                    out.append(f"densities[{k}] outside [0, jam_density]")
        return out


@dataclass(frozen=True)
class FlowSnapshot:
    """All flow quantities evaluated at one state and mode (veh/hr)."""

    sending: np.ndarray       # S_k
    receiving: np.ndarray     # T_k
    buffer_demand: np.ndarray  # D_k
    ramp_flow: np.ndarray     # r_k
    cell_flow: np.ndarray     # f_k


def cumulative_ratio(spec: HighwaySpec, k1: int, k2: int) -> float:
    """Product of mainline ratios rho_{k1} ... rho_{k2-1} (1-based, empty = 1)."""
    if not (1 <= k1 <= k2 <= spec.K):
        raise ModelError(f"cell indices must satisfy 1 <= k1 <= k2 <= K, got ({k1}, {k2})")
    out = 1.0
    for k in range(k1, k2):
        out *= spec.mainline_ratios[k - 1]
    return out


def sending_flow(cell: CellParams, mode_capacity: float, density: float) -> float:
    """min{alpha * n, F(i)}: what the cell offers downstream."""
    if not (0 <= density <= cell.jam_density):
        raise ModelError(f"density {density} outside [0, {cell.jam_density}]")
    return min(cell.free_flow_speed * density, mode_capacity)


def receiving_flow(cell: CellParams, density: float) -> float:
    """beta * (n_max - n): what the cell can still accept."""
    if not (0 <= density <= cell.jam_density):
        raise ModelError(f"density {density} outside [0, {cell.jam_density}]")
    return cell.congestion_wave_speed * (cell.jam_density - density)


def buffer_demand(spec: HighwaySpec, config: ControlConfig, k: int, queue: float) -> float:
    """Discharge the k-th buffer (1-based) asks for: min{v, R} empty, R backlogged."""
    if not (1 <= k <= spec.K):
        raise ModelError(f"buffer index {k} out of range")
    if queue < 0:
        raise ModelError("queue must be nonnegative")
    if queue == 0:
        return min(config.inflows[k - 1], spec.buffer_capacities[k - 1])
    return spec.buffer_capacities[k - 1]


def merge_flows(
    spec: HighwaySpec,
    capacities: np.ndarray,
    config: ControlConfig,
    state: HybridState,
) -> FlowSnapshot:
    """Evaluate all ramp and cell flows at one state under the given control.

    ``capacities`` is the active per-cell capacity vector F(i).  Backlogged
    queues may carry ``inf``; only the zero / nonzero distinction matters.
    """
    K = spec.K
    n = state.n
    q = state.q
    w = config.metering
    S = np.minimum(spec.alpha * n, capacities)
    T = spec.beta * (spec.n_max - n)
    D = np.array([buffer_demand(spec, config, k, q[k - 1]) for k in range(1, K + 1)])

    r = np.zeros(K)
    f = np.zeros(K)
    # Buffer 1 merges with nothing upstream.
    r[0] = min(D[0], T[0])
    for k in range(1, K):  # 0-based cell k receives ramp k+1 and cell k-1
        rho_up = spec.mainline_ratios[k - 1]
        if w[k] == 0:
            f[k - 1] = min(S[k - 1], T[k] / rho_up)
            r[k] = min(D[k], max(T[k] - rho_up * f[k - 1], 0.0))
        else:
            r[k] = min(D[k], T[k])
            f[k - 1] = min(S[k - 1], max(T[k] - r[k], 0.0) / rho_up)
    f[K - 1] = S[K - 1]
    return FlowSnapshot(sending=S, receiving=T, buffer_demand=D, ramp_flow=r, cell_flow=f)


def vector_field(
    spec: HighwaySpec,
    capacities: np.ndarray,
    config: ControlConfig,
    state: HybridState,
) -> tuple[np.ndarray, np.ndarray]:
    """Mass conservation: queue rates G = v - r and density rates H."""
    flows = merge_flows(spec, capacities, config, state)
    return flow_rates(spec, config.v, flows)


def flow_rates(
    spec: HighwaySpec, v: np.ndarray, flows: FlowSnapshot
) -> tuple[np.ndarray, np.ndarray]:
    """G and H from an already-evaluated flow snapshot."""
    K = spec.K
    r, f = flows.ramp_flow, flows.cell_flow
    G = v - r
    H = np.empty(K)
    H[0] = r[0] - f[0]
    for k in range(1, K):
        H[k] = spec.mainline_ratios[k - 1] * f[k - 1] + r[k] - f[k]
    return G, H


def _irreducible(nu: np.ndarray) -> bool:
    """Strong connectivity of the directed graph on positive rates."""
    m = nu.shape[0]
    adj = nu > 0

    def reach(start: int, graph: np.ndarray) -> np.ndarray:
        seen = np.zeros(m, dtype=bool)
        seen[start] = True
        stack = [start]
        while stack:
            i = stack.pop()
            for j in np.nonzero(graph[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
        return seen

    return bool(reach(0, adj).all() and reach(0, adj.T).all())


def steady_state(model: MarkovCapacityModel) -> np.ndarray:
    """Stationary distribution p solving p Q = 0, sum(p) = 1.

    Q is the generator with off-diagonal rates nu_ij and diagonal
    -sum_j nu_ij.  Raises ModelError for a reducible chain.
    """
    nu = model.nu
    m = nu.shape[0]
    if m == 1:
        return np.array([1.0])
    if not _irreducible(nu):
        raise ModelError("rate matrix is reducible; no unique steady state")
    Q = nu - np.diag(nu.sum(axis=1))
    # Replace one balance equation by the normalization sum(p) = 1.
    A = np.vstack([Q.T[:-1], np.ones(m)])
    b = np.zeros(m)
    b[-1] = 1.0
    p, *_ = np.linalg.lstsq(A, b, rcond=None)
    residual = float(np.abs(p @ Q).max())
    if residual > 1e-9:
        raise ModelError(f"steady-state solve residual {residual:.2e} > 1e-9")
    return p


def validate(
    spec: HighwaySpec,
    model: MarkovCapacityModel | None = None,
    config: ControlConfig | None = None,
) -> list[str]:
    """Collect every violated invariant; an empty list means well-formed."""
    report = spec.violations()
    if model is not None:
        report.extend(model.violations(spec))
    if config is not None:
        report.extend(config.violations(spec))
    return report
