"""Invariant set of the hybrid dynamics: queue/density bounds and vertices.

For a fixed control u the continuous state is eventually trapped in a box
family M(u): every queue lies in [q_lo, q_hi] (entries 0 or +inf) and every
density in [n_lo(pattern), n_hi], where the density floor depends on which
queues are backlogged.  Density ceilings are computed assuming maximal
downstream congestion (backward recursion), floors assuming minimal upstream
flow (forward recursion).

Backlogged queue coordinates are represented by +inf, never by a large
finite surrogate: flows depend on queues only through the zero / nonzero
distinction, and the buffer-demand backlogged branch handles inf directly.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ControlConfig, HighwaySpec, HybridState, MarkovCapacityModel

__all__ = [
    "AssumptionError",
    "InvariantBounds",
    "Vertex",
    "compute_bounds",
    "vertex_set",
    "contains",
]

INF = math.inf


class AssumptionError(ValueError):
    """Configuration breaks the no-queue-at-unmetered-ramp assumption."""


@dataclass(frozen=True)
class Vertex:
    """One corner of the backlogged part of the invariant set.

    ``pattern[k]`` is True where the queue coordinate is backlogged; those
    queue entries are +inf.  Densities sit exactly at the per-pattern floor
    or the ceiling.
    """

    pattern: tuple[bool, ...]
    queues: tuple[float, ...]
    densities: tuple[float, ...]

    def state(self, mode: int) -> HybridState:
        return HybridState(mode=mode, queues=self.queues, densities=self.densities)


@dataclass(frozen=True)
class InvariantBounds:
    spec: HighwaySpec
    config: ControlConfig
    q_lower: tuple[float, ...]   # 0 or +inf
    q_upper: tuple[float, ...]   # 0 or +inf
    n_upper: tuple[float, ...]
    _floor_cache: dict = field(default_factory=dict, compare=False, repr=False)

    def n_lower(self, pattern: tuple[bool, ...]) -> np.ndarray:
        """Density floor for a given backlogged-queue pattern."""
        pattern = tuple(bool(p) for p in pattern)
        if pattern not in self._floor_cache:
            self._floor_cache[pattern] = _density_floor(self.spec, self.config, pattern)
        return self._floor_cache[pattern]


def _density_floor(spec: HighwaySpec, config: ControlConfig, pattern: tuple[bool, ...]) -> np.ndarray:
    K = spec.K
    v, R = config.v, spec.R
    alpha, Fnom = spec.alpha, spec.capacity
    out = np.empty(K)
    out[0] = (R[0] if pattern[0] else v[0]) / alpha[0]
    for k in range(1, K):
        feed = R[k] if pattern[k] else v[k]
        out[k] = min(
            spec.mainline_ratios[k - 1] * out[k - 1] + feed / alpha[k],
            Fnom[k] / alpha[k],
        )
    return out


def compute_bounds(
    spec: HighwaySpec, model: MarkovCapacityModel, config: ControlConfig
) -> InvariantBounds:
    """Evaluate the invariant-set recursions for one configuration.

    Raises AssumptionError when some ramp has priority (w_k = 1) yet its
    queue bound comes out unbounded; the stability machinery assumes
    prioritized ramps never queue.
    """
    K = spec.K
    v, w, R = config.v, config.w, spec.R
    alpha, beta, n_max, Fnom = spec.alpha, spec.beta, spec.n_max, spec.capacity
    Fmin = model.min_capacity

    q_lower = tuple(INF if v[k] > R[k] else 0.0 for k in range(K))

    n_upper = np.empty(K)
    n_upper[K - 1] = n_max[K - 1] - Fmin[K - 1] / beta[K - 1]
    for k in range(K - 2, -1, -1):
        backpressure = (
            beta[k + 1] * (n_max[k + 1] - n_upper[k + 1]) - v[k + 1] * w[k + 1]
        ) / (spec.mainline_ratios[k] * beta[k])
        n_upper[k] = min(
            Fnom[k] / alpha[k],
            n_max[k] - Fmin[k] / beta[k],
            n_max[k] - backpressure,
        )

    q_upper = []
    for k in range(K):
        supply = beta[k] * (n_max[k] - n_upper[k])
        if k > 0:
            supply -= (1 - w[k]) * spec.mainline_ratios[k - 1] * min(
                alpha[k - 1] * n_upper[k - 1], Fnom[k]
            )
        q_upper.append(0.0 if (v[k] <= R[k] and v[k] <= supply) else INF)
    q_upper = tuple(q_upper)

    for k in range(K):
        if w[k] == 1 and q_upper[k] == INF:
            raise AssumptionError(
                f"ramp {k + 1} has priority (metering off) but its queue bound "
                "is unbounded; reduce its inflow or meter it"
            )

    return InvariantBounds(
        spec=spec, config=config, q_lower=q_lower, q_upper=q_upper,
        n_upper=tuple(n_upper),
    )


def vertex_set(bounds: InvariantBounds) -> list[Vertex]:
    """Corners of the backlogged part of the invariant set.

    Enumerates backlogged-queue patterns (skipping ramps whose queue bound
    is zero, forcing ramps whose queue floor is infinite) except the
    all-empty pattern, then takes every density corner, deduplicating
    coincident corners exactly.
    """
    K = bounds.spec.K
    axis_choices = []
    for k in range(K):
        if bounds.q_lower[k] == INF:
            axis_choices.append((True,))
        elif bounds.q_upper[k] == 0.0:
            axis_choices.append((False,))
        else:
            axis_choices.append((False, True))

    vertices = []
    for pattern in itertools.product(*axis_choices):
        if not any(pattern):
            continue
        floor = bounds.n_lower(pattern)
        q = tuple(INF if p else 0.0 for p in pattern)
        corner_axes = []
        for k in range(K):
            vals = {floor[k], bounds.n_upper[k]}
            corner_axes.append(sorted(vals))
        seen = set()
        for n in itertools.product(*corner_axes):
            if n in seen:
                continue
            seen.add(n)
            vertices.append(Vertex(pattern=pattern, queues=q, densities=n))
    return vertices


def contains(bounds: InvariantBounds, state: HybridState, tol: float = 1e-9) -> bool:
    """Membership of (q, n) in the invariant set, up to tol."""
    K = bounds.spec.K
    q, n = state.q, state.n
    for k in range(K):
        if not (bounds.q_lower[k] - tol <= q[k] <= bounds.q_upper[k] + tol):
            return False
        if q[k] == INF and bounds.q_upper[k] != INF:
            return False
    pattern = tuple(bool(q[k] > 0) for k in range(K))
    floor = bounds.n_lower(pattern)
    for k in range(K):
        if not (floor[k] - tol <= n[k] <= bounds.n_upper[k] + tol):
            return False
    return True
