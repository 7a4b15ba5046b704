import math

import numpy as np
import pytest

from stochctm.invariant import (
    AssumptionError,
    compute_bounds,
    contains,
    vertex_set,
)
from stochctm.model import CellParams, HighwaySpec, HybridState, MarkovCapacityModel

from conftest import config, make_s2

INF = math.inf


class TestComputeBounds:
    def test_s2_all_ramps_off(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        assert b.n_upper == (40.0, 140.0)
        assert np.allclose(b.n_lower((False, False)), [26.0, 30.0])
        assert b.q_upper == (0.0, 0.0)

    def test_s2_metered_ramp_two(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 0]))
        assert b.q_upper == (0.0, INF)
        assert b.n_upper == (40.0, 140.0)

    def test_overloaded_buffer_forces_infinite_floor(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([4500, 0], [0, 0]))
        assert b.q_lower[0] == INF

    def test_rejects_priority_ramp_with_unbounded_queue(self):
        spec, model = make_s2()
        # v2 exceeds the worst-case supply at the congestion ceiling
        with pytest.raises(AssumptionError):
            compute_bounds(spec, model, config([1000, 2100], [1, 1]))

    def test_backlogged_floor_uses_buffer_capacity(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 0]))
        # backlogged branch: min{rho*26 + R2/alpha2, F2/alpha2} = min{46, 40}
        assert np.allclose(b.n_lower((False, True)), [26.0, 40.0])


class TestVertexSet:
    def test_s2_metered_case_has_four_vertices(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 0]))
        verts = vertex_set(b)
        assert len(verts) == 4
        assert all(v.pattern == (False, True) for v in verts)
        corners = {v.densities for v in verts}
        assert corners == {(26.0, 40.0), (26.0, 140.0), (40.0, 40.0), (40.0, 140.0)}
        assert all(v.queues == (0.0, INF) for v in verts)

    def test_all_queues_bounded_gives_empty_set(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        assert vertex_set(b) == []

    def test_degenerate_box_dedups_to_single_vertex(self):
        cell = CellParams(
            free_flow_speed=100.0,
            nominal_capacity=4000.0,
            capacity_drop=0.0,
            congestion_wave_speed=20.0,
            jam_density=240.0,
        )
        spec = HighwaySpec(
            cells=(cell,),
            buffer_capacities=(2000.0,),
            mainline_ratios=(0.0,),
            demand=(INF,),
        )
        model = MarkovCapacityModel(capacity_table=((4000.0,),), rate_matrix=((0.0,),))
        # v1 > R1 so the queue floor is infinite; floor 2000/100 = 20 while
        # the ceiling is 240 - 4000/20 = 40 -> 2 corners; collapse by raising v
        b = compute_bounds(spec, model, config([2100], [0]))
        assert b.q_lower == (INF,)
        verts = vertex_set(b)
        floors = b.n_lower((True,))
        if floors[0] == b.n_upper[0]:
            assert len(verts) == 1
        else:
            assert len(verts) == 2

    def test_cardinality_bound(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 0]))
        K = spec.K
        assert len(vertex_set(b)) <= (2**K - 1) * 2**K


class TestContains:
    def test_inside_box(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        assert contains(b, HybridState(0, (0.0, 0.0), (30.0, 100.0)))

    def test_density_above_ceiling(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        assert not contains(b, HybridState(0, (0.0, 0.0), (200.0, 100.0)))

    def test_corner_membership(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        floor = b.n_lower((False, False))
        assert contains(b, HybridState(0, (0.0, 0.0), tuple(floor)))

    def test_queue_above_zero_bound(self):
        spec, model = make_s2()
        b = compute_bounds(spec, model, config([2600, 400], [1, 1]))
        assert not contains(b, HybridState(0, (5.0, 0.0), (30.0, 100.0)))


class TestFloorMonotonicity:
    def test_backlogged_switch_never_decreases_floor(self):
        # needs v_k <= R_k at every ramp (the empty branch feeds less)
        rng = np.random.default_rng(29)
        spec, model = make_s2()
        for _ in range(50):
            v = rng.uniform(0, [4000, 2000])
            b = compute_bounds(spec, model, config(v, [1, 0]))
            base = b.n_lower((False, False))
            for pattern in [(True, False), (False, True), (True, True)]:
                floor = b.n_lower(pattern)
                assert np.all(floor >= base - 1e-12)
