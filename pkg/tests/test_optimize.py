import math

import numpy as np
import pytest

from stochctm.certify import build_A, certify, drift_row, necessary_check
from stochctm.invariant import compute_bounds, vertex_set
from stochctm.lp import solve
from stochctm.model import CellParams, HighwaySpec, MarkovCapacityModel, merge_flows
from stochctm.optimize import (
    NotApplicableError,
    build_milp,
    drift_coefficients,
    hotspot_algorithm,
    infinite_demand_optimum,
    margin_criterion,
    maximize_throughput,
    solve_fixed_metering,
)

from conftest import config, make_s2

INF = math.inf


def make_h3(demand=(2000.0, 500.0, 300.0)):
    cell = dict(free_flow_speed=100.0, congestion_wave_speed=20.0, jam_density=240.0)
    spec = HighwaySpec(
        cells=(
            CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            CellParams(nominal_capacity=4000.0, capacity_drop=1000.0, **cell),
        ),
        buffer_capacities=(4000.0, 1500.0, 1500.0),
        mainline_ratios=(1.0, 1.0, 0.0),
        demand=tuple(demand),
    )
    model = MarkovCapacityModel(
        capacity_table=((4000.0, 4000.0, 4000.0), (4000.0, 4000.0, 3000.0)),
        rate_matrix=((0.0, 6.0), (6.0, 0.0)),
    )
    return spec, model


class TestDriftCoefficients:
    def test_symbolic_matches_direct_evaluator(self, s2):
        # the MILP row generator evaluated at the concrete vertex flows must
        # reproduce the theorem-side evaluator exactly
        spec, model = s2
        u = config((2600, 400), (1, 0))
        A = build_A(spec, "position_weighted")
        Cv, Cr, Cf = drift_coefficients(spec, A)
        rng = np.random.default_rng(8)
        verts = vertex_set(compute_bounds(spec, model, u))
        for _ in range(20):
            b = rng.normal(scale=100.0, size=(2, 2))
            vertex = verts[rng.integers(0, len(verts))]
            mode = int(rng.integers(0, 2))
            fl = merge_flows(spec, model.F[mode], u, vertex.state(mode))
            nu = model.nu
            jump = sum(
                nu[mode, j] * (b[j] - b[mode]) for j in range(2) if j != mode
            )
            sym = Cv @ u.v + Cr @ fl.ramp_flow + Cf @ fl.cell_flow + jump
            direct = drift_row(spec, model, A, b, u, mode, vertex)
            assert np.allclose(sym, direct, atol=1e-9)


class TestBuildMilp:
    def test_block_count_two_cells_two_modes(self, s2):
        spec, model = s2
        inst = build_milp(spec, model, build_A(spec, "uniform"), (1, 0), (0, 0))
        assert len(inst.blocks) == 24  # 3 queue patterns x 4 congestion x 2 modes

    def test_all_blocks_dropped_when_nothing_is_metered(self):
        spec, model = make_s2(demand=(2500.0, 400.0))
        inst = build_milp(spec, model, build_A(spec, "uniform"), (1, 1), (0, 0))
        assert inst.dropped_blocks == 24
        res = solve(inst.lp)
        assert res.objective == pytest.approx(2900.0)  # demand box binds

    def test_zero_demand_optimum_is_zero(self):
        spec, model = make_s2(demand=(0.0, 0.0))
        inst = build_milp(spec, model, build_A(spec, "uniform"), (1, 0), (0, 0))
        assert solve(inst.lp).objective == pytest.approx(0.0, abs=1e-9)

    def test_drop_equals_big_m(self):
        spec, model = make_s2(demand=(2500.0, 400.0))
        A = build_A(spec, "uniform")
        for w in [(1, 0), (0, 1), (1, 1)]:
            a = solve(build_milp(spec, model, A, w, (0, 0), m1_mode="drop").lp)
            b = solve(build_milp(spec, model, A, w, (0, 0), m1_mode="bigM").lp)
            assert a.objective == pytest.approx(b.objective, abs=1e-6)

    def test_relax_binaries_zero_dominates(self):
        spec, model = make_s2(demand=(2500.0, 2500.0))
        A = build_A(spec, "uniform")
        relaxed = solve(build_milp(spec, model, A, (1, 1), (0, 0)).lp).objective
        gated = solve(build_milp(spec, model, A, (1, 1), (1, 1)).lp).objective
        assert relaxed >= gated - 1e-9

    def test_outer_approximation_matches_explicit_lp(self):
        for d in [(2500.0, 400.0), (1500.0, 900.0), (3500.0, 1200.0)]:
            spec, model = make_s2(demand=d)
            A = build_A(spec, "uniform")
            for w in [(1, 0), (0, 1), (0, 0)]:
                explicit = solve(build_milp(spec, model, A, w, (0, 0)).lp)
                kelley = solve_fixed_metering(spec, model, A, w, screens=False)
                assert explicit.status == "optimal"
                assert kelley is not None
                assert kelley[0] == pytest.approx(explicit.objective, abs=1e-5)


class TestMaximizeThroughput:
    def test_s2_infinite_demand_reaches_mean_capacity(self, s2):
        spec, model = s2
        res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
        assert res.throughput == pytest.approx(3000.0, abs=1e-6)
        assert res.metering == (1, 1)
        opt = infinite_demand_optimum(spec, model)
        assert opt.unmetered_set.contains(res.inflows)
        assert res.certificate.certified

    def test_margin_agreement_feasible_demand(self):
        # strict points on both sides of the margin boundary plus the tie
        cases = [
            ((2500.0, 240.0), {(1, 0)}),
            ((2500.0, 0.0), {(1, 0)}),
            ((1700.0, 240.0), {(1, 1)}),
            ((1700.0, 0.0), {(1, 1)}),
            ((2100.0, 100.0), {(1, 0), (1, 1)}),  # equality: either accepted
        ]
        for d, allowed in cases:
            spec, model = make_s2(demand=d)
            res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
            assert res.throughput == pytest.approx(sum(d), abs=1e-6)
            assert np.allclose(res.inflows, d, atol=1e-5)
            assert res.metering in allowed, d

    def test_zero_demand(self):
        spec, model = make_s2(demand=(0.0, 0.0))
        res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
        assert res.throughput == pytest.approx(0.0, abs=1e-9)
        assert res.certificate.certified

    def test_winner_recertifies_and_passes_necessary(self):
        spec, model = make_s2(demand=(2800.0, 1500.0))
        A = build_A(spec, "hotspot")
        res = maximize_throughput(spec, model, A)
        u = config(res.inflows, res.metering)
        assert necessary_check(spec, model, u).passes
        assert certify(spec, model, u, A).certified

    def test_monotone_in_demand(self):
        A = None
        prev = -1.0
        for d1 in (1000.0, 1800.0, 2600.0, 3400.0):
            spec, model = make_s2(demand=(d1, 400.0))
            A = build_A(spec, "hotspot")
            res = maximize_throughput(spec, model, A)
            assert res.throughput >= prev - 1e-7
            prev = res.throughput

    def test_bounded_by_mean_bottleneck(self):
        spec, model = make_s2(demand=(4000.0, 2000.0))
        res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
        assert res.throughput <= 3000.0 + 1e-6

    def test_log_and_counts(self, s2):
        spec, model = s2
        res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
        assert res.subproblem_count == 4
        assert res.pruned_count == 4 * 3
        assert {e.metering for e in res.log} == {(0, 0), (0, 1), (1, 0), (1, 1)}

    def test_json_payload(self, s2):
        import json

        spec, model = s2
        res = maximize_throughput(spec, model, build_A(spec, "hotspot"))
        payload = json.loads(res.to_json())
        assert payload["J"] == pytest.approx(3000.0, abs=1e-6)
        assert payload["w"] == [1, 1]


class TestMarginCriterion:
    def test_meter_side(self):
        spec, model = make_s2(demand=(2500.0, 400.0))
        out = margin_criterion(spec, model, (2500.0, 400.0))
        assert [c.metering for c in out] == [(1, 0)]

    def test_no_meter_side(self):
        spec, model = make_s2(demand=(2000.0, 400.0))
        out = margin_criterion(spec, model, (2000.0, 400.0))
        assert [c.metering for c in out] == [(1, 1)]

    def test_equality_returns_both(self):
        spec, model = make_s2(demand=(2100.0, 100.0))
        out = margin_criterion(spec, model, (2100.0, 100.0))
        assert {c.metering for c in out} == {(1, 1), (1, 0)}

    def test_not_applicable(self):
        spec, model = make_h3()
        with pytest.raises(NotApplicableError):
            margin_criterion(spec, model, (100.0, 100.0, 100.0))


class TestInfiniteDemandOptimum:
    def test_s2_sets(self, s2):
        spec, model = s2
        opt = infinite_demand_optimum(spec, model)
        assert opt.mean_capacity == pytest.approx(3000.0)
        assert opt.metered_set.empty          # needs v1 < 2000 yet v2 <= 1000
        assert not opt.unmetered_set.empty
        assert opt.unmetered_set.contains((2600.0, 400.0))
        assert not opt.unmetered_set.contains((1000.0, 2000.0))  # strict cap
        rep = opt.unmetered_set.representative()
        assert opt.unmetered_set.contains(rep)

    def test_no_perturbation_degenerates_to_nominal(self):
        cell = dict(free_flow_speed=100.0, congestion_wave_speed=20.0, jam_density=240.0)
        spec = HighwaySpec(
            cells=(
                CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
                CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            ),
            buffer_capacities=(4000.0, 2000.0),
            mainline_ratios=(1.0, 0.0),
            demand=(INF, INF),
        )
        model = MarkovCapacityModel(
            capacity_table=((4000.0, 4000.0),), rate_matrix=((0.0,),)
        )
        assert infinite_demand_optimum(spec, model).mean_capacity == pytest.approx(4000.0)

    def test_degenerate_chain_never_perturbs(self, s2_spec):
        model = MarkovCapacityModel(
            capacity_table=((4000.0, 4000.0),), rate_matrix=((0.0,),)
        )
        assert infinite_demand_optimum(s2_spec, model).mean_capacity == pytest.approx(4000.0)


class TestHotspotAlgorithm:
    def test_reference_instance_trace(self):
        spec, model = make_h3()
        assert hotspot_algorithm(spec, model, spec.demand) == (1, 0, 0)

    def test_zero_demand_keeps_all_ramps_unmetered(self):
        spec, model = make_h3(demand=(0.0, 0.0, 0.0))
        assert hotspot_algorithm(spec, model, (0.0, 0.0, 0.0)) == (1, 1, 1)

    def test_matches_enumeration_value_on_reference_instance(self):
        spec, model = make_h3()
        A = build_A(spec, "hotspot")
        res = maximize_throughput(spec, model, A)
        w_alg = hotspot_algorithm(spec, model, spec.demand)
        out = solve_fixed_metering(spec, model, A, w_alg)
        assert out is not None
        assert out[0] == pytest.approx(res.throughput, abs=1e-5)

    def test_requires_hotspot(self, s2_spec):
        spec, model = make_s2()
        flat = HighwaySpec(
            cells=tuple(
                CellParams(
                    free_flow_speed=c.free_flow_speed,
                    nominal_capacity=c.nominal_capacity,
                    capacity_drop=0.0,
                    congestion_wave_speed=c.congestion_wave_speed,
                    jam_density=c.jam_density,
                )
                for c in spec.cells
            ),
            buffer_capacities=spec.buffer_capacities,
            mainline_ratios=spec.mainline_ratios,
            demand=(100.0, 100.0),
        )
        with pytest.raises(NotApplicableError):
            hotspot_algorithm(flat, model, (100.0, 100.0))

    def test_requires_finite_demand(self):
        spec, model = make_h3()
        with pytest.raises(NotApplicableError):
            hotspot_algorithm(spec, model, (INF, 0.0, 0.0))
