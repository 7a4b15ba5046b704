import math

import numpy as np
import pytest

from stochctm.certify import (
    ConstructionError,
    build_A,
    certify,
    check_A,
    drift_matrices,
    drift_row,
    is_stationary_hotspot,
    mean_bottleneck_capacity,
    necessary_check,
    refine_A_alternating,
)
from stochctm.invariant import AssumptionError, compute_bounds, vertex_set
from stochctm.model import CellParams, HighwaySpec, MarkovCapacityModel, ModelError

from conftest import config, make_s2


def spec_k3(ratios=(1.0, 1.0, 0.0)):
    cell = dict(free_flow_speed=100.0, congestion_wave_speed=20.0, jam_density=240.0)
    return HighwaySpec(
        cells=(
            CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            CellParams(nominal_capacity=4000.0, capacity_drop=1000.0, **cell),
        ),
        buffer_capacities=(4000.0, 1500.0, 1500.0),
        mainline_ratios=tuple(ratios),
        demand=(math.inf,) * 3,
    )


class TestDriftMatrices:
    def test_two_cell_shapes(self, s2_spec):
        C, D, e = drift_matrices(s2_spec)
        assert np.array_equal(C, [[1.0, 1.0], [0.0, 1.0]])
        assert np.array_equal(D, np.eye(2))
        assert np.array_equal(e, [1.0, 1.0])

    def test_three_cell_superdiagonal_and_corner(self):
        spec = spec_k3((0.9, 0.8, 0.0))
        C, D, _ = drift_matrices(spec)
        assert np.array_equal(
            C, [[0.9, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]
        )
        assert np.array_equal(D, np.diag([0.9, 0.8, 1.0]))


class TestBuildA:
    def test_uniform(self, s2_spec):
        assert np.array_equal(build_A(s2_spec, "uniform"), np.ones((2, 2)))

    def test_position_weighted(self, s2_spec):
        assert np.array_equal(
            build_A(s2_spec, "position_weighted"), [[4.0, 2.0], [2.0, 1.0]]
        )

    def test_hotspot_unit_ratios_is_all_ones(self):
        spec = spec_k3((1.0, 1.0, 0.0))
        assert np.array_equal(build_A(spec, "hotspot"), np.ones((3, 3)))

    def test_hotspot_two_cell_reduces_to_uniform(self, s2_spec):
        assert np.array_equal(build_A(s2_spec, "hotspot"), np.ones((2, 2)))

    def test_hotspot_rejected_for_interior_offramps(self):
        spec = spec_k3((1.0, 0.5, 0.0))
        with pytest.raises(ConstructionError):
            build_A(spec, "hotspot")

    def test_gamma_below_one_rejected(self, s2_spec):
        with pytest.raises(ConstructionError):
            build_A(s2_spec, "uniform", gamma=0.5)

    def test_check_catches_asymmetry(self, s2_spec):
        assert check_A(s2_spec, np.array([[1.0, 2.0], [1.0, 1.0]]))


class TestDriftRow:
    def test_matches_hand_matrix_arithmetic(self, s2):
        spec, model = s2
        u = config((2600, 400), (1, 0))
        bounds = compute_bounds(spec, model, u)
        verts = vertex_set(bounds)
        vertex = next(v for v in verts if v.densities == (40.0, 140.0))
        A = build_A(spec, "position_weighted")
        b = np.zeros((2, 2))
        row = drift_row(spec, model, A, b, u, 0, vertex)
        # hand arithmetic: G=(0,400), H=(600,-2000),
        # C@G+D@H = (1000,-1600), A@. = (800, 400)
        assert np.allclose(row, [800.0, 400.0])

    def test_no_rows_for_empty_vertex_set(self, s2):
        spec, model = s2
        u = config((0, 0), (1, 1))
        bounds = compute_bounds(spec, model, u)
        assert vertex_set(bounds) == []

    def test_common_offset_shift_cancels(self, s2):
        spec, model = s2
        u = config((2600, 400), (1, 0))
        vertex = vertex_set(compute_bounds(spec, model, u))[0]
        A = build_A(spec, "uniform")
        rng = np.random.default_rng(3)
        b = rng.normal(size=(2, 2))
        shift = rng.normal(size=2)
        for mode in range(2):
            r0 = drift_row(spec, model, A, b, u, mode, vertex)
            r1 = drift_row(spec, model, A, b + shift, u, mode, vertex)
            assert np.allclose(r0, r1)


class TestCertify:
    def test_vacuous_case(self, s2):
        spec, model = s2
        res = certify(spec, model, config((2600, 400), (1, 1)), build_A(spec, "uniform"))
        assert res.verdict == "stable_certified"
        assert res.certificate.vacuous and res.rows == 0

    def test_metered_config_certifies_with_uniform(self, s2):
        spec, model = s2
        res = certify(spec, model, config((2000, 400), (1, 0)), build_A(spec, "uniform"))
        assert res.verdict == "stable_certified"
        assert np.all(res.certificate.slacks <= 1e-7)

    def test_overloaded_config_fails_both_weights(self, s2):
        spec, model = s2
        u = config((2900, 400), (1, 0))
        assert necessary_check(spec, model, u).verdict == "violates"
        for kind in ("uniform", "position_weighted"):
            res = certify(spec, model, u, build_A(spec, kind))
            assert res.verdict == "no_certificate"

    def test_assumption_violation_propagates(self, s2):
        spec, model = s2
        with pytest.raises(AssumptionError):
            certify(spec, model, config((1000, 2100), (1, 1)), build_A(spec, "uniform"))

    def test_invalid_scenario_rejected(self, s2):
        spec, model = s2
        with pytest.raises(ModelError):
            certify(spec, model, config((-5, 0), (1, 1)), build_A(spec, "uniform"))

    def test_normalization_invariance(self, s2):
        spec, model = s2
        u = config((2000, 400), (1, 0))
        res = certify(spec, model, u, build_A(spec, "uniform"))
        assert res.certified
        A, b = res.certificate.A, res.certificate.offsets
        lam = 3.0
        verts = vertex_set(compute_bounds(spec, model, u))
        for vertex in verts:
            for mode in range(model.mode_count):
                base = drift_row(spec, model, A, b, u, mode, vertex)
                scaled = drift_row(spec, model, lam * A, lam * b, u, mode, vertex)
                assert np.allclose(scaled, lam * base)
                assert np.all(scaled <= -lam + 1e-6)

    def test_certificate_json_roundtrip(self, s2):
        import json

        spec, model = s2
        res = certify(spec, model, config((2000, 400), (1, 0)), build_A(spec, "uniform"))
        payload = json.loads(res.certificate.to_json(res.verdict))
        assert payload["verdict"] == "stable_certified"
        assert len(payload["b"]) == model.mode_count


class TestNecessaryCheck:
    def test_hotspot_witness(self, s2):
        spec, model = s2
        res = necessary_check(spec, model, config((2900, 400), (1, 0)))
        assert res.verdict == "violates"
        assert any("hotspot mean-capacity: 3300 > 3000" in w for w in res.witnesses)

    def test_zero_inflow_passes(self, s2):
        spec, model = s2
        assert necessary_check(spec, model, config((0, 0), (1, 1))).passes

    def test_buffer_witness(self, s2):
        spec, model = s2
        res = necessary_check(spec, model, config((4500, 0), (0, 0)))
        assert any("buffer capacity" in w for w in res.witnesses)

    def test_hotspot_detection(self, s2_spec):
        assert is_stationary_hotspot(s2_spec)
        assert mean_bottleneck_capacity(s2_spec, make_s2()[1]) == pytest.approx(3000.0)


class TestRefineAlternating:
    def test_already_certified_returns_unchanged(self, s2):
        spec, model = s2
        A0 = build_A(spec, "uniform")
        u = config((2000, 400), (1, 0))
        A, res, history = refine_A_alternating(spec, model, u, A0)
        assert res.certified
        assert history == []
        assert np.array_equal(A, A0)

    def test_descends_from_rejected_start(self, s2):
        spec, model = s2
        u = config((2000, 400), (1, 0))
        start = build_A(spec, "position_weighted")
        assert certify(spec, model, u, start).verdict == "no_certificate"
        A, res, history = refine_A_alternating(spec, model, u, start, max_iters=25)
        assert res.certified
        assert not check_A(spec, A)

    def test_violating_config_never_certifies_but_stays_monotone(self, s2):
        spec, model = s2
        u = config((2900, 400), (1, 0))
        _, res, history = refine_A_alternating(
            spec, model, u, build_A(spec, "position_weighted"), max_iters=6
        )
        assert res.verdict == "no_certificate"
        assert all(history[i + 1] <= history[i] + 1e-9 for i in range(len(history) - 1))
