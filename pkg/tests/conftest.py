import math

import pytest

from stochctm.model import (
    CellParams,
    ControlConfig,
    HighwaySpec,
    MarkovCapacityModel,
)

INF = math.inf


def make_s2(demand=(INF, INF), single_mode=False) -> tuple[HighwaySpec, MarkovCapacityModel]:
    """Desk scenario S2: two cells, hotspot at cell 2, two-mode chain.

    Both cells: alpha=100, F=4000, beta=20, n_max=240; Delta=[0, 2000];
    R=[4000, 2000]; nu_01 = nu_10 = 6/hr so p = (1/2, 1/2) and the mean
    bottleneck capacity is 3000 veh/hr.
    """
    cell = dict(free_flow_speed=100.0, congestion_wave_speed=20.0, jam_density=240.0)
    spec = HighwaySpec(
        cells=(
            CellParams(nominal_capacity=4000.0, capacity_drop=0.0, **cell),
            CellParams(nominal_capacity=4000.0, capacity_drop=2000.0, **cell),
        ),
        buffer_capacities=(4000.0, 2000.0),
        mainline_ratios=(1.0, 0.0),
        demand=tuple(demand),
    )
    if single_mode:
        model = MarkovCapacityModel(
            capacity_table=((4000.0, 4000.0),),
            rate_matrix=((0.0,),),
        )
    else:
        model = MarkovCapacityModel(
            capacity_table=((4000.0, 4000.0), (4000.0, 2000.0)),
            rate_matrix=((0.0, 6.0), (6.0, 0.0)),
        )
    return spec, model


@pytest.fixture
def s2():
    return make_s2()


@pytest.fixture
def s2_spec(s2):
    return s2[0]


@pytest.fixture
def s2_model(s2):
    return s2[1]


def config(v, w) -> ControlConfig:
    return ControlConfig(inflows=tuple(float(x) for x in v), metering=tuple(int(x) for x in w))
