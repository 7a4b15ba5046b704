"""Stochastic cell-transmission ramp control toolkit."""

from .model import (
    CellParams,
    ControlConfig,
    FlowSnapshot,
    HighwaySpec,
    HybridState,
    MarkovCapacityModel,
    ModelError,
    buffer_demand,
    cumulative_ratio,
    merge_flows,
    receiving_flow,
    sending_flow,
    steady_state,
    validate,
    vector_field,
)

__version__ = "0.1.0"
