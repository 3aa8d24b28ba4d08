"""Discrete-event simulator: scenarios, lifecycle, events and metrics."""

from fedsim.simulator.engine import RunResult, Simulator, run_scenario
from fedsim.simulator.events import EVENT_KINDS, EventQueue, SimEvent
from fedsim.simulator.lifecycle import TRANSITIONS, Lifecycle, LifecycleState, is_legal
from fedsim.simulator.metrics import MetricsRecord, MetricsStream, summarize
from fedsim.simulator.profiles import DeviceProfile, compute_time, sample_dropout, training_ops, transfer_time
from fedsim.simulator.scenario import Scenario, load_scenario, parse_scenario, validate_scenario

__all__ = [
    "RunResult",
    "Simulator",
    "run_scenario",
    "EVENT_KINDS",
    "EventQueue",
    "SimEvent",
    "TRANSITIONS",
    "Lifecycle",
    "LifecycleState",
    "is_legal",
    "MetricsRecord",
    "MetricsStream",
    "summarize",
    "DeviceProfile",
    "compute_time",
    "sample_dropout",
    "training_ops",
    "transfer_time",
    "Scenario",
    "load_scenario",
    "parse_scenario",
    "validate_scenario",
]
