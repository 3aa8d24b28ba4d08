"""Federated-learning architectural patterns with a deterministic simulator."""

from fedsim.core import (
    Dataset,
    EvalReport,
    ParamVector,
    SyntheticTask,
    Task,
    TrainingConfig,
    evaluate,
    generate_partitions,
    gradient_check,
    local_train,
)
from fedsim.simulator import RunResult, Scenario, load_scenario, run_scenario, validate_scenario

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EvalReport",
    "ParamVector",
    "SyntheticTask",
    "Task",
    "TrainingConfig",
    "evaluate",
    "generate_partitions",
    "gradient_check",
    "local_train",
    "RunResult",
    "Scenario",
    "load_scenario",
    "run_scenario",
    "validate_scenario",
]
