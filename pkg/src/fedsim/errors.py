"""Exception hierarchy shared by every fedsim module."""

from __future__ import annotations


class FedSimError(Exception):
    """Base class for all fedsim errors."""


class ConfigurationError(FedSimError, ValueError):
    pass


class ShapeError(FedSimError, ValueError):
    pass


class NumericError(FedSimError, ArithmeticError):
    pass


class EvaluationError(FedSimError, ValueError):
    pass


class RegistryConflictError(FedSimError):
    pass


class NotFoundError(FedSimError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DecodeError(FedSimError, ValueError):
    pass


class ParameterError(FedSimError, ValueError):
    pass


class ChainIntegrityError(FedSimError):
    """Raised when a hash chain does not verify.

    ``index`` is the position of the first record that fails.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class MonitoringError(FedSimError, ValueError):
    pass


class DeploymentError(FedSimError):
    pass


class BalanceError(FedSimError, ValueError):
    pass


class CapacityError(FedSimError, ValueError):
    pass


class AggregationError(FedSimError, ValueError):
    pass


class CausalityError(FedSimError, ValueError):
    pass


class TopologyError(FedSimError, ValueError):
    pass


class UnrecoverableMasksError(FedSimError):
    pass


class ScenarioValidationError(FedSimError, ValueError):
    """Scenario failed validation; ``problems`` holds ``(field_path, message)`` pairs."""

    def __init__(self, problems: list[tuple[str, str]]):
        self.problems = list(problems)
        lines = [f"{path}: {msg}" for path, msg in self.problems]
        super().__init__("invalid scenario:\n  " + "\n  ".join(lines))


class InvariantViolation(FedSimError):
    pass


class ScenarioParseError(FedSimError, ValueError):
    """Scenario file is not well-formed; ``line``/``column`` locate the problem when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column
