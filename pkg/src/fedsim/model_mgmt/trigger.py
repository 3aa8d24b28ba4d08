"""Model replacement trigger: fire after sustained, quorum-wide degradation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

from fedsim.core import EvalReport
from fedsim.errors import ConfigurationError, MonitoringError

__all__ = ["TriggerState", "check_replacement_trigger", "is_breach"]


@dataclass(frozen=True)
class TriggerState:
    threshold: float = 0.8
    patience: int = 3
    quorum_fraction: float = 0.5
    consecutive_breaches: int = 0
    fired: bool = False
    # "accuracy" breaches below threshold, "loss" breaches above it
    metric: str = "accuracy"

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience must be >= 1")
        if not 0 < self.quorum_fraction <= 1:
            raise ConfigurationError("quorum_fraction must be in (0, 1]")
        if self.metric not in ("accuracy", "loss"):
            raise ConfigurationError(f"unknown trigger metric {self.metric!r}")
        if self.fired and self.consecutive_breaches < self.patience:
            raise ConfigurationError("a fired trigger must have at least `patience` consecutive breaches")

    def reset(self) -> "TriggerState":
        return replace(self, consecutive_breaches=0, fired=False)


def _degraded(report: EvalReport, state: TriggerState) -> bool:
    if state.metric == "loss":
        return report.loss > state.threshold
    if report.accuracy is None:
        raise MonitoringError("accuracy trigger needs classification reports")
    return report.accuracy < state.threshold


def is_breach(state: TriggerState, reports: Mapping[str, EvalReport], n_monitored: int) -> bool:
    if n_monitored < 1:
        raise MonitoringError("n_monitored must be >= 1")
    if not reports:
        raise MonitoringError("no monitoring reports")
    if len(reports) > n_monitored:
        raise MonitoringError(f"{len(reports)} reports from only {n_monitored} monitored clients")
    degraded = sum(_degraded(r, state) for r in reports.values())
    return degraded / n_monitored >= state.quorum_fraction


def check_replacement_trigger(
    state: TriggerState, reports: Mapping[str, EvalReport], n_monitored: int
) -> TriggerState:
    """Advance the trigger by one monitoring round.

    A round breaches when at least ``quorum_fraction`` of the monitored
    clients are degraded. Breaches accumulate while consecutive and reset to
    zero on a clean round. The trigger is fired while the run of breaches
    is at least ``patience`` long, so a clean round also clears it.
    """
    if is_breach(state, reports, n_monitored):
        count = state.consecutive_breaches + 1
    else:
        count = 0
    return replace(state, consecutive_breaches=count, fired=count >= state.patience)
