"""Global-model lifecycle as a fixed state graph."""

from __future__ import annotations

from enum import Enum

from fedsim.errors import InvariantViolation

__all__ = ["LifecycleState", "TRANSITIONS", "Lifecycle", "is_legal"]


class LifecycleState(str, Enum):
    TASK_CREATED = "task_created"
    BROADCAST = "broadcast"
    LOCAL_TRAINING = "local_training"
    UPDATE_SUBMITTED = "update_submitted"
    AGGREGATED = "aggregated"
    EVALUATED = "evaluated"
    CONVERGED = "converged"
    DEPLOYED = "deployed"
    MONITORED = "monitored"
    REPLACED = "replaced"


S = LifecycleState

TRANSITIONS: dict[LifecycleState, frozenset[LifecycleState]] = {
    S.TASK_CREATED: frozenset({S.BROADCAST}),
    # async: a deferred update can land before the new round's clients start
    S.BROADCAST: frozenset({S.LOCAL_TRAINING, S.UPDATE_SUBMITTED}),
    S.LOCAL_TRAINING: frozenset({S.UPDATE_SUBMITTED}),
    # hierarchical: clients keep training between edge aggregations
    S.UPDATE_SUBMITTED: frozenset({S.AGGREGATED, S.LOCAL_TRAINING}),
    # async: more arrivals after a partial aggregation
    S.AGGREGATED: frozenset({S.EVALUATED, S.UPDATE_SUBMITTED}),
    # decentralised mode has no broadcast after the first round
    S.EVALUATED: frozenset({S.BROADCAST, S.LOCAL_TRAINING, S.CONVERGED}),
    S.CONVERGED: frozenset({S.DEPLOYED}),
    S.DEPLOYED: frozenset({S.MONITORED}),
    S.MONITORED: frozenset({S.REPLACED}),
    S.REPLACED: frozenset({S.TASK_CREATED}),
}


def is_legal(src: LifecycleState | str, dst: LifecycleState | str) -> bool:
    return LifecycleState(dst) in TRANSITIONS[LifecycleState(src)]


class Lifecycle:
    def __init__(self):
        self.state = S.TASK_CREATED
        self.history: list[LifecycleState] = [S.TASK_CREATED]

    def to(self, state: LifecycleState) -> bool:
        """Move to ``state``; returns False when already there."""
        if state == self.state:
            return False
        if not is_legal(self.state, state):
            raise InvariantViolation(f"illegal lifecycle transition {self.state.value} -> {state.value}")
        self.state = state
        self.history.append(state)
        return True
