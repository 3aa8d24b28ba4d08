from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any

from fedsim.errors import InvariantViolation

__all__ = ["EVENT_KINDS", "SimEvent", "EventQueue"]

EVENT_KINDS = (
    "broadcast_done",
    "train_done",
    "upload_done",
    "aggregate",
    "evaluate",
    "edge_aggregate",
    "gossip_tick",
    "trigger_check",
    "deploy",
)


@dataclass(order=True, frozen=True)
class SimEvent:
    time: float
    sequence_no: int
    kind: str = field(compare=False)
    subject: str = field(compare=False)
    payload: Any = field(default=None, compare=False)


class EventQueue:
    """Min-heap of events ordered by ``(time, sequence_no)`` with a monotone clock."""

    def __init__(self):
        self._heap: list[SimEvent] = []
        self._seq = 0
        self.now = 0.0

    def schedule(self, time: float, kind: str, subject: str, payload: Any = None) -> SimEvent:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        if time < self.now:
            raise InvariantViolation(f"event {kind} scheduled at {time} before the clock ({self.now})")
        ev = SimEvent(float(time), self._seq, kind, subject, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop(self) -> SimEvent:
        ev = heapq.heappop(self._heap)
        if ev.time < self.now:
            raise InvariantViolation("virtual clock moved backwards")
        self.now = ev.time
        return ev

    def advance(self, time: float) -> None:
        if time < self.now:
            raise InvariantViolation("virtual clock moved backwards")
        self.now = time

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)
