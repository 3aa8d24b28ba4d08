from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

__all__ = ["MetricsRecord", "MetricsStream", "summarize"]


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError("metrics values must be finite")
        return value
    if isinstance(value, bytes):
        return value.hex()
    return value


@dataclass
class MetricsRecord:
    round: int
    virtual_time_ms: float
    event: str
    subject: str
    global_loss: float | None
    global_accuracy: float | None
    bytes_up: int = 0
    bytes_down: int = 0
    participants: int = 0
    dropouts: int = 0
    aggregator: str = "fedavg"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)


class MetricsStream(list):
    """Ordered metrics records, one per emitted event."""

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self)

    @staticmethod
    def parse(text: str) -> list[dict]:
        return [json.loads(line) for line in text.splitlines() if line.strip()]


def summarize(records: list[dict]) -> dict:
    """Totals recomputable from a parsed metrics.jsonl by a plain fold."""
    total_up = sum(r["bytes_up"] for r in records)
    total_down = sum(r["bytes_down"] for r in records)
    dropouts = sum(r["dropouts"] for r in records)
    evals = [r for r in records if r["event"] == "evaluate"]
    converged = [r for r in records if r["event"] == "converged"]
    rounds_to_convergence = None
    for r in converged:
        if r["extra"].get("criterion") == "tolerance":
            rounds_to_convergence = r["round"]
            break
    return {
        "events": len(records),
        "total_bytes_up": total_up,
        "total_bytes_down": total_down,
        "total_dropouts": dropouts,
        "total_virtual_time_ms": records[-1]["virtual_time_ms"] if records else 0.0,
        "rounds_completed": max((r["round"] for r in evals), default=0),
        "final_loss": evals[-1]["global_loss"] if evals else None,
        "final_accuracy": evals[-1]["global_accuracy"] if evals else None,
        "rounds_to_convergence": rounds_to_convergence,
        "total_rewards": math.fsum(r["extra"].get("reward", 0.0) for r in records if r["event"] == "reward"),
    }
