from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedsim.core import ParamVector
from fedsim.errors import AggregationError, ShapeError

__all__ = ["ModelUpdate", "fedavg", "weighted_mean"]


@dataclass(frozen=True)
class ModelUpdate:
    """Parameters a client submits after local training."""

    client_id: str
    origin_round: int
    params: ParamVector
    n_samples: int
    arrival_time: float = 0.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise AggregationError(f"update from {self.client_id!r} has n_samples < 1")


def weighted_mean(vectors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """``Σ (w_k / Σw) · v_k``; a single input comes back unchanged."""
    if len(vectors) == 1:
        return np.array(vectors[0], dtype=np.float64, copy=True)
    total = math.fsum(weights)
    out = np.zeros_like(vectors[0], dtype=np.float64)
    for v, w in zip(vectors, weights):
        out += (w / total) * v
    return out


def fedavg(updates: Sequence[ModelUpdate]) -> ParamVector:
    """Sample-count weighted average of client parameters.

    The result carries version ``max(origin_round) + 1``. Updates are summed
    in client id order so the output does not depend on input order.
    """
    if not updates:
        raise AggregationError("fedavg needs at least one update")
    dims = {u.params.dim for u in updates}
    if len(dims) != 1:
        raise ShapeError(f"updates have mixed dimensions {sorted(dims)}")
    ordered = sorted(updates, key=lambda u: (u.client_id, u.origin_round))
    values = weighted_mean([u.params.values for u in ordered], [u.n_samples for u in ordered])
    return ParamVector(values, max(u.origin_round for u in updates) + 1)
