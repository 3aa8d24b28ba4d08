from __future__ import annotations

import math
from dataclasses import dataclass

from fedsim.aggregation.fedavg import ModelUpdate
from fedsim.core import ParamVector
from fedsim.errors import CausalityError, ConfigurationError, ShapeError

__all__ = ["StalenessPolicy", "async_aggregate", "mixing_weight"]


@dataclass(frozen=True)
class StalenessPolicy:
    """Down-weighting of late updates.

    ``inverse``: ``1 / (1 + rate·τ)``; ``exponential``: ``exp(-rate·τ)``.
    """

    decay: str = "inverse"
    rate: float = 1.0

    def __post_init__(self):
        if self.decay not in ("inverse", "exponential"):
            raise ConfigurationError(f"unknown staleness decay {self.decay!r}")
        if not self.rate > 0:
            raise ConfigurationError("staleness rate must be positive")

    def weight(self, staleness: int) -> float:
        if staleness < 0:
            raise CausalityError("staleness cannot be negative")
        if self.decay == "inverse":
            return 1.0 / (1.0 + self.rate * staleness)
        return math.exp(-self.rate * staleness)


def mixing_weight(policy: StalenessPolicy, staleness: int, mix: float) -> float:
    if not 0 < mix <= 1:
        raise ConfigurationError("mix must lie in (0, 1]")
    return mix * policy.weight(staleness)


def async_aggregate(
    current_global: ParamVector,
    update: ModelUpdate,
    current_round: int,
    policy: StalenessPolicy,
    mix: float = 1.0,
) -> ParamVector:
    """Blend one arriving update into the global model.

    ``α = mix · weight(current_round − origin_round)`` and the result is
    ``(1 − α)·global + α·update``. The version is left to the caller.
    """
    if update.origin_round > current_round:
        raise CausalityError(
            f"update from {update.client_id!r} originates in round {update.origin_round} > current {current_round}"
        )
    if update.params.dim != current_global.dim:
        raise ShapeError("update and global model dimensions differ")
    alpha = mixing_weight(policy, current_round - update.origin_round, mix)
    if alpha == 1.0:
        values = update.params.values
    else:
        values = (1.0 - alpha) * current_global.values + alpha * update.params.values
    return ParamVector(values, current_global.version)
