from __future__ import annotations

from dataclasses import dataclass

from fedsim._rng import substream
from fedsim.errors import ConfigurationError

__all__ = ["DeviceProfile", "transfer_time", "compute_time", "sample_dropout", "training_ops", "OPS_PER_SAMPLE_PARAM"]

# ops = c · n_samples · dim · local_epochs
OPS_PER_SAMPLE_PARAM = 4


@dataclass(frozen=True)
class DeviceProfile:
    """Compute and network characteristics of one device."""

    compute_capacity: float = 1000.0  # ops per virtual ms
    bandwidth: float = 100.0  # bytes per virtual ms
    base_latency: float = 5.0  # ms
    dropout_prob: float = 0.0

    def __post_init__(self):
        if self.compute_capacity <= 0 or self.bandwidth <= 0 or self.base_latency < 0:
            raise ConfigurationError("device profile rates must be positive and latency non-negative")
        if not 0 <= self.dropout_prob < 1:
            raise ConfigurationError("dropout_prob must lie in [0, 1)")


def transfer_time(n_bytes: float, profile: DeviceProfile) -> float:
    return profile.base_latency + n_bytes / profile.bandwidth


def compute_time(ops: float, profile: DeviceProfile) -> float:
    return ops / profile.compute_capacity


def training_ops(n_samples: int, dim: int, local_epochs: int) -> int:
    return OPS_PER_SAMPLE_PARAM * n_samples * dim * local_epochs


def sample_dropout(client_id: str, round: int, seed: int, prob: float) -> bool:
    """Bernoulli(prob) from a stream salted with the client and round."""
    if prob <= 0:
        return False
    return bool(substream(seed, "dropout", client_id, round).random() < prob)
