"""Pairwise additive masking in fixed point, plus clipped Gaussian noise.

Values are encoded as ``round(x · 2^32)`` in the ring of integers modulo
2^64 (numpy ``uint64`` wraparound). Client ``i`` adds the PRG stream of
every pair seed shared with a peer ``j > i`` and subtracts those with
``j < i``, so masks cancel exactly when all participants are summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from fedsim._rng import substream
from fedsim.aggregation.fedavg import ModelUpdate
from fedsim.core import ParamVector
from fedsim.errors import ConfigurationError, ShapeError, UnrecoverableMasksError

__all__ = [
    "FIXED_POINT_SCALE",
    "MaskedUpdate",
    "encode_fixed",
    "decode_fixed",
    "pairwise_seeds",
    "mask",
    "secure_sum",
    "dp_noise",
]

FIXED_POINT_SCALE = 2**32


def encode_fixed(values: np.ndarray) -> np.ndarray:
    q = np.rint(np.asarray(values, dtype=np.float64) * FIXED_POINT_SCALE)
    if np.abs(q).max(initial=0) >= 2**62:
        raise ConfigurationError("value too large for the fixed-point range")
    return q.astype(np.int64).view(np.uint64)


def decode_fixed(ring: np.ndarray) -> np.ndarray:
    return np.asarray(ring, dtype=np.uint64).view(np.int64).astype(np.float64) / FIXED_POINT_SCALE


@dataclass(frozen=True)
class MaskedUpdate:
    """A client's parameters as masked ring elements (``uint64``)."""

    client_id: str
    masked: np.ndarray
    pair_seeds: Mapping[str, int]
    n_samples: int = 1

    def to_bytes(self) -> bytes:
        return self.masked.astype("<u8").tobytes()


def pairwise_seeds(participants: Iterable[str], seed: int) -> dict[str, dict[str, int]]:
    """Symmetric per-pair seeds standing in for a key agreement round."""
    ids = sorted(participants)
    out: dict[str, dict[str, int]] = {c: {} for c in ids}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            s = int(substream(seed, "pair", a, b).integers(2**63))
            out[a][b] = s
            out[b][a] = s
    return out


def _prg(pair_seed: int, dim: int) -> np.ndarray:
    bg = np.random.PCG64(pair_seed)
    return bg.random_raw(dim).astype(np.uint64)


def mask(
    update: ModelUpdate | ParamVector,
    participants: Sequence[str],
    seeds: Mapping[str, Mapping[str, int]] | Mapping[str, int],
    *,
    client_id: str | None = None,
    values: np.ndarray | None = None,
) -> MaskedUpdate:
    """Mask one client's parameters against every other participant.

    ``seeds`` is either the full table from :func:`pairwise_seeds` or this
    client's own ``peer -> seed`` row. ``values`` overrides the vector that
    gets masked (the simulator masks ``n_samples · params``).
    """
    if isinstance(update, ModelUpdate):
        client_id = update.client_id
        plain = update.params.values if values is None else values
        n_samples = update.n_samples
    else:
        if client_id is None:
            raise ConfigurationError("client_id is required when masking a bare ParamVector")
        plain = update.values if values is None else values
        n_samples = 1
    if client_id not in participants:
        raise ConfigurationError(f"{client_id!r} is not a listed participant")
    row = seeds[client_id] if isinstance(seeds.get(client_id), Mapping) else seeds
    ring = encode_fixed(plain)
    dim = ring.size
    pair_seeds = {}
    for peer in sorted(participants):
        if peer == client_id:
            continue
        s = row[peer]
        pair_seeds[peer] = s
        if peer > client_id:
            ring = ring + _prg(s, dim)
        else:
            ring = ring - _prg(s, dim)
    return MaskedUpdate(client_id, ring, pair_seeds, n_samples)


def secure_sum(masked: Sequence[MaskedUpdate]) -> ParamVector:
    """Sum of the plain vectors, recovered exactly from masked submissions.

    Aborts with ``UnrecoverableMasksError`` if any participant named in a
    pair seed did not submit, since its masks can no longer be removed.
    """
    if not masked:
        raise UnrecoverableMasksError("no masked updates submitted")
    present = {m.client_id for m in masked}
    if len(present) != len(masked):
        raise ConfigurationError("duplicate masked submissions")
    expected = set(present)
    for m in masked:
        expected |= set(m.pair_seeds)
    missing = sorted(expected - present)
    if missing:
        raise UnrecoverableMasksError(f"participants {missing} did not submit; their pair masks cannot be removed")
    dims = {m.masked.size for m in masked}
    if len(dims) != 1:
        raise ShapeError("masked updates have mixed dimensions")
    total = np.zeros(dims.pop(), dtype=np.uint64)
    for m in sorted(masked, key=lambda m: m.client_id):
        total = total + m.masked
    return ParamVector(decode_fixed(total))


def dp_noise(v: ParamVector, clip_norm: float, sigma: float, seed: int) -> ParamVector:
    """Clip to an L2 ball of radius ``clip_norm``, then add N(0, (sigma·clip_norm)²) noise."""
    if not clip_norm > 0:
        raise ConfigurationError("clip_norm must be positive")
    if sigma < 0:
        raise ConfigurationError("sigma must be non-negative")
    x = v.values
    norm = float(np.linalg.norm(x))
    if norm > clip_norm:
        x = x * (clip_norm / norm)
    if sigma > 0:
        x = x + substream(seed, "dp").normal(scale=sigma * clip_norm, size=x.size)
    return ParamVector(x, v.version)
