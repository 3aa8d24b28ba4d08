"""Multi-task planning, local data balancing and incentive accounting."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Mapping

import numpy as np

from fedsim._rng import substream
from fedsim.core import Dataset, ParamVector
from fedsim.errors import BalanceError, CapacityError, ConfigurationError
from fedsim.model_mgmt.coversion import KIND_REWARD, HashChainLog

__all__ = [
    "MultiTaskPlan",
    "BalanceReport",
    "ContributionInput",
    "LedgerEntry",
    "balance_dataset",
    "score_contribution",
    "shapley_values",
    "distribute_rewards",
    "encode_ledger",
    "decode_ledger",
    "JITTER_SCALE",
    "MAX_SHAPLEY_CLIENTS",
]

JITTER_SCALE = 0.01
MAX_SHAPLEY_CLIENTS = 8
CONTRIBUTION_SCHEMES = ("data_volume", "loss_improvement", "shapley")


@dataclass(frozen=True)
class MultiTaskPlan:
    anchor_source: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.anchor_source not in ("global", "cluster_mean", "none"):
            raise ConfigurationError(f"unknown anchor source {self.anchor_source!r}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.anchor_source == "none" else self.lam

    def anchor(self, global_model: ParamVector, cluster_model: ParamVector | None = None) -> ParamVector | None:
        if self.anchor_source == "none":
            return None
        if self.anchor_source == "cluster_mean" and cluster_model is not None:
            return cluster_model
        return global_model


@dataclass(frozen=True)
class BalanceReport:
    before: dict[int, int]
    after: dict[int, int]
    added: int
    removed: int


def balance_dataset(data: Dataset, tolerance: float = 1.0, seed: int = 0) -> tuple[Dataset, BalanceReport]:
    """Even out class counts by jittered oversampling and uniform downsampling.

    Nothing changes when the max/min class ratio is already within
    ``tolerance``. Otherwise the per-class count z-scores decide direction:
    classes below the mean count are grown by duplicating random members
    with Gaussian feature jitter (std ``0.01 * feature std``), classes above
    it are subsampled without replacement, all to the rounded mean count.
    """
    if tolerance < 1:
        raise ConfigurationError("tolerance is a max/min ratio and must be >= 1")
    before = data.class_histogram
    if len(before) < 2:
        raise BalanceError("dataset holds a single class; balancing would need new classes")
    counts = np.array(list(before.values()), dtype=np.float64)
    if counts.max() / counts.min() <= tolerance:
        return data, BalanceReport(before, dict(before), 0, 0)

    rng = substream(seed, "balance")
    target = int(round(counts.mean()))
    z = (counts - counts.mean()) / counts.std()
    feature_std = data.features.std(axis=0)
    groups = data.groups
    keep_parts = []
    synth_X, synth_y, synth_s = [], [], []
    added = removed = 0
    for (cls, count), score in zip(before.items(), z):
        members = np.flatnonzero(groups == cls)
        if score > 0 and count > target:
            chosen = np.sort(rng.choice(members, size=target, replace=False))
            keep_parts.append(chosen)
            removed += count - target
            continue
        keep_parts.append(members)
        extra = target - count
        if score < 0 and extra > 0:
            src = rng.choice(members, size=extra, replace=True)
            noise = rng.normal(size=(extra, data.n_features)) * (JITTER_SCALE * feature_std)
            synth_X.append(data.features[src] + noise)
            synth_y.append(data.labels[src])
            synth_s.append(groups[src])
            added += extra
    kept = data.subset(np.concatenate(keep_parts))
    parts = [kept]
    if synth_X:
        parts.append(Dataset(np.vstack(synth_X), np.concatenate(synth_y), data.task, np.concatenate(synth_s)))
    if kept.strata is None and len(parts) > 1:
        parts[0] = Dataset(kept.features, kept.labels, kept.task, kept.groups)
    out = Dataset.concatenate(parts)
    order = rng.permutation(out.n_samples)
    out = out.subset(order)
    return out, BalanceReport(before, out.class_histogram, added, removed)


@dataclass(frozen=True)
class ContributionInput:
    """Per-client inputs to contribution scoring.

    ``loss_without`` is the probe loss of the aggregate built without this
    client, ``loss_with`` the probe loss of the full aggregate.
    """

    n_samples: int
    loss_without: float = 0.0
    loss_with: float = 0.0


def shapley_values(players, value: Callable[[frozenset], float]) -> dict[str, float]:
    """Exact Shapley values by enumerating all 2^n coalitions.

    ``value`` is called once per coalition (a frozenset of players).
    """
    players = sorted(players)
    n = len(players)
    if n > MAX_SHAPLEY_CLIENTS:
        raise CapacityError(f"exact Shapley supports at most {MAX_SHAPLEY_CLIENTS} clients, got {n}")
    cache: dict[frozenset, float] = {}
    for size in range(n + 1):
        for combo in combinations(players, size):
            s = frozenset(combo)
            cache[s] = float(value(s))
    weights = [math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)]
    out = {}
    for p in players:
        terms = []
        for coalition, v in cache.items():
            if p in coalition:
                continue
            terms.append(weights[len(coalition)] * (cache[coalition | {p}] - v))
        out[p] = math.fsum(terms)
    return out


def score_contribution(
    scheme: str,
    round_data: Mapping[str, ContributionInput],
    coalition_evaluator: Callable[[frozenset], float] | None = None,
) -> dict[str, float]:
    """Score each client's contribution to one round.

    * ``data_volume``: share of the round's samples
    * ``loss_improvement``: ``max(0, loss_without - loss_with)``
    * ``shapley``: exact Shapley value under ``coalition_evaluator``
    """
    if scheme not in CONTRIBUTION_SCHEMES:
        raise ConfigurationError(f"unknown contribution scheme {scheme!r}")
    if scheme == "data_volume":
        total = sum(d.n_samples for d in round_data.values())
        return {c: (d.n_samples / total if total else 0.0) for c, d in round_data.items()}
    if scheme == "loss_improvement":
        return {c: max(0.0, d.loss_without - d.loss_with) for c, d in round_data.items()}
    if coalition_evaluator is None:
        raise ConfigurationError("shapley scoring needs a coalition evaluator")
    return shapley_values(round_data.keys(), coalition_evaluator)


@dataclass(frozen=True)
class LedgerEntry:
    client_id: str
    round: int
    contribution_score: float
    reward: float
    scheme: str

    def to_json(self) -> dict:
        return {
            "client_id": self.client_id,
            "round": self.round,
            "contribution_score": self.contribution_score,
            "reward": self.reward,
            "scheme": self.scheme,
        }


_LEDGER_HEAD = struct.Struct("<QBI")
_LEDGER_ROW = struct.Struct("<dd")


def encode_ledger(entries: list[LedgerEntry]) -> bytes:
    rnd = entries[0].round if entries else 0
    scheme = entries[0].scheme if entries else "data_volume"
    parts = [_LEDGER_HEAD.pack(rnd, CONTRIBUTION_SCHEMES.index(scheme), len(entries))]
    for e in entries:
        raw = e.client_id.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + _LEDGER_ROW.pack(e.contribution_score, e.reward))
    return b"".join(parts)


def decode_ledger(payload: bytes) -> list[LedgerEntry]:
    """Inverse of :func:`encode_ledger` (``payload`` excludes the kind byte)."""
    rnd, scheme_code, n = _LEDGER_HEAD.unpack_from(payload, 0)
    pos = _LEDGER_HEAD.size
    out = []
    for _ in range(n):
        (length,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        cid = payload[pos : pos + length].decode("utf-8")
        pos += length
        score, reward = _LEDGER_ROW.unpack_from(payload, pos)
        pos += _LEDGER_ROW.size
        out.append(LedgerEntry(cid, rnd, score, reward, CONTRIBUTION_SCHEMES[scheme_code]))
    return out


def distribute_rewards(
    scores: Mapping[str, float],
    budget: float,
    *,
    round: int = 0,
    scheme: str = "data_volume",
    log: HashChainLog | None = None,
) -> list[LedgerEntry]:
    """Split ``budget`` in proportion to ``scores``.

    All-zero scores split the budget uniformly. The last client (in id
    order) absorbs the floating-point residue so rewards sum to the budget.
    When ``log`` is given the entries are appended to it as one record.
    """
    if budget < 0:
        raise ConfigurationError("reward budget must be non-negative")
    if any(s < 0 for s in scores.values()):
        raise ConfigurationError("contribution scores must be non-negative")
    ids = sorted(scores)
    if not ids:
        return []
    total = math.fsum(scores[c] for c in ids)
    if total > 0:
        rewards = [budget * scores[c] / total for c in ids]
    else:
        rewards = [budget / len(ids)] * len(ids)
    rewards[-1] = max(0.0, budget - math.fsum(rewards[:-1]))
    entries = [LedgerEntry(c, round, float(scores[c]), r, scheme) for c, r in zip(ids, rewards)]
    if log is not None:
        log.append(KIND_REWARD, encode_ledger(entries))
    return entries
