"""Client registry, per-round client selection and similarity clustering."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from fedsim._rng import substream
from fedsim.core import Dataset, ParamVector
from fedsim.errors import ConfigurationError, NotFoundError, RegistryConflictError, ShapeError

__all__ = [
    "ClientRecord",
    "ClientRegistry",
    "SelectionCriteria",
    "ClusterAssignment",
    "register_client",
    "select_clients",
    "cluster_clients",
    "pairwise_distances",
    "centroid_distance",
    "heterogeneity",
    "SELECTION_MODES",
    "METRICS",
]

SELECTION_MODES = ("resource", "data", "performance", "random", "cdw")
METRICS = ("manhattan", "euclidean", "cosine")


def centroid_distance(data: Dataset) -> float:
    """Euclidean distance between the feature centroids of class 1 and class 0.

    Zero when the client holds fewer than two classes.
    """
    labels = data.groups
    if not ((labels == 0).any() and (labels == 1).any()):
        return 0.0
    c0 = data.features[labels == 0].mean(axis=0)
    c1 = data.features[labels == 1].mean(axis=0)
    return float(np.linalg.norm(c1 - c0))


def heterogeneity(class_histogram: Mapping[int, int], classes: Iterable[int] | None = None) -> float:
    """Spread between the largest and smallest class share, in [0, 1]."""
    classes = sorted(set(classes or ()) | set(class_histogram))
    total = sum(class_histogram.values())
    if total == 0 or len(classes) < 2:
        return 0.0
    shares = [class_histogram.get(c, 0) / total for c in classes]
    return max(shares) - min(shares)


@dataclass(frozen=True)
class ClientRecord:
    client_id: str
    compute_capacity: float = 1.0
    bandwidth: float = 1.0
    energy_budget: float = 0.0
    online: bool = True
    connect_time: float | None = None
    disconnect_time: float | None = None
    perf_history: tuple[tuple[int, float], ...] = ()
    n_samples: int = 0
    class_histogram: Mapping[int, int] = field(default_factory=dict)
    centroid_distance: float = 0.0

    # fields describing the device itself; re-registering with different values is a conflict
    IMMUTABLE = ("compute_capacity", "bandwidth", "connect_time")

    def __post_init__(self):
        if not isinstance(self.client_id, str) or not self.client_id:
            raise ConfigurationError("client_id must be a non-empty string")
        if self.compute_capacity <= 0 or self.bandwidth <= 0:
            raise ConfigurationError(f"{self.client_id}: compute_capacity and bandwidth must be positive")
        if self.energy_budget < 0:
            raise ConfigurationError(f"{self.client_id}: energy_budget must be non-negative")
        if (
            self.connect_time is not None
            and self.disconnect_time is not None
            and self.disconnect_time < self.connect_time
        ):
            raise ConfigurationError(f"{self.client_id}: disconnect_time precedes connect_time")
        history = tuple((int(r), float(l)) for r, l in self.perf_history)
        rounds = [r for r, _ in history]
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ConfigurationError(f"{self.client_id}: perf_history rounds must be strictly increasing")
        object.__setattr__(self, "perf_history", history)
        object.__setattr__(
            self, "class_histogram", {int(k): int(v) for k, v in sorted(dict(self.class_histogram).items())}
        )

    @classmethod
    def from_dataset(cls, client_id: str, data: Dataset, **kwargs) -> "ClientRecord":
        return cls(
            client_id=client_id,
            n_samples=data.n_samples,
            class_histogram=data.class_histogram,
            centroid_distance=centroid_distance(data),
            **kwargs,
        )

    @property
    def last_loss(self) -> float | None:
        return self.perf_history[-1][1] if self.perf_history else None

    def with_performance(self, round: int, loss: float) -> "ClientRecord":
        return replace(self, perf_history=self.perf_history + ((round, loss),))

    def to_json(self) -> dict:
        d = asdict(self)
        d["perf_history"] = [list(p) for p in self.perf_history]
        d["class_histogram"] = {str(k): v for k, v in self.class_histogram.items()}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ClientRecord":
        d = dict(d)
        d["perf_history"] = tuple(tuple(p) for p in d.get("perf_history", ()))
        d["class_histogram"] = {int(k): v for k, v in d.get("class_histogram", {}).items()}
        return cls(**d)


class ClientRegistry:
    """Thread-safe store of :class:`ClientRecord` keyed by client id.

    Records are immutable, so readers only need the lock long enough to
    grab a reference; a snapshot is always a consistent set of whole records.
    """

    def __init__(self, records: Iterable[ClientRecord] = ()):
        self._lock = threading.RLock()
        self._records: dict[str, ClientRecord] = {}
        for r in records:
            self.register(r)

    def register(self, record: ClientRecord) -> "ClientRegistry":
        with self._lock:
            existing = self._records.get(record.client_id)
            if existing is not None:
                for name in ClientRecord.IMMUTABLE:
                    if getattr(existing, name) != getattr(record, name):
                        raise RegistryConflictError(
                            f"client {record.client_id!r} already registered with different {name}"
                        )
            self._records[record.client_id] = record
        return self

    def update(self, client_id: str, **changes) -> ClientRecord:
        with self._lock:
            record = replace(self.get(client_id), **changes)
            self._records[client_id] = record
            return record

    def record_performance(self, client_id: str, round: int, loss: float) -> ClientRecord:
        with self._lock:
            record = self.get(client_id).with_performance(round, loss)
            self._records[client_id] = record
            return record

    def set_online(self, client_id: str, online: bool) -> None:
        with self._lock:
            record = self.get(client_id)
            if record.online != online:
                self._records[client_id] = replace(record, online=online)

    def get(self, client_id: str) -> ClientRecord:
        try:
            return self._records[client_id]
        except KeyError:
            raise NotFoundError(f"client {client_id!r} not registered") from None

    def __contains__(self, client_id: str) -> bool:
        return client_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self.snapshot())

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._records)

    def snapshot(self) -> list[ClientRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def to_json(self) -> str:
        """UTF-8 JSON export, one record per client, stable key order."""
        return json.dumps({"clients": [r.to_json() for r in self.snapshot()]}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str | bytes) -> "ClientRegistry":
        doc = json.loads(text)
        return cls(ClientRecord.from_json(d) for d in doc["clients"])


def register_client(registry: ClientRegistry, record: ClientRecord) -> ClientRegistry:
    return registry.register(record)


@dataclass(frozen=True)
class SelectionCriteria:
    mode: str = "random"
    top_k: int = 10
    min_compute: float = 0.0
    min_bandwidth: float = 0.0
    max_heterogeneity: float = 1.0

    def __post_init__(self):
        if self.mode not in SELECTION_MODES:
            raise ConfigurationError(f"unknown selection mode {self.mode!r}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")
        if min(self.min_compute, self.min_bandwidth, self.max_heterogeneity) < 0:
            raise ConfigurationError("selection thresholds must be non-negative")


def select_clients(
    registry: ClientRegistry, criteria: SelectionCriteria, round: int, seed: int
) -> list[str]:
    """Pick up to ``top_k`` online clients for ``round``.

    Every mode first filters on online status and the resource thresholds,
    then ranks:

    * ``resource``: compute capacity times bandwidth, descending
    * ``data``: sample count descending, after dropping clients whose class
      heterogeneity exceeds ``max_heterogeneity``
    * ``performance``: most recent loss ascending; clients without history last
    * ``cdw``: class-centroid distance descending
    * ``random``: uniform subset from a round-salted stream

    Ties always fall back to client id order. An empty list means the round
    has no eligible client.
    """
    records = registry.snapshot()
    eligible = [
        r
        for r in records
        if r.online and r.compute_capacity >= criteria.min_compute and r.bandwidth >= criteria.min_bandwidth
    ]
    mode = criteria.mode
    if mode == "data":
        classes = set()
        for r in records:
            classes |= set(r.class_histogram)
        eligible = [r for r in eligible if heterogeneity(r.class_histogram, classes) <= criteria.max_heterogeneity]
    if not eligible:
        return []
    k = min(criteria.top_k, len(eligible))
    if mode == "random":
        rng = substream(seed, "select", round)
        picks = rng.choice(len(eligible), size=k, replace=False)
        return sorted(eligible[i].client_id for i in picks)
    if mode == "resource":
        key = lambda r: (-r.compute_capacity * r.bandwidth, r.client_id)
    elif mode == "data":
        key = lambda r: (-r.n_samples, r.client_id)
    elif mode == "performance":
        key = lambda r: (r.last_loss is None, r.last_loss if r.last_loss is not None else 0.0, r.client_id)
    else:
        key = lambda r: (-r.centroid_distance, r.client_id)
    return [r.client_id for r in sorted(eligible, key=key)[:k]]


@dataclass(frozen=True)
class ClusterAssignment:
    assignments: dict[str, int]
    n_clusters: int
    metric: str
    medoids: tuple[str, ...] = ()

    def members(self, cluster: int) -> list[str]:
        return sorted(c for c, k in self.assignments.items() if k == cluster)

    def labels(self, order: Iterable[str]) -> list[int]:
        return [self.assignments[c] for c in order]


def pairwise_distances(vectors: np.ndarray, metric: str) -> np.ndarray:
    if metric not in METRICS:
        raise ConfigurationError(f"unknown metric {metric!r}")
    V = np.asarray(vectors, dtype=np.float64)
    diff = V[:, None, :] - V[None, :, :]
    if metric == "manhattan":
        return np.abs(diff).sum(axis=2)
    if metric == "euclidean":
        return np.sqrt((diff * diff).sum(axis=2))
    norms = np.linalg.norm(V, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = V / safe[:, None]
    D = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    zero = norms == 0
    # a zero vector has no direction: orthogonal to everything except another zero vector
    D[zero, :] = 1.0
    D[:, zero] = 1.0
    D[np.ix_(zero, zero)] = 0.0
    np.fill_diagonal(D, 0.0)
    return D


def _assign(D: np.ndarray, medoids: list[int]) -> np.ndarray:
    labels = np.argmin(D[:, medoids], axis=1)
    for k, m in enumerate(medoids):
        labels[m] = k
    return labels


def _cost(D: np.ndarray, medoids: list[int]) -> float:
    return float(D[:, medoids].min(axis=1).sum())


def cluster_clients(
    updates: Mapping[str, ParamVector], n_clusters: int, metric: str = "cosine"
) -> ClusterAssignment:
    """Partition clients with k-medoids (PAM swap search) under ``metric``.

    Medoids start at the lexicographically first client ids and are swapped
    greedily while the total distance strictly decreases, scanning candidates
    in id order. Points tied between medoids go to the lower cluster index.
    If every pairwise distance is zero the clients are split into contiguous
    runs of the sorted id list. Clusters are numbered by their smallest
    member id.
    """
    if metric not in METRICS:
        raise ConfigurationError(f"unknown metric {metric!r}")
    if n_clusters < 1:
        raise ConfigurationError("n_clusters must be >= 1")
    ids = sorted(updates)
    if len(ids) < n_clusters:
        raise ConfigurationError(f"{len(ids)} clients cannot form {n_clusters} clusters")
    dims = {updates[c].dim for c in ids}
    if len(dims) > 1:
        raise ShapeError(f"updates have mixed dimensions {sorted(dims)}")
    V = np.vstack([updates[c].values for c in ids])
    D = pairwise_distances(V, metric)
    n = len(ids)

    if not D.any():
        labels = np.concatenate([np.full(len(part), k) for k, part in enumerate(np.array_split(np.arange(n), n_clusters))])
        medoids = [int(part[0]) for part in np.array_split(np.arange(n), n_clusters)]
    else:
        medoids = list(range(n_clusters))
        cost = _cost(D, medoids)
        improved = True
        while improved:
            improved = False
            for slot in range(n_clusters):
                for cand in range(n):
                    if cand in medoids:
                        continue
                    trial = medoids.copy()
                    trial[slot] = cand
                    c = _cost(D, trial)
                    if c < cost - 1e-12:
                        medoids, cost, improved = trial, c, True
        labels = _assign(D, medoids)

    # canonical numbering: cluster of the first id is 0, and so on
    remap: dict[int, int] = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    for lab in range(n_clusters):
        remap.setdefault(lab, len(remap))
    assignments = {cid: remap[int(lab)] for cid, lab in zip(ids, labels)}
    ordered_medoids = [None] * n_clusters
    for k, m in enumerate(medoids):
        ordered_medoids[remap[k]] = ids[m]
    return ClusterAssignment(assignments, n_clusters, metric, tuple(ordered_medoids))
