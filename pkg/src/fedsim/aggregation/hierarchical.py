from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from fedsim.aggregation.fedavg import ModelUpdate, fedavg, weighted_mean
from fedsim.core import ParamVector
from fedsim.errors import ConfigurationError, TopologyError

__all__ = ["HierarchicalSchedule", "EdgeModel", "hierarchical_round", "HierarchicalAggregator"]


@dataclass(frozen=True)
class HierarchicalSchedule:
    """Edge servers aggregate every ``k1`` local rounds, the cloud every ``k2`` edge aggregations."""

    k1: int
    k2: int
    edge_groups: Mapping[str, frozenset[str]]

    def __post_init__(self):
        if self.k1 < 1 or self.k2 < 1:
            raise ConfigurationError("k1 and k2 must be >= 1")
        groups = {e: frozenset(m) for e, m in self.edge_groups.items()}
        seen: dict[str, str] = {}
        for edge, members in sorted(groups.items()):
            if not members:
                raise TopologyError(f"edge {edge!r} has no clients")
            for c in members:
                if c in seen:
                    raise TopologyError(f"client {c!r} belongs to edges {seen[c]!r} and {edge!r}")
                seen[c] = edge
        object.__setattr__(self, "edge_groups", groups)

    @property
    def central_period(self) -> int:
        return self.k1 * self.k2

    def edge_of(self, client_id: str) -> str:
        for edge, members in self.edge_groups.items():
            if client_id in members:
                return edge
        raise TopologyError(f"client {client_id!r} is not attached to any edge server")


@dataclass(frozen=True)
class EdgeModel:
    edge_id: str
    params: ParamVector
    n_samples: int


def _edge_models(schedule: HierarchicalSchedule, updates: Sequence[ModelUpdate], skip=frozenset()):
    by_edge: dict[str, list[ModelUpdate]] = {}
    for u in updates:
        by_edge.setdefault(schedule.edge_of(u.client_id), []).append(u)
    out = {}
    for edge in sorted(by_edge):
        if edge in skip:
            continue
        group = by_edge[edge]
        out[edge] = EdgeModel(edge, fedavg(group), sum(u.n_samples for u in group))
    return out


def _central(edges: Mapping[str, EdgeModel]) -> ParamVector:
    ordered = [edges[e] for e in sorted(edges)]
    values = weighted_mean([m.params.values for m in ordered], [m.n_samples for m in ordered])
    return ParamVector(values, max(m.params.version for m in ordered))


def hierarchical_round(
    schedule: HierarchicalSchedule, client_updates: Sequence[ModelUpdate]
) -> tuple[dict[str, EdgeModel], ParamVector]:
    """One edge aggregation per edge group followed by the cloud aggregation.

    Edge models are sample-weighted FedAvg over their group; the central
    model is the sample-weighted mean of the edge models.
    """
    edges = _edge_models(schedule, client_updates)
    if not edges:
        raise ConfigurationError("no client updates to aggregate")
    return edges, _central(edges)


@dataclass
class HierarchicalAggregator:
    """Stateful driver that applies the ``k1``/``k2`` cadence.

    Call :meth:`step` once per local round with every client's update. The
    return value says which aggregations fired; central aggregation happens
    exactly when the local-update count is a multiple of ``k1·k2``.
    """

    schedule: HierarchicalSchedule
    local_updates: int = 0
    edge_aggregations: int = 0
    central_aggregations: int = 0
    failed_edges: set[str] = field(default_factory=set)
    edge_models: dict[str, EdgeModel] = field(default_factory=dict)
    central_model: ParamVector | None = None
    central_at: list[int] = field(default_factory=list)

    def step(self, client_updates: Sequence[ModelUpdate]) -> tuple[dict[str, EdgeModel] | None, ParamVector | None]:
        for u in client_updates:
            self.schedule.edge_of(u.client_id)
        self.local_updates += 1
        if self.local_updates % self.schedule.k1:
            return None, None
        edges = _edge_models(self.schedule, client_updates, skip=frozenset(self.failed_edges))
        self.edge_models.update(edges)
        self.edge_aggregations += 1
        if self.edge_aggregations % self.schedule.k2:
            return edges, None
        surviving = {e: m for e, m in self.edge_models.items() if e not in self.failed_edges}
        if not surviving:
            return edges, None
        self.central_model = _central(surviving)
        self.central_aggregations += 1
        self.central_at.append(self.local_updates)
        return edges, self.central_model
