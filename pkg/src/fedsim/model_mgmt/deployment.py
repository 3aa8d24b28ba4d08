"""Per-cluster model deployment plans."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from fedsim.client_mgmt import ClusterAssignment, pairwise_distances
from fedsim.errors import DeploymentError
from fedsim.model_mgmt.coversion import CoVersionRegistry

__all__ = ["DeploymentPlan", "select_deployment", "nearest_cluster"]


@dataclass(frozen=True)
class DeploymentPlan:
    assignments: dict[str, bytes]
    rationale: dict[str, int]

    def hex(self) -> dict[str, str]:
        return {c: d.hex() for c, d in sorted(self.assignments.items())}


def select_deployment(
    registry: CoVersionRegistry,
    cluster_assignment: ClusterAssignment,
    per_cluster_models: Mapping[int, bytes],
    new_users: Mapping[str, int] | None = None,
) -> DeploymentPlan:
    """Map every client to the model digest of its cluster.

    ``new_users`` maps clients that never trained to the cluster chosen for
    them (see :func:`nearest_cluster`). Every digest must be a global model
    known to ``registry``.
    """
    rationale = dict(cluster_assignment.assignments)
    if new_users:
        overlap = set(new_users) & set(rationale)
        if overlap:
            raise DeploymentError(f"new users already in the cluster assignment: {sorted(overlap)}")
        rationale.update(new_users)
    assignments = {}
    for client_id in sorted(rationale):
        cluster = rationale[client_id]
        digest = per_cluster_models.get(cluster)
        if digest is None:
            raise DeploymentError(f"no model for cluster {cluster} (client {client_id!r})")
        if not registry.has_model(digest):
            raise DeploymentError(f"model {digest.hex()[:12]} for cluster {cluster} is not in the co-versioning registry")
        assignments[client_id] = digest
    return DeploymentPlan(assignments, rationale)


def nearest_cluster(summary: np.ndarray, medoid_summaries: Mapping[int, np.ndarray], metric: str = "euclidean") -> int:
    """Cluster whose medoid data summary is closest to ``summary``; ties go to the lower index."""
    clusters = sorted(medoid_summaries)
    V = np.vstack([summary] + [medoid_summaries[k] for k in clusters])
    d = pairwise_distances(V, metric)[0, 1:]
    return clusters[int(np.argmin(d))]
