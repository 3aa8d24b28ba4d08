from __future__ import annotations

from typing import Mapping

import networkx as nx
import numpy as np

from fedsim._rng import substream
from fedsim.core import ParamVector
from fedsim.errors import ConfigurationError, TopologyError

__all__ = ["build_topology", "validate_topology", "segment_bounds", "gossip_round", "leader_round"]


def build_topology(client_ids, kind: str = "complete", *, degree: int = 3, seed: int = 0) -> dict[str, set[str]]:
    """Adjacency sets for ``complete``, ``ring`` or seeded ``random_regular`` graphs."""
    ids = sorted(client_ids)
    n = len(ids)
    if kind == "complete":
        g = nx.complete_graph(n)
    elif kind == "ring":
        g = nx.cycle_graph(n) if n > 2 else nx.complete_graph(n)
    elif kind == "random_regular":
        if degree >= n or (degree * n) % 2:
            raise ConfigurationError(f"no {degree}-regular graph on {n} nodes")
        g = nx.random_regular_graph(degree, n, seed=seed)
    else:
        raise ConfigurationError(f"unknown topology {kind!r}")
    return {ids[i]: {ids[j] for j in g.neighbors(i)} for i in range(n)}


def validate_topology(topology: Mapping[str, set[str]]) -> None:
    g = nx.Graph()
    g.add_nodes_from(topology)
    for node, peers in topology.items():
        for p in peers:
            if p not in topology:
                raise TopologyError(f"{node!r} lists unknown peer {p!r}")
            if p == node:
                raise TopologyError(f"{node!r} lists itself as a peer")
            g.add_edge(node, p)
    if len(g) == 0:
        raise TopologyError("empty topology")
    if not nx.is_connected(g):
        raise TopologyError("gossip topology is disconnected")


def segment_bounds(dim: int, segments: int) -> list[tuple[int, int]]:
    """Contiguous blocks whose sizes differ by at most one."""
    if not 1 <= segments <= dim:
        raise ConfigurationError(f"segments must be in [1, {dim}], got {segments}")
    edges = np.linspace(0, dim, segments + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def gossip_round(
    states: Mapping[str, ParamVector],
    topology: Mapping[str, set[str]],
    fanout: int = 1,
    segments: int = 1,
    seed: int = 0,
    round: int = 0,
) -> dict[str, ParamVector]:
    """One round of segmented pairwise gossip.

    Clients act in id order. For every segment each client draws ``fanout``
    distinct neighbours and, with each in turn, replaces the segment on both
    sides by the pair mean. Pair averaging keeps the network-wide sum, hence
    the mean, unchanged.
    """
    if fanout < 1:
        raise ConfigurationError("fanout must be >= 1")
    ids = sorted(states)
    dims = {states[c].dim for c in ids}
    if len(dims) != 1:
        raise ConfigurationError("all gossip states must share a dimension")
    bounds = segment_bounds(dims.pop(), segments)
    work = {c: states[c].values.copy() for c in ids}
    rng = substream(seed, "gossip", round)
    for c in ids:
        peers = sorted(p for p in topology.get(c, ()) if p in work)
        if not peers:
            continue
        for lo, hi in bounds:
            picks = rng.choice(len(peers), size=min(fanout, len(peers)), replace=False)
            for j in picks:
                p = peers[j]
                mid = (work[c][lo:hi] + work[p][lo:hi]) / 2.0
                work[c][lo:hi] = mid
                work[p][lo:hi] = mid
    return {c: ParamVector(work[c], states[c].version) for c in ids}


def leader_round(
    states: Mapping[str, ParamVector],
    round: int,
    seed: int = 0,
    weights: Mapping[str, float] | None = None,
) -> tuple[str, dict[str, ParamVector]]:
    """Rotating-leader alternative: one client averages everyone and redistributes.

    The leader is picked round-robin from a seeded offset.
    """
    ids = sorted(states)
    offset = int(substream(seed, "leader").integers(len(ids)))
    leader = ids[(offset + round) % len(ids)]
    w = [1.0 if weights is None else float(weights[c]) for c in ids]
    total = sum(w)
    mean = np.zeros_like(states[ids[0]].values)
    for c, wc in zip(ids, w):
        mean += (wc / total) * states[c].values
    return leader, {c: ParamVector(mean, states[c].version) for c in ids}
