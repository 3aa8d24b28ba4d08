"""Scenario schema, loading and validation.

Scenario files are UTF-8 JSON objects. Unknown keys are rejected so typos in
pattern toggles surface as validation errors instead of silently running the
default configuration.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedsim.errors import ScenarioParseError, ScenarioValidationError

__all__ = [
    "Scenario",
    "load_scenario",
    "parse_scenario",
    "validate_scenario",
    "SCENARIO_VERSION",
]

SCENARIO_VERSION = 1

Number = Union[float, tuple[float, float]]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DataSection(_Section):
    n_clients: int = Field(10, ge=1)
    samples_per_client: int = Field(100, ge=1)
    n_features: int = Field(5, ge=1)
    skew: float = Field(0.0, ge=0)
    noise: float = Field(0.1, ge=0)
    separation: float = Field(1.0, gt=0)
    probe_samples: int = Field(1000, ge=2)
    concept_modes: int = Field(1, ge=1)
    class_proportions: Optional[list[tuple[float, float]]] = None


class TrainingSection(_Section):
    learning_rate: float = Field(0.1, gt=0)
    local_epochs: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)
    shuffle: bool = True


class ProfileSection(_Section):
    compute_capacity: float = Field(1000.0, gt=0)
    bandwidth: float = Field(100.0, gt=0)
    base_latency: float = Field(5.0, ge=0)
    dropout_prob: float = Field(0.0, ge=0, lt=1)


class DeviceSection(_Section):
    """Device and network profiles; a ``[lo, hi]`` pair is sampled uniformly per client."""

    compute_capacity: Number = 1000.0
    bandwidth: Number = 100.0
    base_latency: Number = 5.0
    dropout_prob: Number = 0.0
    energy_budget: float = Field(0.0, ge=0)
    per_client: Optional[list[ProfileSection]] = None


class SelectionSection(_Section):
    mode: Literal["resource", "data", "performance", "random", "cdw"] = "random"
    top_k: Optional[int] = Field(None, ge=1)
    min_compute: float = Field(0.0, ge=0)
    min_bandwidth: float = Field(0.0, ge=0)
    max_heterogeneity: float = Field(1.0, ge=0)


class AsyncSection(_Section):
    decay: Literal["inverse", "exponential"] = "inverse"
    rate: float = Field(1.0, gt=0)
    mix: float = Field(1.0, gt=0, le=1)
    min_updates: Optional[int] = Field(None, ge=1)
    round_deadline_ms: Optional[float] = Field(None, gt=0)


class GossipSection(_Section):
    topology: Literal["complete", "ring", "random_regular"] = "complete"
    degree: int = Field(3, ge=1)
    fanout: int = Field(1, ge=1)
    segments: int = Field(1, ge=1)
    mode: Literal["symmetric", "leader"] = "symmetric"


class EdgeFailure(_Section):
    edge: str
    from_round: int = Field(ge=1)
    to_round: int = Field(ge=1)


class HierarchicalSection(_Section):
    k1: int = Field(1, ge=1)
    k2: int = Field(1, ge=1)
    n_edges: int = Field(2, ge=1)
    edge_groups: Optional[dict[str, list[str]]] = None
    edge_bandwidth: float = Field(1000.0, gt=0)
    edge_latency: float = Field(2.0, ge=0)
    failures: list[EdgeFailure] = []


class SecureSection(_Section):
    dp_sigma: float = Field(0.0, ge=0)
    clip_norm: Optional[float] = Field(None, gt=0)


class AggregatorSection(_Section):
    kind: Literal["fedavg", "async", "gossip", "hierarchical", "secure"] = "fedavg"
    async_: AsyncSection = Field(default_factory=AsyncSection, alias="async")
    gossip: GossipSection = Field(default_factory=GossipSection)
    hierarchical: HierarchicalSection = Field(default_factory=HierarchicalSection)
    secure: SecureSection = Field(default_factory=SecureSection)


class CompressionSection(_Section):
    scheme: Literal["none", "topk", "quantize"] = "none"
    k: Optional[int] = Field(None, ge=1)
    k_fraction: Optional[float] = Field(None, gt=0, le=1)
    bits: Literal[4, 8, 16] = 8


class ClusteringSection(_Section):
    enabled: bool = False
    n_clusters: int = Field(2, ge=1)
    metric: Literal["manhattan", "euclidean", "cosine"] = "cosine"
    after_rounds: int = Field(3, ge=0)


class MultitaskSection(_Section):
    anchor_source: Literal["global", "cluster_mean", "none"] = "none"
    lam: float = Field(0.0, ge=0, alias="lambda")


class BalanceSection(_Section):
    enabled: bool = False
    tolerance: float = Field(1.0, ge=1)


class IncentiveSection(_Section):
    enabled: bool = False
    scheme: Literal["data_volume", "loss_improvement", "shapley"] = "data_volume"
    budget: float = Field(100.0, ge=0)


class TriggerSection(_Section):
    enabled: bool = False
    metric: Literal["accuracy", "loss"] = "accuracy"
    threshold: float = 0.8
    patience: int = Field(3, ge=1)
    quorum_fraction: float = Field(0.5, gt=0, le=1)
    n_monitored: int = Field(5, ge=1)
    monitor_rounds: int = Field(10, ge=0)
    monitor_interval_ms: float = Field(100.0, gt=0)
    drift_after: Optional[int] = Field(None, ge=0)
    warm_start: bool = True
    max_replacements: int = Field(1, ge=0)


class ConvergenceSection(_Section):
    enabled: bool = True
    tolerance: float = Field(1e-4, gt=0)
    window: int = Field(5, ge=1)


class Scenario(_Section):
    version: Literal[1] = SCENARIO_VERSION
    name: str = "scenario"
    seed: int = 0
    rounds: int = Field(10, ge=0)
    task: Literal["linear-regression", "binary-logistic"] = "binary-logistic"
    data: DataSection = Field(default_factory=DataSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    devices: DeviceSection = Field(default_factory=DeviceSection)
    selection: SelectionSection = Field(default_factory=SelectionSection)
    aggregator: AggregatorSection = Field(default_factory=AggregatorSection)
    compression: CompressionSection = Field(default_factory=CompressionSection)
    clustering: ClusteringSection = Field(default_factory=ClusteringSection)
    multitask: MultitaskSection = Field(default_factory=MultitaskSection)
    balance: BalanceSection = Field(default_factory=BalanceSection)
    incentive: IncentiveSection = Field(default_factory=IncentiveSection)
    trigger: TriggerSection = Field(default_factory=TriggerSection)
    convergence: ConvergenceSection = Field(default_factory=ConvergenceSection)

    @property
    def dim(self) -> int:
        return self.data.n_features + 1

    @property
    def top_k(self) -> int:
        return self.selection.top_k or self.data.n_clients

    def client_ids(self) -> list[str]:
        width = max(3, len(str(self.data.n_clients - 1)))
        return [f"c{i:0{width}d}" for i in range(self.data.n_clients)]

    def topk_k(self) -> int | None:
        c = self.compression
        if c.scheme != "topk":
            return None
        if c.k is not None:
            return c.k
        return max(1, math.floor(self.dim * c.k_fraction))

    def edge_groups(self) -> dict[str, list[str]]:
        h = self.aggregator.hierarchical
        if h.edge_groups is not None:
            return {e: sorted(m) for e, m in h.edge_groups.items()}
        ids = self.client_ids()
        return {f"edge{e}": ids[e :: h.n_edges] for e in range(h.n_edges)}

    def with_seed(self, seed: int) -> "Scenario":
        return validate_scenario({**self.model_dump(by_alias=True), "seed": seed})

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)

    @model_validator(mode="after")
    def _cross_checks(self):
        problems = _cross_problems(self)
        if problems:
            raise _CrossFieldError(problems)
        return self


class _CrossFieldError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(f"{p}: {m}" for p, m in problems))
        self.problems = problems


def _cross_problems(s: Scenario) -> list[tuple[str, str]]:
    from fedsim.aggregation.gossip import build_topology, validate_topology
    from fedsim.errors import FedSimError

    out: list[tuple[str, str]] = []
    n = s.data.n_clients
    d = s.data
    if d.class_proportions is not None and len(d.class_proportions) != n:
        out.append(("data.class_proportions", f"needs {n} rows, got {len(d.class_proportions)}"))
    checks = {
        "compute_capacity": (lambda v: v > 0, "must be positive"),
        "bandwidth": (lambda v: v > 0, "must be positive"),
        "base_latency": (lambda v: v >= 0, "must be non-negative"),
        "dropout_prob": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    }
    for name, (ok, msg) in checks.items():
        value = getattr(s.devices, name)
        ends = value if isinstance(value, tuple) else (value,)
        if isinstance(value, tuple) and value[0] > value[1]:
            out.append((f"devices.{name}", "range low end exceeds high end"))
        if not all(ok(v) for v in ends):
            out.append((f"devices.{name}", msg))
    if s.devices.per_client is not None and len(s.devices.per_client) != n:
        out.append(("devices.per_client", f"needs {n} profiles"))

    c = s.compression
    if c.scheme == "topk":
        if c.k is None and c.k_fraction is None:
            out.append(("compression.k", "topk needs k or k_fraction"))
        elif c.k is not None and c.k > s.dim:
            out.append(("compression.k", f"k exceeds model dimension {s.dim}"))

    kind = s.aggregator.kind
    if c.scheme != "none" and kind in ("gossip", "secure"):
        out.append(("compression.scheme", f"compression is not supported with the {kind} aggregator"))
    if s.incentive.enabled and kind == "secure" and s.incentive.scheme != "data_volume":
        out.append(("incentive.scheme", "secure aggregation hides individual updates; only data_volume scoring applies"))
    if kind == "gossip":
        g = s.aggregator.gossip
        if g.segments > s.dim:
            out.append(("aggregator.gossip.segments", f"exceeds model dimension {s.dim}"))
        if n < 2:
            out.append(("data.n_clients", "gossip needs at least two clients"))
        else:
            try:
                validate_topology(build_topology(s.client_ids(), g.topology, degree=g.degree, seed=s.seed))
            except FedSimError as exc:
                out.append(("aggregator.gossip.topology", str(exc)))
    if kind == "hierarchical":
        h = s.aggregator.hierarchical
        ids = set(s.client_ids())
        groups = s.edge_groups()
        seen: dict[str, str] = {}
        for edge, members in groups.items():
            if not members:
                out.append((f"aggregator.hierarchical.edge_groups.{edge}", "edge has no clients"))
            for m in members:
                if m not in ids:
                    out.append((f"aggregator.hierarchical.edge_groups.{edge}", f"unknown client {m!r}"))
                elif m in seen:
                    out.append((f"aggregator.hierarchical.edge_groups.{edge}", f"client {m!r} also on {seen[m]!r}"))
                seen[m] = edge
        orphans = sorted(ids - set(seen))
        if orphans:
            out.append(("aggregator.hierarchical.edge_groups", f"clients without an edge: {orphans[:5]}"))
        for i, f in enumerate(h.failures):
            if f.edge not in groups:
                out.append((f"aggregator.hierarchical.failures.{i}.edge", f"unknown edge {f.edge!r}"))
            if f.to_round < f.from_round:
                out.append((f"aggregator.hierarchical.failures.{i}.to_round", "precedes from_round"))
    if s.clustering.enabled:
        if kind != "fedavg":
            out.append(("clustering.enabled", "client clustering runs with the fedavg aggregator only"))
        if s.clustering.n_clusters > n:
            out.append(("clustering.n_clusters", f"more clusters than clients ({n})"))
    if s.multitask.anchor_source == "cluster_mean" and not s.clustering.enabled:
        out.append(("multitask.anchor_source", "cluster_mean needs clustering.enabled"))
    if s.incentive.enabled:
        if kind in ("gossip", "hierarchical", "async"):
            out.append(("incentive.enabled", f"incentives are computed per synchronous round, not for {kind}"))
        if s.incentive.scheme == "shapley" and min(s.top_k, n) > 8:
            out.append(("incentive.scheme", "exact shapley supports at most 8 clients per round; lower selection.top_k"))
    t = s.trigger
    if t.enabled:
        if t.n_monitored > n:
            out.append(("trigger.n_monitored", f"exceeds n_clients ({n})"))
        if t.metric == "accuracy" and s.task != "binary-logistic":
            out.append(("trigger.metric", "accuracy monitoring needs the binary-logistic task"))
    if s.selection.top_k is not None and s.selection.top_k > n:
        out.append(("selection.top_k", f"exceeds n_clients ({n})"))
    return out


def _path(loc) -> str:
    parts = []
    for p in loc:
        if p in ("function-after[_cross_checks(), Scenario]",):
            continue
        parts.append(str(p))
    return ".".join(parts) or "<root>"


def validate_scenario(doc: dict) -> Scenario:
    """Build a :class:`Scenario`, collecting every problem with its field path."""
    if not isinstance(doc, dict):
        raise ScenarioValidationError([("<root>", "scenario must be a JSON object")])
    try:
        return Scenario.model_validate(doc)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            cause = err.get("ctx", {}).get("error")
            if isinstance(cause, _CrossFieldError):
                problems.extend(cause.problems)
            else:
                problems.append((_path(err["loc"]), err["msg"]))
        raise ScenarioValidationError(problems) from None


def parse_scenario(text: str | bytes) -> Scenario:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioParseError(f"scenario is not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(exc.msg, exc.lineno, exc.colno) from None
    return validate_scenario(doc)


def load_scenario(path: str | Path) -> Scenario:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc.strerror}") from None
    return parse_scenario(raw)
