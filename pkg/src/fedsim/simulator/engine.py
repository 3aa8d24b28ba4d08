"""Discrete-event execution of a federated training scenario.

The engine is single-threaded: logical concurrency between devices is
expressed as events on a virtual clock ordered by ``(time, sequence_no)``.
Every random decision draws from a named sub-stream of the scenario seed,
so a scenario and seed fully determine the metrics stream.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from fedsim._rng import substream
from fedsim.aggregation import (
    HierarchicalAggregator,
    HierarchicalSchedule,
    ModelUpdate,
    StalenessPolicy,
    async_aggregate,
    build_topology,
    dp_noise,
    fedavg,
    gossip_round,
    leader_round,
    mask,
    mixing_weight,
    pairwise_seeds,
    secure_sum,
    segment_bounds,
)
from fedsim.client_mgmt import ClientRecord, ClientRegistry, ClusterAssignment, SelectionCriteria, cluster_clients, select_clients
from fedsim.core import Dataset, EvalReport, ParamVector, SyntheticTask, Task, TrainingConfig, evaluate, local_train
from fedsim.errors import BalanceError, InvariantViolation
from fedsim.model_mgmt import (
    CoVersionRegistry,
    DeploymentPlan,
    HashChainLog,
    TriggerState,
    atomic_write_bytes,
    check_replacement_trigger,
    compress,
    decompress,
    select_deployment,
)
from fedsim.simulator.events import EventQueue, SimEvent
from fedsim.simulator.lifecycle import Lifecycle, LifecycleState
from fedsim.simulator.metrics import MetricsRecord, MetricsStream, summarize
from fedsim.simulator.profiles import DeviceProfile, compute_time, sample_dropout, training_ops, transfer_time
from fedsim.simulator.scenario import Scenario
from fedsim.training_patterns import (
    ContributionInput,
    MultiTaskPlan,
    balance_dataset,
    distribute_rewards,
    score_contribution,
)

__all__ = ["Simulator", "RunResult", "run_scenario", "OUTPUT_FILES"]

OUTPUT_FILES = ("metrics.jsonl", "coversion.log", "summary.json")

log = logging.getLogger("fedsim.simulator")

S = LifecycleState
SERVER = "server"


def _seed_int(seed: int, *names) -> int:
    return int(substream(seed, *names).integers(2**63))


@dataclass
class RunResult:
    scenario: Scenario
    metrics: MetricsStream
    coversion: CoVersionRegistry
    global_model: ParamVector
    summary: dict
    registry: ClientRegistry
    client_data: dict[str, Dataset]
    probe: Dataset
    lifecycle: list[LifecycleState]
    cluster_assignment: ClusterAssignment | None = None
    cluster_models: dict[int, ParamVector] = field(default_factory=dict)
    deployment: DeploymentPlan | None = None
    models_by_digest: dict[bytes, ParamVector] = field(default_factory=dict)
    trigger: TriggerState | None = None

    def metrics_jsonl(self) -> str:
        return self.metrics.to_jsonl()

    def write(self, out_dir: str | os.PathLike) -> dict[str, Path]:
        """Write metrics.jsonl, coversion.log and summary.json, each atomically."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / name for name in OUTPUT_FILES}
        atomic_write_bytes(paths["metrics.jsonl"], self.metrics_jsonl().encode("utf-8"))
        atomic_write_bytes(paths["coversion.log"], self.coversion.log.to_bytes())
        summary = json.dumps(self.summary, sort_keys=True, indent=2, allow_nan=False) + "\n"
        atomic_write_bytes(paths["summary.json"], summary.encode("utf-8"))
        return paths


@dataclass
class _Upload:
    update: ModelUpdate
    digest: bytes
    n_bytes: int
    masked: object = None


class Simulator:
    """Runs one :class:`Scenario`.

    ``client_data``/``probe`` replace the synthetic generator when given
    (used by the estimator wrappers); ``initial_model`` defaults to zeros.
    """

    def __init__(
        self,
        scenario: Scenario,
        *,
        client_data: list[Dataset] | None = None,
        probe: Dataset | None = None,
        initial_model: ParamVector | None = None,
    ):
        s = scenario
        self.s = s
        self.seed = s.seed
        self.task = Task.parse(s.task)
        self.kind = s.aggregator.kind
        self.ids = s.client_ids()
        if client_data is None:
            synth = SyntheticTask.from_seed(
                self.task, s.data.n_features, s.seed, noise=s.data.noise, separation=s.data.separation
            )
            client_data = synth.partitions(
                s.data.n_clients,
                s.data.samples_per_client,
                s.data.skew,
                s.seed,
                concept_modes=s.data.concept_modes,
                class_proportions=s.data.class_proportions,
            )
            if probe is None:
                probe = synth.sample_iid(s.data.probe_samples, substream(s.seed, "probe"))
        if len(client_data) != len(self.ids):
            raise ValueError(f"scenario has {len(self.ids)} clients but {len(client_data)} datasets were given")
        if probe is None:
            probe = Dataset.concatenate(list(client_data))
        self.data: dict[str, Dataset] = dict(zip(self.ids, client_data))
        self.probe = probe
        self.dim = s.dim
        self.model_bytes = 8 * self.dim
        self.plan = MultiTaskPlan(s.multitask.anchor_source, s.multitask.lam)
        self.cfg = TrainingConfig(
            s.training.learning_rate, s.training.local_epochs, s.training.batch_size, self.plan.effective_lambda
        )
        self.criteria = SelectionCriteria(
            s.selection.mode, s.top_k, s.selection.min_compute, s.selection.min_bandwidth, s.selection.max_heterogeneity
        )
        self.policy = StalenessPolicy(s.aggregator.async_.decay, s.aggregator.async_.rate)

        self.queue = EventQueue()
        self.lifecycle = Lifecycle()
        self.metrics = MetricsStream()
        self.log = HashChainLog()
        self.coversion = CoVersionRegistry(self.log)
        self.global_model = initial_model if initial_model is not None else ParamVector.zeros(self.dim)
        self.initial_model = self.global_model
        self.models_by_digest: dict[bytes, ParamVector] = {}
        self.version = 0
        self.round = 0
        self.local_versions = {c: 0 for c in self.ids}
        self.local_steps = {c: 0 for c in self.ids}
        self.personal: dict[str, ParamVector] = {}
        self.last_loss: float | None = None
        self.last_acc: float | None = None
        self.clusters: ClusterAssignment | None = None
        self.cluster_models: dict[int, ParamVector] = {}
        self.cluster_digests: dict[int, bytes] = {}
        self.inflight: set[str] = set()
        self.hier_local_count = 0
        self.gossip_states: dict[str, ParamVector] = {}
        self.deployment: DeploymentPlan | None = None
        self.trigger_state: TriggerState | None = None
        self.replacements = 0
        self.drifted = False
        self.convergence_round: int | None = None
        self.balance_reports: dict[str, dict] = {}

        self._balance()
        self.profiles = self._profiles()
        self.registry = ClientRegistry(
            ClientRecord.from_dataset(
                c,
                self.data[c],
                compute_capacity=self.profiles[c].compute_capacity,
                bandwidth=self.profiles[c].bandwidth,
                energy_budget=s.devices.energy_budget,
                connect_time=0.0,
            )
            for c in self.ids
        )

    # ------------------------------------------------------------------ setup

    def _balance(self) -> None:
        if not self.s.balance.enabled:
            return
        for i, c in enumerate(self.ids):
            try:
                balanced, report = balance_dataset(self.data[c], self.s.balance.tolerance, _seed_int(self.seed, "balance", i))
            except BalanceError as exc:
                self.balance_reports[c] = {"skipped": str(exc)}
                continue
            self.data[c] = balanced
            self.balance_reports[c] = {"added": report.added, "removed": report.removed}

    def _profiles(self) -> dict[str, DeviceProfile]:
        dev = self.s.devices
        if dev.per_client is not None:
            return {
                c: DeviceProfile(p.compute_capacity, p.bandwidth, p.base_latency, p.dropout_prob)
                for c, p in zip(self.ids, dev.per_client)
            }
        rng = substream(self.seed, "devices")

        def draw(value):
            if isinstance(value, tuple):
                lo, hi = value
                return float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            return float(value)

        out = {}
        for c in self.ids:
            out[c] = DeviceProfile(draw(dev.compute_capacity), draw(dev.bandwidth), draw(dev.base_latency), draw(dev.dropout_prob))
        return out

    # ---------------------------------------------------------------- metrics

    def emit(self, event: str, subject: str = SERVER, **fields) -> MetricsRecord:
        extra = fields.pop("extra", {})
        extra = dict(extra)
        extra["lifecycle"] = self.lifecycle.state.value
        rec = MetricsRecord(
            round=self.round,
            virtual_time_ms=self.queue.now,
            event=event,
            subject=subject,
            global_loss=self.last_loss,
            global_accuracy=self.last_acc,
            aggregator=self.kind,
            extra=extra,
            **fields,
        )
        self.metrics.append(rec)
        return rec

    def _to(self, state: LifecycleState) -> None:
        self.lifecycle.to(state)

    # ------------------------------------------------------------ primitives

    def _select(self, r: int) -> tuple[list[str], list[str], list[str]]:
        for c in self.ids:
            self.registry.set_online(c, c not in self.inflight)
        selected = select_clients(self.registry, self.criteria, r, self.seed)
        dropped = [c for c in selected if sample_dropout(c, r, self.seed, self.profiles[c].dropout_prob)]
        for c in dropped:
            self.registry.set_online(c, False)
        participants = [c for c in selected if c not in dropped]
        return selected, participants, dropped

    def _start_model(self, cid: str) -> tuple[ParamVector, ParamVector | None, ParamVector]:
        """(training start point, proximal anchor, reference model the client received)."""
        received = self.global_model
        if self.clusters is not None:
            received = self.cluster_models[self.clusters.assignments[cid]]
        anchor = None
        start = received
        if self.plan.effective_lambda > 0 or self.plan.anchor_source != "none":
            cluster_model = received if self.clusters is not None else None
            anchor = self.plan.anchor(self.global_model, cluster_model)
            start = self.personal.get(cid, received)
        return start, anchor, received

    def _train(self, cid: str, start: ParamVector, anchor: ParamVector | None, perf_key: int) -> ParamVector:
        data = self.data[cid]
        seed = _seed_int(self.seed, "train", cid, self.local_steps[cid]) if self.s.training.shuffle else None
        new = local_train(start, data, self.cfg, anchor, seed=seed)
        self.local_steps[cid] += 1
        if self.plan.anchor_source != "none":
            self.personal[cid] = new
        loss = evaluate(new, data).loss
        rec = self.registry.get(cid)
        if not rec.perf_history or rec.perf_history[-1][0] < perf_key:
            self.registry.record_performance(cid, perf_key, loss)
        return new

    def _ops(self, cid: str) -> int:
        return training_ops(self.data[cid].n_samples, self.dim, self.cfg.local_epochs)

    def _encode(self, cid: str, origin: int, params: ParamVector, reference: ParamVector) -> _Upload:
        scheme = self.s.compression.scheme
        self.local_versions[cid] += 1
        n = self.data[cid].n_samples
        if scheme == "none":
            update = ModelUpdate(cid, origin, params, n, self.queue.now)
            return _Upload(update, params.digest(), self.model_bytes)
        delta = ParamVector(params.values - reference.values)
        c = compress(delta, scheme, k=self.s.topk_k(), bits=self.s.compression.bits)
        received = ParamVector(reference.values + decompress(c).values)
        update = ModelUpdate(cid, origin, received, n, self.queue.now)
        return _Upload(update, hashlib.sha256(c.payload).digest(), c.compressed_bytes)

    def _evaluate_global(self) -> EvalReport:
        if self.clusters is None:
            return evaluate(self.global_model, self.probe)
        total = sum(self.data[c].n_samples for c in self.ids)
        loss = acc = 0.0
        for c in self.ids:
            rep = evaluate(self.cluster_models[self.clusters.assignments[c]], self.data[c])
            w = rep.n_samples / total
            loss += w * rep.loss
            if rep.accuracy is not None:
                acc += w * rep.accuracy
        return EvalReport(loss, acc if self.task is Task.BINARY_LOGISTIC else None, total)

    def _record_version(self, uploads: list[_Upload], model: ParamVector, cluster: int | None = None):
        self.version += 1
        contributing = [(u.update.client_id, self.local_versions_at(u), u.digest) for u in uploads]
        model = ParamVector(model.values, self.version)
        digest = model.digest()
        cv = self.coversion.record(self.version, contributing, self.coversion.head, digest)
        self.models_by_digest[digest] = model
        if cluster is not None:
            self.cluster_digests[cluster] = digest
        return cv, model

    @staticmethod
    def local_versions_at(upload: _Upload) -> int:
        return upload.update.params.version

    def _stamp(self, up: _Upload, cid: str) -> _Upload:
        """Tag the uploaded params with the client's local version."""
        p = up.update.params
        stamped = ParamVector(p.values, self.local_versions[cid])
        u = up.update
        return _Upload(ModelUpdate(u.client_id, u.origin_round, stamped, u.n_samples, u.arrival_time), up.digest, up.n_bytes, up.masked)

    def _drain(self, handler: Callable[[SimEvent], None], stop: Callable[[], bool] | None = None) -> None:
        while self.queue:
            if stop is not None and stop():
                return
            handler(self.queue.pop())

    def _evaluate_and_emit(self, participants: int, extra: dict | None = None) -> EvalReport:
        self._to(S.EVALUATED)
        rep = self._evaluate_global()
        self.last_loss = rep.loss
        self.last_acc = rep.accuracy
        extra = dict(extra or {})
        extra["global_version"] = self.version
        if self.personal:
            extra["personal_loss"] = float(
                np.mean([evaluate(self.personal[c], self.data[c]).loss for c in sorted(self.personal)])
            )
        self.emit("evaluate", participants=participants, extra=extra)
        return rep

    # -------------------------------------------------------- sync (fedavg / secure)

    def _round_sync(self, r: int) -> EvalReport | None:
        selected, participants, dropped = self._select(r)
        if not participants:
            self.emit("round_skipped", participants=0, dropouts=len(dropped), extra={"selected": len(selected)})
            log.info("round %d skipped: no eligible client", r)
            return None
        self._to(S.BROADCAST)
        self.emit(
            "broadcast",
            participants=len(participants),
            dropouts=len(dropped),
            extra={"selected": len(selected), "clients": participants},
        )
        secure = self.kind == "secure"
        pair_seeds = pairwise_seeds(participants, _seed_int(self.seed, "secagg", r)) if secure else None
        uploads: dict[str, _Upload] = {}
        pending = set(participants)
        reference: dict[str, ParamVector] = {}
        t0 = self.queue.now
        for c in participants:
            self.queue.schedule(t0 + transfer_time(self.model_bytes, self.profiles[c]), "broadcast_done", c)
        prev_global = self.global_model
        report: list[EvalReport] = []

        def handle(ev: SimEvent) -> None:
            c = ev.subject
            if ev.kind == "broadcast_done":
                self._to(S.LOCAL_TRAINING)
                self.emit("broadcast_done", c, bytes_down=self.model_bytes)
                self.queue.schedule(ev.time + compute_time(self._ops(c), self.profiles[c]), "train_done", c)
            elif ev.kind == "train_done":
                start, anchor, received = self._start_model(c)
                reference[c] = received
                new = self._train(c, start, anchor, r)
                if secure:
                    up = self._secure_upload(c, r, new, received, participants, pair_seeds)
                else:
                    up = self._stamp(self._encode(c, r, new, received), c)
                self.emit("train_done", c, extra={"local_version": self.local_versions[c]})
                self.queue.schedule(ev.time + transfer_time(up.n_bytes, self.profiles[c]), "upload_done", c, up)
            elif ev.kind == "upload_done":
                self._to(S.UPDATE_SUBMITTED)
                up: _Upload = ev.payload
                uploads[c] = up
                pending.discard(c)
                self.emit("upload_done", c, bytes_up=up.n_bytes, extra={"local_version": self.local_versions_at(up)})
                if not pending:
                    self.queue.schedule(ev.time, "aggregate", SERVER)
            elif ev.kind == "aggregate":
                self._aggregate_sync(r, participants, uploads, secure, prev_global)
                self.queue.schedule(ev.time, "evaluate", SERVER)
            elif ev.kind == "evaluate":
                report.append(self._evaluate_and_emit(len(participants)))
                if self.s.incentive.enabled:
                    self._rewards(r, uploads, prev_global)

        self._drain(handle)
        conserved = len(uploads) + len(dropped)
        if conserved != len(selected):
            raise InvariantViolation(f"round {r}: selected {len(selected)} != aggregated {len(uploads)} + dropped {len(dropped)}")
        return report[0] if report else None

    def _secure_upload(self, c, r, new: ParamVector, received: ParamVector, participants, pair_seeds) -> _Upload:
        sec = self.s.aggregator.secure
        values = new.values
        if sec.clip_norm is not None:
            delta = dp_noise(
                ParamVector(values - received.values), sec.clip_norm, sec.dp_sigma, _seed_int(self.seed, "dp", c, r)
            )
            values = received.values + delta.values
        self.local_versions[c] += 1
        n = self.data[c].n_samples
        params = ParamVector(values, self.local_versions[c])
        update = ModelUpdate(c, r, params, n, self.queue.now)
        masked = mask(update, participants, pair_seeds, values=n * values)
        digest = hashlib.sha256(masked.to_bytes()).digest()
        return _Upload(update, digest, masked.masked.size * 8, masked)

    def _aggregate_sync(self, r, participants, uploads: dict[str, _Upload], secure: bool, prev_global) -> None:
        order = [uploads[c] for c in participants if c in uploads]
        # submission order for lineage
        order.sort(key=lambda u: (u.update.arrival_time, u.update.client_id))
        if self.clusters is not None:
            for k in range(self.clusters.n_clusters):
                group = [u for u in order if self.clusters.assignments[u.update.client_id] == k]
                if not group:
                    continue
                model = fedavg([u.update for u in group])
                _, model = self._record_version(group, model, cluster=k)
                self.cluster_models[k] = model
            self.global_model = fedavg([ModelUpdate(f"k{k}", 0, m, max(1, len(self.clusters.members(k)))) for k, m in sorted(self.cluster_models.items())])
            self.global_model = ParamVector(self.global_model.values, self.version)
            self._to(S.AGGREGATED)
            self.emit("aggregate", participants=len(order), extra={"clusters": self.clusters.n_clusters})
            return
        if secure:
            total = secure_sum([u.masked for u in order])
            n_total = sum(u.update.n_samples for u in order)
            model = ParamVector(total.values / n_total)
        else:
            model = fedavg([u.update for u in order])
        _, self.global_model = self._record_version(order, model)
        self._to(S.AGGREGATED)
        self.emit("aggregate", participants=len(order), extra={"global_version": self.version})

    def _rewards(self, r: int, uploads: dict[str, _Upload], prev_global: ParamVector) -> None:
        inc = self.s.incentive
        ids = sorted(uploads)
        updates = {c: uploads[c].update for c in ids}

        def probe_loss(model: ParamVector) -> float:
            return evaluate(model, self.probe).loss

        full = probe_loss(fedavg(list(updates.values())))
        round_data = {}
        for c in ids:
            loss_without = full
            if inc.scheme == "loss_improvement":
                rest = [updates[o] for o in ids if o != c]
                loss_without = probe_loss(fedavg(rest)) if rest else probe_loss(prev_global)
            round_data[c] = ContributionInput(updates[c].n_samples, loss_without, full)
        evaluator = None
        if inc.scheme == "shapley":
            base = probe_loss(prev_global)

            def evaluator(coalition: frozenset) -> float:
                if not coalition:
                    return -base
                return -probe_loss(fedavg([updates[o] for o in sorted(coalition)]))

        scores = score_contribution(inc.scheme, round_data, evaluator)
        payable = {c: max(0.0, v) for c, v in scores.items()}
        entries = distribute_rewards(payable, inc.budget, round=r, scheme=inc.scheme, log=self.log)
        for e in entries:
            self.emit(
                "reward",
                e.client_id,
                extra={"reward": e.reward, "score": scores[e.client_id], "scheme": e.scheme},
            )

    # ------------------------------------------------------------------ async

    def _round_async(self, r: int) -> EvalReport | None:
        cfg = self.s.aggregator.async_
        earlier = set(self.inflight)
        selected, participants, dropped = self._select(r)
        if not participants and not earlier:
            self.emit("round_skipped", participants=0, dropouts=len(dropped), extra={"selected": len(selected)})
            return None
        self._to(S.BROADCAST)
        self.emit(
            "broadcast",
            participants=len(participants),
            dropouts=len(dropped),
            extra={"selected": len(selected), "clients": participants, "in_flight": sorted(earlier)},
        )
        base = self.global_model
        t0 = self.queue.now
        for c in participants:
            self.inflight.add(c)
            self.queue.schedule(t0 + transfer_time(self.model_bytes, self.profiles[c]), "broadcast_done", c, (r, base))
        wanted = cfg.min_updates if cfg.min_updates is not None else len(participants)
        wanted = max(1, min(wanted, len(participants) + len(earlier)))
        applied: list[_Upload] = []
        closed: list[EvalReport] = []
        state = {"closed": False}
        if cfg.round_deadline_ms is not None:
            self.queue.schedule(t0 + cfg.round_deadline_ms, "evaluate", SERVER, ("deadline", r))

        def close(reason: str) -> None:
            state["closed"] = True
            fresh = sum(1 for u in applied if u.update.origin_round == r)
            deferred = sum(1 for c in participants if c in self.inflight)
            if fresh + deferred + len(dropped) != len(selected):
                raise InvariantViolation(f"round {r}: participant conservation broken")
            extra = {"reason": reason, "aggregated": fresh, "deferred": deferred, "selected": len(selected)}
            if applied:
                _, self.global_model = self._record_version(applied, self.global_model)
                closed.append(self._evaluate_and_emit(len(applied), extra))
            else:
                self.emit("evaluate", participants=0, extra=extra)

        def handle(ev: SimEvent) -> None:
            c = ev.subject
            if ev.kind == "broadcast_done":
                origin, model = ev.payload
                if origin == r and self.lifecycle.state is S.BROADCAST:
                    self._to(S.LOCAL_TRAINING)
                self.emit("broadcast_done", c, bytes_down=self.model_bytes, extra={"origin_round": origin})
                self.queue.schedule(ev.time + compute_time(self._ops(c), self.profiles[c]), "train_done", c, (origin, model))
            elif ev.kind == "train_done":
                origin, model = ev.payload
                start = self.personal.get(c, model) if self.plan.anchor_source != "none" else model
                anchor = self.plan.anchor(model) if self.plan.anchor_source != "none" else None
                new = self._train(c, start, anchor, origin)
                up = self._stamp(self._encode(c, origin, new, model), c)
                self.emit("train_done", c, extra={"origin_round": origin})
                self.queue.schedule(ev.time + transfer_time(up.n_bytes, self.profiles[c]), "upload_done", c, up)
            elif ev.kind == "upload_done":
                batch = [ev]
                while self.queue and self.queue._heap[0].time == ev.time and self.queue._heap[0].kind == "upload_done":
                    batch.append(self.queue.pop())
                for arrival in sorted(batch, key=lambda e: e.subject):
                    self._apply_async(arrival, r, applied, cfg.mix)
                if len(applied) >= wanted and not state["closed"]:
                    self.queue.schedule(ev.time, "evaluate", SERVER, ("quorum", r))
            elif ev.kind == "evaluate":
                reason, rnd = ev.payload
                if rnd == r and not state["closed"]:
                    close(reason)

        self._drain(handle, stop=lambda: state["closed"])
        if not state["closed"]:
            close("idle")
        return closed[0] if closed else None

    def _apply_async(self, ev: SimEvent, r: int, applied: list, mix: float) -> None:
        c = ev.subject
        up: _Upload = ev.payload
        self.inflight.discard(c)
        if self.lifecycle.state in (S.BROADCAST, S.LOCAL_TRAINING, S.AGGREGATED):
            self._to(S.UPDATE_SUBMITTED)
        staleness = r - up.update.origin_round
        alpha = mixing_weight(self.policy, staleness, mix)
        self.global_model = async_aggregate(self.global_model, up.update, r, self.policy, mix)
        applied.append(up)
        self.emit("upload_done", c, bytes_up=up.n_bytes, extra={"origin_round": up.update.origin_round})
        self._to(S.AGGREGATED)
        self.emit("aggregate", c, participants=1, extra={"staleness": staleness, "alpha": alpha})

    # ----------------------------------------------------------------- gossip

    def _round_gossip(self, r: int) -> EvalReport | None:
        g = self.s.aggregator.gossip
        for c in self.ids:
            self.registry.set_online(c, True)
        dropped = [c for c in self.ids if sample_dropout(c, r, self.seed, self.profiles[c].dropout_prob)]
        for c in dropped:
            self.registry.set_online(c, False)
        participants = [c for c in self.ids if c not in dropped]
        if not participants:
            self.emit("round_skipped", dropouts=len(dropped))
            return None
        first = not self.gossip_states
        t0 = self.queue.now
        if first:
            self.gossip_states = {c: self.global_model for c in self.ids}
            self._to(S.BROADCAST)
            self.emit("broadcast", participants=len(participants), dropouts=len(dropped), extra={"clients": participants})
            for c in participants:
                self.queue.schedule(t0 + transfer_time(self.model_bytes, self.profiles[c]), "broadcast_done", c)
        else:
            self.emit("round_start", participants=len(participants), dropouts=len(dropped), extra={"clients": participants})
            for c in participants:
                self.queue.schedule(t0 + compute_time(self._ops(c), self.profiles[c]), "train_done", c)
        pending = set(participants)
        trained: dict[str, _Upload] = {}
        topology = build_topology(self.ids, g.topology, degree=g.degree, seed=self.seed)
        sub = {c: {p for p in topology[c] if p in pending} for c in participants}
        reports: list[EvalReport] = []

        def handle(ev: SimEvent) -> None:
            c = ev.subject
            if ev.kind == "broadcast_done":
                self.emit("broadcast_done", c, bytes_down=self.model_bytes)
                self.queue.schedule(ev.time + compute_time(self._ops(c), self.profiles[c]), "train_done", c)
            elif ev.kind == "train_done":
                self._to(S.LOCAL_TRAINING)
                start = self.gossip_states[c]
                anchor = self.plan.anchor(start) if self.plan.anchor_source != "none" else None
                new = self._train(c, self.personal.get(c, start) if anchor is not None else start, anchor, r)
                self.local_versions[c] += 1
                new = ParamVector(new.values, self.local_versions[c])
                self.gossip_states[c] = new
                trained[c] = _Upload(ModelUpdate(c, r, new, self.data[c].n_samples), new.digest(), 0)
                self.emit("train_done", c, extra={"local_version": self.local_versions[c]})
                pending.discard(c)
                if not pending:
                    self.queue.schedule(ev.time + self._gossip_duration(participants, sub), "gossip_tick", SERVER)
            elif ev.kind == "gossip_tick":
                self._to(S.UPDATE_SUBMITTED)
                self._gossip_exchange(r, participants, sub, trained)
                self.queue.schedule(ev.time, "evaluate", SERVER)
            elif ev.kind == "evaluate":
                reports.append(self._evaluate_and_emit(len(participants)))

        self._drain(handle)
        return reports[0] if reports else None

    def _gossip_exchange_bytes(self, participants, sub) -> int:
        g = self.s.aggregator.gossip
        if g.mode == "leader":
            return 2 * (len(participants) - 1) * self.model_bytes
        total = 0
        for lo, hi in segment_bounds(self.dim, g.segments):
            for c in participants:
                total += min(g.fanout, len(sub[c])) * 2 * 8 * (hi - lo)
        return total

    def _gossip_duration(self, participants, sub) -> float:
        g = self.s.aggregator.gossip
        per_client = self._gossip_exchange_bytes(participants, sub) / max(len(participants), 1)
        return max(transfer_time(per_client, self.profiles[c]) for c in participants)

    def _gossip_exchange(self, r, participants, sub, trained) -> None:
        g = self.s.aggregator.gossip
        states = {c: self.gossip_states[c] for c in participants}
        before = np.mean([s.values for s in states.values()], axis=0)
        if g.mode == "leader":
            leader, new = leader_round(states, r, self.seed)
            extra = {"leader": leader}
        else:
            new = gossip_round(states, sub, g.fanout, g.segments, self.seed, r)
            extra = {}
        after = np.mean([s.values for s in new.values()], axis=0)
        scale = max(1.0, float(np.abs(before).max()))
        drift = float(np.abs(after - before).max())
        if drift > 1e-9 * scale:
            raise InvariantViolation(f"gossip round {r} moved the network mean by {drift}")
        self.gossip_states.update(new)
        n_bytes = self._gossip_exchange_bytes(participants, sub)
        self.global_model = ParamVector(np.mean([self.gossip_states[c].values for c in self.ids], axis=0))
        uploads = [trained[c] for c in participants]
        _, self.global_model = self._record_version(uploads, self.global_model)
        self._to(S.AGGREGATED)
        extra.update({"mean_drift": drift, "global_version": self.version})
        self.emit("gossip_tick", participants=len(participants), bytes_up=n_bytes, extra=extra)

    # ----------------------------------------------------------- hierarchical

    def _round_hierarchical(self, r: int) -> EvalReport | None:
        h = self.s.aggregator.hierarchical
        failed = {f.edge for f in h.failures if f.from_round <= r <= f.to_round}
        groups = self.s.edge_groups()
        selected, participants, dropped = self._select(r)
        lost = [c for c in participants if any(c in groups[e] for e in failed)]
        participants = [c for c in participants if c not in lost]
        if not participants:
            self.emit("round_skipped", dropouts=len(dropped) + len(lost), extra={"failed_edges": sorted(failed)})
            return None
        active_groups = {e: frozenset(m) & set(participants) for e, m in groups.items()}
        active_groups = {e: m for e, m in active_groups.items() if m}
        agg = HierarchicalAggregator(HierarchicalSchedule(h.k1, h.k2, active_groups))
        self._to(S.BROADCAST)
        self.emit(
            "broadcast",
            participants=len(participants),
            dropouts=len(dropped) + len(lost),
            extra={"clients": participants, "failed_edges": sorted(failed)},
        )
        models = {}
        t = self.queue.now
        for c in participants:
            self.queue.schedule(t + transfer_time(self.model_bytes, self.profiles[c]), "broadcast_done", c)
        self._drain(lambda ev: self._hier_broadcast_done(ev, models))
        report: list[EvalReport] = []
        period = h.k1 * h.k2
        for step in range(1, period + 1):
            self._hier_local_step(r, step, participants, models, agg, active_groups, report)
        return report[0] if report else None

    def _hier_broadcast_done(self, ev: SimEvent, models: dict) -> None:
        self.emit("broadcast_done", ev.subject, bytes_down=self.model_bytes)
        models[ev.subject] = self._start_model(ev.subject)[0]

    def _hier_local_step(self, r, step, participants, models, agg, groups, report) -> None:
        h = self.s.aggregator.hierarchical
        t = self.queue.now
        updates: dict[str, ModelUpdate] = {}
        uploads: dict[str, _Upload] = {}
        for c in participants:
            self.queue.schedule(t + compute_time(self._ops(c), self.profiles[c]), "train_done", c)
        self.hier_local_count += 1
        edge_round = self.hier_local_count % h.k1 == 0

        def on_train(ev: SimEvent) -> None:
            c = ev.subject
            self._to(S.LOCAL_TRAINING)
            anchor = self.plan.anchor(self.global_model) if self.plan.anchor_source != "none" else None
            new = self._train(c, models[c], anchor, self.hier_local_count)
            up = self._stamp(self._encode(c, r, new, models[c]), c)
            models[c] = up.update.params
            updates[c] = up.update
            uploads[c] = up
            self.emit("train_done", c, extra={"local_update_count": self.hier_local_count})
            if edge_round:
                self.queue.schedule(ev.time + transfer_time(up.n_bytes, self.profiles[c]), "upload_done", c, up)

        def on_upload(ev: SimEvent) -> None:
            self._to(S.UPDATE_SUBMITTED)
            self.emit("upload_done", ev.subject, bytes_up=ev.payload.n_bytes, extra={"local_update_count": self.hier_local_count})

        self._drain(lambda ev: on_train(ev) if ev.kind == "train_done" else on_upload(ev))
        edges, central = agg.step([updates[c] for c in participants])
        if edges is None:
            return
        for e in sorted(edges):
            self.emit(
                "edge_aggregate",
                e,
                participants=len(groups[e]),
                extra={"local_update_count": self.hier_local_count, "edge_aggregation": agg.edge_aggregations},
            )
        if central is None:
            t = self.queue.now
            for e, em in sorted(edges.items()):
                for c in sorted(groups[e]):
                    models[c] = em.params
                    self.queue.schedule(t + transfer_time(self.model_bytes, self.profiles[c]), "broadcast_done", c)
            self._drain(lambda ev: self.emit("broadcast_done", ev.subject, bytes_down=self.model_bytes, extra={"from": "edge"}))
            # clients resume training on the edge model
            self._to(S.LOCAL_TRAINING) if self.lifecycle.state == S.UPDATE_SUBMITTED else None
            return
        up_time = max(h.edge_latency + self.model_bytes / h.edge_bandwidth for _ in edges)
        self.queue.schedule(self.queue.now + up_time, "aggregate", SERVER)
        edge_bytes = len(edges) * self.model_bytes

        def on_aggregate(ev: SimEvent) -> None:
            if ev.kind == "aggregate":
                _, self.global_model = self._record_version([uploads[c] for c in participants], central)
                self._to(S.AGGREGATED)
                self.emit(
                    "aggregate",
                    participants=len(participants),
                    extra={
                        "local_update_count": self.hier_local_count,
                        "global_version": self.version,
                        "edge_bytes_up": edge_bytes,
                    },
                )
                self.queue.schedule(ev.time, "evaluate", SERVER)
            else:
                report.append(self._evaluate_and_emit(len(participants), {"local_update_count": self.hier_local_count}))

        self._drain(on_aggregate)

    # ---------------------------------------------------------------- clustering

    def _cluster(self) -> None:
        c_cfg = self.s.clustering
        deltas = {}
        for i, c in enumerate(self.ids):
            trial = local_train(self.global_model, self.data[c], self.cfg, seed=_seed_int(self.seed, "cluster-probe", i))
            deltas[c] = ParamVector(trial.values - self.global_model.values)
        self.clusters = cluster_clients(deltas, c_cfg.n_clusters, c_cfg.metric)
        self.cluster_models = {k: self.global_model for k in range(c_cfg.n_clusters)}
        self.emit(
            "cluster",
            extra={"assignments": dict(sorted(self.clusters.assignments.items())), "metric": c_cfg.metric},
        )

    # ---------------------------------------------------------------- training task

    def _round(self, r: int) -> EvalReport | None:
        if self.kind in ("fedavg", "secure"):
            if self.s.clustering.enabled and self.clusters is None and r > self.s.clustering.after_rounds:
                self._cluster()
            return self._round_sync(r)
        if self.kind == "async":
            return self._round_async(r)
        if self.kind == "gossip":
            return self._round_gossip(r)
        return self._round_hierarchical(r)

    def _train_task(self) -> None:
        conv = self.s.convergence
        streak = 0
        prev: float | None = None
        criterion = "budget"
        for local_round in range(1, self.s.rounds + 1):
            self.round += 1
            rep = self._round(self.round)
            if rep is None:
                continue
            if prev is not None and conv.enabled:
                improvement = (prev - rep.loss) / max(abs(prev), 1e-12)
                streak = streak + 1 if improvement < conv.tolerance else 0
                if streak >= conv.window:
                    criterion = "tolerance"
                    if self.convergence_round is None:
                        self.convergence_round = self.round
                    break
            prev = rep.loss
        self.queue._heap.clear()
        self.inflight.clear()
        if self.lifecycle.state != S.EVALUATED:
            return
        self._to(S.CONVERGED)
        self.emit("converged", extra={"criterion": criterion})
        self.queue.schedule(self.queue.now, "deploy", SERVER)
        self._drain(lambda ev: self._deploy())

    def _deploy(self) -> None:
        if self.clusters is not None:
            assignment = self.clusters
            per_cluster = dict(self.cluster_digests)
            for k in range(assignment.n_clusters):
                if k not in per_cluster:
                    # a cluster that never trained after the split falls back to the global model
                    per_cluster[k] = self._ensure_global_digest()
        else:
            assignment = ClusterAssignment({c: 0 for c in self.ids}, 1, "cosine")
            per_cluster = {0: self._ensure_global_digest()}
        self.deployment = select_deployment(self.coversion, assignment, per_cluster)
        self._to(S.DEPLOYED)
        digests = sorted({d.hex()[:16] for d in self.deployment.assignments.values()})
        self.emit("deploy", participants=len(self.deployment.assignments), extra={"models": digests})

    def _ensure_global_digest(self) -> bytes:
        digest = self.global_model.digest()
        if not self.coversion.has_model(digest):
            _, self.global_model = self._record_version([], self.global_model)
            digest = self.global_model.digest()
        return digest

    # ---------------------------------------------------------------- monitoring

    def _deployed_model(self, cid: str) -> ParamVector:
        return self.models_by_digest[self.deployment.assignments[cid]]

    def _apply_drift(self) -> None:
        for c in self.ids:
            d = self.data[c]
            if d.task is Task.BINARY_LOGISTIC:
                self.data[c] = Dataset(d.features, 1 - d.labels, d.task, d.strata)
            else:
                self.data[c] = Dataset(d.features, -d.labels, d.task, d.strata)
        p = self.probe
        flipped = 1 - p.labels if p.task is Task.BINARY_LOGISTIC else -p.labels
        self.probe = Dataset(p.features, flipped, p.task, p.strata)
        self.drifted = True

    def _monitor(self) -> bool:
        """Run the monitoring window; True when a replacement task was started."""
        t = self.s.trigger
        self._to(S.MONITORED)
        state = self.trigger_state or TriggerState(t.threshold, t.patience, t.quorum_fraction, metric=t.metric)
        monitored = self.ids[: t.n_monitored]
        for m in range(1, t.monitor_rounds + 1):
            self.queue.schedule(self.queue.now + t.monitor_interval_ms, "trigger_check", SERVER)
            self.queue.pop()
            if t.drift_after is not None and m > t.drift_after and not self.drifted:
                self._apply_drift()
                self.emit("drift", extra={"kind": "label_flip" if self.task is Task.BINARY_LOGISTIC else "response_flip"})
            reports = {c: evaluate(self._deployed_model(c), self.data[c]) for c in monitored}
            state = check_replacement_trigger(state, reports, len(monitored))
            degraded = sum(
                (r.accuracy < t.threshold) if t.metric == "accuracy" else (r.loss > t.threshold) for r in reports.values()
            )
            self.trigger_state = state
            self.emit(
                "trigger_check",
                participants=len(monitored),
                extra={
                    "monitor_round": m,
                    "degraded": int(degraded),
                    "consecutive_breaches": state.consecutive_breaches,
                    "fired": state.fired,
                },
            )
            if state.fired and self.replacements < t.max_replacements:
                self.replacements += 1
                self._to(S.REPLACED)
                self.emit("replaced", extra={"warm_start": t.warm_start, "replacement": self.replacements})
                self.trigger_state = state.reset()
                return True
        return False

    # -------------------------------------------------------------------- run

    def run(self) -> RunResult:
        self.emit("task_created", participants=len(self.ids), extra={"balance": self.balance_reports} if self.balance_reports else {})
        if self.s.rounds == 0:
            self._to(S.BROADCAST)
            self.emit("broadcast", participants=len(self.ids), bytes_down=self.model_bytes * len(self.ids))
            return self._result()
        while True:
            self._train_task()
            if self.lifecycle.state != S.DEPLOYED or not self.s.trigger.enabled:
                break
            if not self._monitor():
                break
            self._to(S.TASK_CREATED)
            if not self.s.trigger.warm_start:
                self.global_model = ParamVector(self.initial_model.values, self.version)
                self.personal.clear()
                if self.clusters is not None:
                    self.cluster_models = {k: self.global_model for k in self.cluster_models}
            self.gossip_states = {}
            self.emit("task_created", participants=len(self.ids), extra={"replacement": self.replacements})
        return self._result()

    def _result(self) -> RunResult:
        records = [r.to_dict() for r in self.metrics]
        summary = summarize(records)
        summary.update(
            {
                "scenario": self.s.name,
                "seed": self.seed,
                "aggregator": self.kind,
                "task": self.task.value,
                "global_records": self.coversion.global_record_count,
                "local_entries": self.coversion.local_entry_count,
                "chain_records": len(self.log),
                "chain_head": self.log.head.hex(),
                "replacements": self.replacements,
                "lifecycle_final": self.lifecycle.state.value,
            }
        )
        return RunResult(
            scenario=self.s,
            metrics=self.metrics,
            coversion=self.coversion,
            global_model=self.global_model,
            summary=summary,
            registry=self.registry,
            client_data=self.data,
            probe=self.probe,
            lifecycle=list(self.lifecycle.history),
            cluster_assignment=self.clusters,
            cluster_models=dict(self.cluster_models),
            deployment=self.deployment,
            models_by_digest=dict(self.models_by_digest),
            trigger=self.trigger_state,
        )


def run_scenario(scenario: Scenario, **kwargs) -> RunResult:
    return Simulator(scenario, **kwargs).run()
