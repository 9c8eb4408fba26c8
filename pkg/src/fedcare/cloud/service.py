"""The cloud coordinator: edge admission, federated-learning rounds,
the versioned global-model registry, encrypted-data aggregation and training,
the encrypted-inference queue, and global surrogate coordination.

Every public operation is a ``handle_*`` method taking (edge_id, token,
payload-dict) so the in-process bus and the HTTP server share one code path.
The cloud never initiates connections: directives for waiting edges are parked
in per-edge task queues and delivered in responses to ``poll_tasks``.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass, field

from .. import canonical
from ..domain import ModelKey
from ..errors import (
    AuthError,
    DuplicateEdge,
    NotFound,
    ProtocolError,
    SchemaMismatch,
    StaleRound,
    ValidationError,
)
from ..crypto import EncryptedDataset, EncryptedLinearModel, predict_encrypted, train_encrypted_linear
from ..ml import LinearModel, TrainingConfig, average_models, deserialize_model
from .storage import DurableLog

import numpy as np


@dataclass
class CloudConfig:
    admission_secret: str
    rounds: int = 5
    round_deadline: int = 30
    surrogate_deadline: int = 30
    weighted_averaging: bool = True
    he_training: TrainingConfig = field(
        default_factory=lambda: TrainingConfig(learning_rate=0.02, epochs=1200,
                                               ridge_lambda=1e-4))
    data_dir: str | None = None


@dataclass
class EdgeRegistration:
    edge_id: str
    bearer_token: str
    status: str  # active | departed
    joined_at: int
    departed_at: int | None = None

    def to_json(self) -> dict:
        return {"edge_id": self.edge_id, "bearer_token": self.bearer_token,
                "status": self.status, "joined_at": self.joined_at,
                "departed_at": self.departed_at}


@dataclass
class GlobalModelRecord:
    model_key: str
    version: int
    model_bytes: bytes
    contributing_edges: set[str]
    history: list[tuple[str, str, int]]

    def to_json(self) -> dict:
        return {
            "model_key": self.model_key,
            "version": self.version,
            "model": canonical.loads(self.model_bytes),
            "contributing_edges": sorted(self.contributing_edges),
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GlobalModelRecord":
        return cls(
            model_key=obj["model_key"],
            version=int(obj["version"]),
            model_bytes=canonical.dump_bytes(obj["model"]),
            contributing_edges=set(obj["contributing_edges"]),
            history=[tuple(h) for h in obj["history"]],
        )


@dataclass
class FederationState:
    mode: str = "idle"  # idle | incremental | semi_concurrent
    round: int = 0
    round_deadline: int | None = None
    pending_updates: dict[str, tuple[dict, int]] = field(default_factory=dict)
    declared_trainers: set[str] = field(default_factory=set)
    session_edges: set[str] = field(default_factory=set)
    session_contributors: set[str] = field(default_factory=set)
    round_base: dict | None = None

    def reset(self) -> None:
        self.mode = "idle"
        self.round = 0
        self.round_deadline = None
        self.pending_updates.clear()
        self.declared_trainers.clear()
        self.session_edges.clear()
        self.session_contributors.clear()
        self.round_base = None


@dataclass
class InferenceTicket:
    request_id: str
    edge_id: str
    model_key: str
    features: list
    status: str  # queued | awaiting_model | done
    encrypted_result: list | None = None


@dataclass
class SurrogateSession:
    kind: str
    expected: set[str]
    submissions: dict[str, dict] = field(default_factory=dict)
    deadline: int | None = None


def _agg_key(model_key: ModelKey) -> str:
    return f"{model_key.cancer_type}|{model_key.target_variable}"


def _surrogate_registry_key(key: str, kind: str) -> str:
    return f"{key}|surrogate:{kind}"


class CloudService:
    def __init__(self, config: CloudConfig, clock) -> None:
        self.config = config
        self.clock = clock
        self._lock = threading.RLock()
        self.edges: dict[str, EdgeRegistration] = {}
        self.tokens: dict[str, str] = {}
        self.registry: dict[str, GlobalModelRecord] = {}
        self.federation: dict[str, FederationState] = {}
        self.he_aggregates: dict[str, EncryptedDataset] = {}
        self.he_stale: set[str] = set()
        self.he_models: dict[str, tuple[dict, int]] = {}
        self.he_failures: list[str] = []
        self.tickets: dict[str, InferenceTicket] = {}
        self.tasks: dict[str, list[dict]] = {}
        self.surrogate_sessions: dict[str, SurrogateSession] = {}
        self.round_log: list[dict] = []  # diagnostics: completed-round averages
        self._join_counter = 0
        self._ticket_counter = 0
        self.store = DurableLog(config.data_dir)
        self._recover()

    # -- durability -------------------------------------------------------

    def _recover(self) -> None:
        snapshot = self.store.load_snapshot()
        if snapshot:
            self._load_state(snapshot)
        for event in self.store.replay():
            self._apply_event(event)

    def _load_state(self, obj: dict) -> None:
        for e in obj.get("edges", []):
            reg = EdgeRegistration(**e)
            self.edges[reg.edge_id] = reg
            if reg.status == "active":
                self.tokens[reg.bearer_token] = reg.edge_id
        for rec in obj.get("registry", []):
            record = GlobalModelRecord.from_json(rec)
            self.registry[record.model_key] = record
        for key, agg in obj.get("he_aggregates", {}).items():
            self.he_aggregates[key] = EncryptedDataset.from_json(agg)
        for key, (model, version) in obj.get("he_models", {}).items():
            self.he_models[key] = (model, int(version))
        self.he_stale = set(obj.get("he_stale", []))
        self._join_counter = obj.get("join_counter", len(self.edges))

    def snapshot(self) -> dict:
        with self._lock:
            state = {
                "edges": [e.to_json() for e in self.edges.values()],
                "registry": [r.to_json() for r in self.registry.values()],
                "he_aggregates": {k: v.to_json() for k, v in self.he_aggregates.items()},
                "he_models": {k: [m, v] for k, (m, v) in self.he_models.items()},
                "he_stale": sorted(self.he_stale),
                "join_counter": self._join_counter,
            }
            self.store.compact(state)
            return state

    def _apply_event(self, event: dict) -> None:
        kind = event["t"]
        if kind == "edge_registered":
            reg = EdgeRegistration(**event["registration"])
            old = self.edges.get(reg.edge_id)
            if old is not None:
                self.tokens.pop(old.bearer_token, None)
            self.edges[reg.edge_id] = reg
            self.tokens[reg.bearer_token] = reg.edge_id
            self._join_counter = max(self._join_counter, event.get("join_counter", 0))
        elif kind == "edge_departed":
            reg = self.edges.get(event["edge_id"])
            if reg is not None:
                reg.status = "departed"
                reg.departed_at = event["at"]
                self.tokens.pop(reg.bearer_token, None)
        elif kind == "global_stored":
            record = GlobalModelRecord.from_json(event["record"])
            self.registry[record.model_key] = record
        elif kind == "he_ingested":
            dataset = EncryptedDataset.from_json(event["dataset"])
            key = f"{dataset.cancer_type}|{dataset.target_variable}"
            existing = self.he_aggregates.get(key)
            if existing is not None:
                dataset = self._merge(existing, dataset)
            self.he_aggregates[key] = dataset
            self.he_stale.add(key)
        elif kind == "he_model_stored":
            self.he_models[event["agg_key"]] = (event["model"], int(event["version"]))
            self.he_stale.discard(event["agg_key"])

    @staticmethod
    def _merge(a: EncryptedDataset, b: EncryptedDataset) -> EncryptedDataset:
        from ..crypto import merge_encrypted_datasets
        return merge_encrypted_datasets(a, b)

    # -- auth --------------------------------------------------------------

    def _auth(self, edge_id: str, token: str | None) -> EdgeRegistration:
        reg = self.edges.get(edge_id)
        if reg is None or reg.status != "active":
            raise AuthError(f"edge {edge_id!r} is not an active participant")
        if token != reg.bearer_token:
            raise AuthError("bearer token mismatch")
        return reg

    def resolve_token(self, token: str) -> str:
        with self._lock:
            edge_id = self.tokens.get(token)
            if edge_id is None:
                raise AuthError("unknown bearer token")
            return edge_id

    def _task_queue(self, edge_id: str) -> list[dict]:
        return self.tasks.setdefault(edge_id, [])

    # -- gatekeeper ---------------------------------------------------------

    def handle_register_edge(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            if payload.get("admission_secret") != self.config.admission_secret:
                raise AuthError("admission secret rejected")
            eid = payload["edge_id"]
            existing = self.edges.get(eid)
            if existing is not None and existing.status == "active":
                raise DuplicateEdge(f"edge {eid!r} already registered")
            self._join_counter += 1
            bearer = hashlib.sha256(
                f"{self.config.admission_secret}|{eid}|{self._join_counter}".encode()
            ).hexdigest()
            reg = EdgeRegistration(edge_id=eid, bearer_token=bearer, status="active",
                                   joined_at=self.clock.now())
            if existing is not None:
                self.tokens.pop(existing.bearer_token, None)
            self.edges[eid] = reg
            self.tokens[bearer] = eid
            self.store.append({"t": "edge_registered", "registration": reg.to_json(),
                               "join_counter": self._join_counter})
            return {"edge_id": eid, "bearer_token": bearer, "status": "active"}

    def handle_deregister_edge(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            reg = self._auth(edge_id, token)
            reg.status = "departed"
            reg.departed_at = self.clock.now()
            self.tokens.pop(reg.bearer_token, None)
            self.tasks.pop(edge_id, None)
            self.store.append({"t": "edge_departed", "edge_id": edge_id,
                               "at": reg.departed_at})
            return {"edge_id": edge_id, "status": "departed"}

    def active_edges(self) -> list[str]:
        return sorted(e for e, r in self.edges.items() if r.status == "active")

    # -- federated learning coordinator -------------------------------------

    def handle_declare_training(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            self.tick()
            key = ModelKey.parse(payload["model_key"])
            key_s = str(key)
            fs = self.federation.setdefault(key_s, FederationState())
            current = self.registry.get(key_s)

            if fs.mode == "idle":
                fs.mode = "incremental"
                fs.declared_trainers = {edge_id}
                fs.session_edges = {edge_id}
                self._record_history(key_s, "declare", edge_id)
                return {"mode": "incremental", "round": 0,
                        "base": current.to_json() if current else None}

            if fs.mode == "incremental":
                if edge_id in fs.declared_trainers:
                    return {"mode": "incremental", "round": 0,
                            "base": current.to_json() if current else None}
                if key.family != "linear":
                    # Trees cannot be round-averaged; concurrent tree trainers
                    # submit sequentially as incremental versions.
                    fs.declared_trainers.add(edge_id)
                    fs.session_edges.add(edge_id)
                    return {"mode": "incremental", "round": 0,
                            "base": current.to_json() if current else None}
                fs.mode = "semi_concurrent"
                fs.round = 1
                fs.round_base = current.to_json()["model"] if current else None
                fs.round_deadline = self.clock.now() + self.config.round_deadline
                fs.declared_trainers.add(edge_id)
                fs.session_edges.add(edge_id)
                fs.pending_updates.clear()
                for other in fs.declared_trainers - {edge_id}:
                    self._task_queue(other).append({
                        "type": "federation_round", "model_key": key_s,
                        "round": fs.round, "base": fs.round_base})
                return {"mode": "semi_concurrent", "round": fs.round, "base": fs.round_base}

            # semi_concurrent: joiners attach to the current round
            fs.declared_trainers.add(edge_id)
            fs.session_edges.add(edge_id)
            return {"mode": "semi_concurrent", "round": fs.round, "base": fs.round_base}

    def handle_submit_update(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            self.tick()
            key_s = str(ModelKey.parse(payload["model_key"]))
            fs = self.federation.get(key_s)
            if fs is None or fs.mode == "idle" or edge_id not in fs.session_edges:
                raise ProtocolError(f"no declared training for {edge_id!r} on {key_s}")
            model_json = payload["model"]
            model_bytes = canonical.dump_bytes(model_json)
            deserialize_model(model_bytes)  # reject malformed submissions
            sample_count = int(payload["sample_count"])

            if fs.mode == "incremental":
                if edge_id not in fs.declared_trainers:
                    raise ProtocolError(f"{edge_id!r} is not an incremental trainer")
                version = self._store_global(key_s, model_bytes, {edge_id},
                                             "incremental_update", edge_id)
                fs.declared_trainers.discard(edge_id)
                fs.session_edges.discard(edge_id)
                if not fs.declared_trainers:
                    fs.reset()
                return {"status": "stored", "version": version}

            if payload.get("round") != fs.round:
                raise StaleRound(f"round {payload.get('round')} != current {fs.round}")
            if edge_id not in fs.declared_trainers:
                raise StaleRound(f"{edge_id!r} was dropped from the current round")
            fs.pending_updates[edge_id] = (model_json, sample_count)
            fs.session_contributors.add(edge_id)
            if set(fs.pending_updates) >= fs.declared_trainers:
                return self._complete_round(key_s, fs, triggered_by=edge_id)
            return {"status": "waiting", "round": fs.round}

    def _complete_round(self, key_s: str, fs: FederationState, triggered_by: str | None) -> dict:
        models = []
        counts = []
        for edge, (model_json, count) in sorted(fs.pending_updates.items()):
            model = deserialize_model(canonical.dump_bytes(model_json))
            if not isinstance(model, LinearModel):
                raise ProtocolError("semi-concurrent rounds average linear models only")
            models.append(model)
            counts.append(count)
        averaged = average_models(
            models, weights=counts if self.config.weighted_averaging else None)
        averaged_json = averaged.to_json()
        survivors = set(fs.pending_updates)
        self.round_log.append({"model_key": key_s, "round": fs.round,
                               "contributors": sorted(survivors),
                               "average": averaged_json, "at": self.clock.now()})
        fs.declared_trainers = survivors
        fs.pending_updates = {}

        finished = fs.round >= self.config.rounds or len(survivors) < 2
        if finished:
            version = self._store_global(
                key_s, canonical.dump_bytes(averaged_json), fs.session_contributors,
                "semi_concurrent_final", ",".join(sorted(fs.session_contributors)))
            for edge in sorted(fs.session_edges):
                if edge != triggered_by and self.edges.get(edge) and \
                        self.edges[edge].status == "active":
                    self._task_queue(edge).append({
                        "type": "federation_final", "model_key": key_s, "version": version})
            fs.reset()
            return {"status": "final", "version": version}

        fs.round += 1
        fs.round_base = averaged_json
        fs.round_deadline = self.clock.now() + self.config.round_deadline
        for edge in sorted(fs.declared_trainers):
            if edge != triggered_by:
                self._task_queue(edge).append({
                    "type": "federation_round", "model_key": key_s,
                    "round": fs.round, "base": fs.round_base})
        return {"status": "round_complete", "round": fs.round, "base": fs.round_base}

    def tick(self) -> None:
        """Apply deadline-driven transitions; safe to call at any time."""
        now = self.clock.now()
        for key_s, fs in list(self.federation.items()):
            if fs.mode == "semi_concurrent" and fs.round_deadline is not None \
                    and now >= fs.round_deadline:
                if fs.pending_updates:
                    self._complete_round(key_s, fs, triggered_by=None)
                else:
                    for edge in sorted(fs.session_edges):
                        if self.edges.get(edge) and self.edges[edge].status == "active":
                            self._task_queue(edge).append({
                                "type": "federation_aborted", "model_key": key_s})
                    fs.reset()
        for skey, session in list(self.surrogate_sessions.items()):
            if session.deadline is not None and now >= session.deadline:
                if session.submissions:
                    self._finalize_surrogate(skey, session)
                else:
                    del self.surrogate_sessions[skey]

    def _record_history(self, key_s: str, event: str, edge_id: str) -> None:
        record = self.registry.get(key_s)
        if record is not None:
            record.history.append((event, edge_id, self.clock.now()))

    def _store_global(self, key_s: str, model_bytes: bytes, contributors: set[str],
                      event: str, edge_label: str) -> int:
        previous = self.registry.get(key_s)
        version = previous.version + 1 if previous else 1
        contributing = set(previous.contributing_edges) if previous else set()
        contributing |= contributors
        history = list(previous.history) if previous else []
        history.append((event, edge_label, self.clock.now()))
        record = GlobalModelRecord(model_key=key_s, version=version,
                                   model_bytes=model_bytes,
                                   contributing_edges=contributing, history=history)
        self.registry[key_s] = record
        self.store.append({"t": "global_stored", "record": record.to_json()})
        return version

    def handle_fetch_global(self, edge_id: str, token: str | None, payload: dict) -> dict | None:
        with self._lock:
            self._auth(edge_id, token)
            key_s = payload["model_key"]
            surrogate = payload.get("surrogate")
            lookup = _surrogate_registry_key(key_s, surrogate) if surrogate else key_s
            record = self.registry.get(lookup)
            return record.to_json() if record else None

    # -- HE managers ---------------------------------------------------------

    def handle_ingest_encrypted_dataset(self, edge_id: str, token: str | None,
                                        payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            dataset = EncryptedDataset.from_json(payload["dataset"])
            key = f"{dataset.cancer_type}|{dataset.target_variable}"
            existing = self.he_aggregates.get(key)
            if existing is not None:
                merged = self._merge(existing, dataset)  # raises MergeError on mismatch
            else:
                merged = dataset
            self.he_aggregates[key] = merged
            self.he_stale.add(key)
            self.store.append({"t": "he_ingested", "dataset": payload["dataset"]})
            return {"aggregate_n": merged.n}

    def train_he_models(self) -> int:
        """Idempotent sweep: retrain every stale aggregate, then serve waiting tickets."""
        with self._lock:
            refreshed = 0
            for key in sorted(self.he_stale):
                aggregate = self.he_aggregates.get(key)
                if aggregate is None or aggregate.n < 1:
                    self.he_stale.discard(key)
                    continue
                try:
                    model = train_encrypted_linear(aggregate, self.config.he_training)
                except Exception as exc:  # per-aggregate failures logged, sweep continues
                    self.he_failures.append(f"{key}: {exc}")
                    continue
                version = self.he_models.get(key, (None, 0))[1] + 1
                model_json = model.to_json()
                self.he_models[key] = (model_json, version)
                self.he_stale.discard(key)
                self.store.append({"t": "he_model_stored", "agg_key": key,
                                   "model": model_json, "version": version})
                refreshed += 1
            self._serve_waiting_tickets()
            return refreshed

    def _serve_waiting_tickets(self) -> None:
        for ticket in self.tickets.values():
            if ticket.status != "done":
                self._try_execute(ticket)

    def _try_execute(self, ticket: InferenceTicket) -> None:
        key = ModelKey.parse(ticket.model_key)
        entry = self.he_models.get(_agg_key(key))
        if entry is None:
            ticket.status = "awaiting_model"
            return
        model = EncryptedLinearModel.from_json(entry[0])
        features = np.asarray(ticket.features, dtype=float).reshape(-1, 2, 2)
        result = predict_encrypted(model, features)
        ticket.encrypted_result = result.to_json()
        ticket.status = "done"

    def handle_submit_inference(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            key = ModelKey.parse(payload["model_key"])
            if key.family != "linear" or key.task != "regression":
                raise ValidationError("encrypted inference serves linear regression models only")
            features = payload["features"]
            aggregate = self.he_aggregates.get(_agg_key(key))
            if aggregate is not None and len(features) != aggregate.arity:
                raise SchemaMismatch(
                    f"expected {aggregate.arity} encrypted features, got {len(features)}")
            self._ticket_counter += 1
            ticket = InferenceTicket(
                request_id=f"req-{self._ticket_counter:06d}", edge_id=edge_id,
                model_key=str(key), features=features, status="queued")
            self.tickets[ticket.request_id] = ticket
            self._try_execute(ticket)
            return {"request_id": ticket.request_id, "status": ticket.status}

    def handle_poll_inference(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            ticket = self.tickets.get(payload["request_id"])
            if ticket is None:
                raise NotFound(f"unknown inference request {payload['request_id']!r}")
            if ticket.edge_id != edge_id:
                raise AuthError("inference results are retrievable only by the submitting edge")
            if ticket.status != "done":
                self._try_execute(ticket)
            if ticket.status != "done":
                return {"status": "pending"}
            return {"status": "done", "result": ticket.encrypted_result}

    # -- global surrogate coordination ----------------------------------------

    def handle_surrogate(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            self.tick()
            key_s = str(ModelKey.parse(payload["model_key"]))
            kind = payload["kind"]
            if kind not in ("linear", "tree"):
                raise ValidationError(f"unknown surrogate kind {kind!r}")
            action = payload.get("action", "request")
            skey = f"{key_s}|{kind}"
            if action == "request":
                return self._surrogate_request(edge_id, key_s, kind, skey)
            if action == "submit":
                return self._surrogate_submit(edge_id, skey, payload)
            raise ValidationError(f"unknown surrogate action {action!r}")

    def _surrogate_request(self, edge_id: str, key_s: str, kind: str, skey: str) -> dict:
        stored = self.registry.get(_surrogate_registry_key(key_s, kind))
        if stored is not None:
            return {"status": "ready", "version": stored.version}
        if skey in self.surrogate_sessions:
            return {"status": "pending"}
        key = ModelKey.parse(key_s)
        has_plain = key_s in self.registry
        has_he = _agg_key(key) in self.he_models
        if not (has_plain or has_he):
            raise NotFound(f"no global model (plaintext or HE) for {key_s}")
        session = SurrogateSession(
            kind=kind, expected=set(self.active_edges()),
            deadline=self.clock.now() + self.config.surrogate_deadline)
        self.surrogate_sessions[skey] = session
        for edge in sorted(session.expected):
            self._task_queue(edge).append({
                "type": "surrogate_train", "model_key": key_s, "kind": kind,
                "use_he": not has_plain})
        return {"status": "started", "expected": sorted(session.expected)}

    def _surrogate_submit(self, edge_id: str, skey: str, payload: dict) -> dict:
        session = self.surrogate_sessions.get(skey)
        if session is None:
            raise ProtocolError(f"no surrogate session for {skey}")
        deserialize_model(canonical.dump_bytes(payload["model"]))
        session.submissions[edge_id] = {
            "model": payload["model"],
            "fidelity_r2": float(payload["fidelity_r2"]),
            "sample_count": int(payload["sample_count"]),
        }
        if set(session.submissions) >= session.expected:
            return self._finalize_surrogate(skey, session)
        return {"status": "waiting"}

    def _finalize_surrogate(self, skey: str, session: SurrogateSession) -> dict:
        key_s, kind = skey.rsplit("|", 1)
        if kind == "linear":
            models = []
            counts = []
            for edge, sub in sorted(session.submissions.items()):
                model = deserialize_model(canonical.dump_bytes(sub["model"]))
                models.append(model)
                counts.append(sub["sample_count"])
            final = average_models(
                models, weights=counts if self.config.weighted_averaging else None)
            final_bytes = canonical.dump_bytes(final.to_json())
        else:
            best_edge = max(sorted(session.submissions),
                            key=lambda e: session.submissions[e]["fidelity_r2"])
            final_bytes = canonical.dump_bytes(session.submissions[best_edge]["model"])
        version = self._store_global(
            _surrogate_registry_key(key_s, kind), final_bytes,
            set(session.submissions), f"surrogate_{kind}_final",
            ",".join(sorted(session.submissions)))
        del self.surrogate_sessions[skey]
        return {"status": "final", "version": version}

    # -- edge poll --------------------------------------------------------------

    def handle_poll_tasks(self, edge_id: str, token: str | None, payload: dict) -> dict:
        with self._lock:
            self._auth(edge_id, token)
            self.tick()
            queue = self.tasks.get(edge_id, [])
            self.tasks[edge_id] = []
            return {"tasks": queue}
