"""The per-hospital edge node.

Gatekeeping happens at the ingest boundary: raw patient ids are replaced by
keyed pseudonyms before anything is stored, and only pseudonymized material
ever reaches a cloud client. Dashboard queries are read-only over immutable
snapshots; training and ingestion go through the single-writer lock.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .. import canonical
from ..cloud.storage import DurableLog
from ..crypto import MoreKey, encrypt_values, decrypt, Ciphertext
from ..domain import (
    DEFAULT_ISSUES,
    FeatureSchema,
    Intervention,
    ModelKey,
    PatientRecord,
    Pseudonym,
    QoLObservation,
    TrainingDataset,
    build_feature_vector,
    extract_training_dataset,
    intervention_feature,
    pseudonymize,
    validate_record,
)
from ..errors import (
    DecodeError,
    EmptyDataset,
    FeatureDisabled,
    HETimeout,
    NotFound,
    ProtocolError,
    SchemaMismatch,
    StaleRound,
    TransportError,
    ValidationError,
)
from ..explain import Attribution, SurrogateRef, shapley, simulate_interventions, train_surrogate
from .. import ml

_METRIC_TIE_TOL = 1e-9
_SOURCE_PREFERENCE = {"local": 0, "federated_global": 1, "he_global": 2}


@dataclass
class EdgeConfig:
    edge_id: str
    pseudonymization_key: bytes
    schema: FeatureSchema
    admission_secret: str = ""
    cloud_base_url: str | None = None
    federation_enabled: bool = True
    he_enabled: bool = False
    more_key: MoreKey | None = None
    he_targets: tuple[str, ...] | None = None  # None = every regression target
    listen_address: str = "127.0.0.1:0"
    bearer_token: str = "edge-dashboard-token"
    issues: tuple[str, ...] = DEFAULT_ISSUES
    interventions: tuple[Intervention, ...] = ()
    aggregator_sources: tuple[str, ...] = ("wearables",)
    required_his_features: tuple[str, ...] = ()
    training: ml.TrainingConfig = field(default_factory=ml.TrainingConfig)
    surrogate_training: ml.TrainingConfig = field(
        default_factory=lambda: ml.TrainingConfig(learning_rate=0.05, epochs=4000,
                                                  ridge_lambda=0.0))
    horizon_step_seconds: int = 30 * 86400
    time_advance: tuple[tuple[str, float], ...] = (("months_since_treatment", 1.0),)
    max_combo: int = 2
    he_max_polls: int = 50
    poll_sleep: float = 0.0  # >0 in wire mode so waiting rounds do not spin
    rng_seed: int = 0
    data_dir: str | None = None

    def __post_init__(self) -> None:
        if self.he_enabled and self.more_key is None:
            raise ValidationError("he_enabled requires a MORE key")


@dataclass
class ModelSelection:
    model_key: str
    candidates: list[dict]
    chosen: str
    evaluated_at: int
    degraded: bool = False

    def to_json(self) -> dict:
        return {"model_key": self.model_key, "candidates": self.candidates,
                "chosen": self.chosen, "evaluated_at": self.evaluated_at,
                "degraded": self.degraded}


@dataclass
class Timeline:
    pseudonym: str
    observations: list[dict]
    interventions: list[dict]
    predictions: list[dict]
    attributions: dict[str, dict]

    def to_json(self) -> dict:
        return {"pseudonym": self.pseudonym, "observations": self.observations,
                "interventions": self.interventions, "predictions": self.predictions,
                "attributions": self.attributions}


class _ModelSlot:
    def __init__(self) -> None:
        self.local: ml.Model | None = None
        self.train: TrainingDataset | None = None
        self.holdout: TrainingDataset | None = None
        self.federated: ml.Model | None = None
        self.federated_version: int | None = None
        self.he_metrics: ml.Metrics | None = None
        self.selection: ModelSelection | None = None
        self.serving: ml.Model | None = None
        self.version_counter = 0
        self.uploaded_fingerprint: str | None = None


class EdgeNode:
    def __init__(self, config: EdgeConfig, clock, cloud_client=None) -> None:
        self.config = config
        self.clock = clock
        self.client = cloud_client
        self._lock = threading.RLock()
        self.records: dict[str, list[PatientRecord]] = {}
        self.observations: dict[str, list[QoLObservation]] = {}
        self.interventions: dict[str, list[Intervention]] = {}
        self.wearables: dict[str, set[str]] = {}
        self.slots: dict[str, _ModelSlot] = {}
        self._inbox: list[dict] = []
        self._suggestion_cache: dict[tuple[str, str], tuple[tuple, list]] = {}
        self.stats = {"simulations_computed": 0, "his_ingested": 0, "aggregator_ingested": 0}
        self._he_rng = np.random.default_rng(config.rng_seed + 0x5EED)
        self.store = DurableLog(config.data_dir)
        self._replay()

    # -- persistence -------------------------------------------------------

    def _replay(self) -> None:
        for event in self.store.replay():
            kind = event["t"]
            if kind == "record":
                self._store_record(PatientRecord.from_json(event["record"]), persist=False)
            elif kind == "observation":
                self._store_observation(QoLObservation.from_json(event["observation"]),
                                        persist=False)
            elif kind == "intervention":
                self._store_intervention(event["pseudonym"],
                                         Intervention.from_json(event["intervention"]),
                                         persist=False)
            elif kind == "wearable":
                devices = self.wearables.setdefault(event["pseudonym"], set())
                if event["action"] == "register":
                    devices.add(event["device_id"])
                else:
                    devices.discard(event["device_id"])

    # -- registration with the cloud ----------------------------------------

    def register_with_cloud(self) -> None:
        if self.client is not None:
            self.client.register(self.config.admission_secret)

    def deregister_from_cloud(self) -> None:
        if self.client is not None:
            self.client.deregister()

    # -- ingestion (Gatekeeper + Redacted Patient Data Manager) ---------------

    def _pseudonym(self, patient_id: str) -> Pseudonym:
        return pseudonymize(patient_id, self.config.pseudonymization_key)

    def _store_record(self, record: PatientRecord, persist: bool = True) -> None:
        bucket = self.records.setdefault(record.pseudonym.token, [])
        bucket.append(record)
        if persist:
            self.store.append({"t": "record", "record": record.to_json()})

    def _store_observation(self, obs: QoLObservation, persist: bool = True) -> None:
        bucket = self.observations.setdefault(obs.pseudonym.token, [])
        bucket.append(obs)
        bucket.sort(key=lambda o: o.measured_at)
        if persist:
            self.store.append({"t": "observation", "observation": obs.to_json()})

    def _store_intervention(self, token: str, iv: Intervention, persist: bool = True) -> None:
        self.interventions.setdefault(token, []).append(iv)
        if persist:
            self.store.append({"t": "intervention", "pseudonym": token,
                               "intervention": iv.to_json()})

    def ingest_his_payload(self, payload: dict) -> dict:
        """Validate, pseudonymize and store one HIS batch; invalid entries are
        rejected individually with reasons."""
        if not isinstance(payload, dict):
            raise DecodeError("HIS payload must be a JSON object")
        ingested = 0
        rejections: list[dict] = []
        with self._lock:
            for i, raw in enumerate(payload.get("records", [])):
                try:
                    record = PatientRecord(
                        pseudonym=self._pseudonym(raw["patient_id"]),
                        cancer_type=raw["cancer_type"],
                        features=dict(raw["features"]),
                        recorded_at=int(raw["recorded_at"]),
                    )
                except (KeyError, TypeError, ValueError, ValidationError) as exc:
                    rejections.append({"kind": "record", "index": i, "reasons": [str(exc)]})
                    continue
                violations = validate_record(record, self.config.schema,
                                             required=self.config.required_his_features)
                existing = self.records.get(record.pseudonym.token)
                if existing and record.recorded_at < existing[-1].recorded_at:
                    violations = list(violations) + ["out_of_order_timestamp"]
                if violations:
                    rejections.append({"kind": "record", "index": i,
                                       "reasons": [str(v) for v in violations]})
                    continue
                self._store_record(record)
                ingested += 1
            for i, raw in enumerate(payload.get("observations", [])):
                try:
                    issue_scores = dict(raw["issue_scores"])
                    unknown = set(issue_scores) - set(self.config.issues)
                    if unknown:
                        raise ValidationError(f"unknown issues {sorted(unknown)}")
                    obs = QoLObservation(
                        pseudonym=self._pseudonym(raw["patient_id"]),
                        measured_at=int(raw["measured_at"]),
                        overall_qol=float(raw["overall_qol"]),
                        issue_scores=issue_scores,
                    )
                except (KeyError, TypeError, ValueError, ValidationError) as exc:
                    rejections.append({"kind": "observation", "index": i, "reasons": [str(exc)]})
                    continue
                self._store_observation(obs)
                ingested += 1
            for i, raw in enumerate(payload.get("interventions", [])):
                try:
                    iv = Intervention(
                        id=raw["id"], kind=raw["kind"], name=raw["name"],
                        start=int(raw["start"]),
                        end=None if raw.get("end") is None else int(raw["end"]),
                    )
                    token = self._pseudonym(raw["patient_id"]).token
                except (KeyError, TypeError, ValueError, ValidationError) as exc:
                    rejections.append({"kind": "intervention", "index": i, "reasons": [str(exc)]})
                    continue
                self._store_intervention(token, iv)
                ingested += 1
        self.stats["his_ingested"] += ingested
        return {"ingested": ingested, "rejected": rejections}

    def ingest_aggregator_payload(self, source: str, payload: dict) -> dict:
        """Merge aggregator features (e.g. wearable aggregates) into each
        patient's latest record; entries for unknown patients or unregistered
        devices are rejected individually."""
        from ..errors import UnknownAggregator
        if source not in self.config.aggregator_sources:
            raise UnknownAggregator(f"source {source!r} is not configured")
        ingested = 0
        rejections: list[dict] = []
        with self._lock:
            for i, raw in enumerate(payload.get("entries", [])):
                try:
                    token = self._pseudonym(raw["patient_id"]).token
                    device = raw.get("device_id", "")
                    features = dict(raw["features"])
                    recorded_at = int(raw["recorded_at"])
                except (KeyError, TypeError, ValueError, ValidationError) as exc:
                    rejections.append({"index": i, "reasons": [str(exc)]})
                    continue
                history = self.records.get(token)
                if not history:
                    rejections.append({"index": i, "reasons": ["unknown_patient"]})
                    continue
                if device and device not in self.wearables.get(token, set()):
                    rejections.append({"index": i, "reasons": ["unregistered_device"]})
                    continue
                latest = history[-1]
                probe = PatientRecord(latest.pseudonym, latest.cancer_type, features,
                                      max(latest.recorded_at, recorded_at))
                violations = validate_record(probe, self.config.schema)
                if violations:
                    rejections.append({"index": i, "reasons": [str(v) for v in violations]})
                    continue
                merged = PatientRecord(latest.pseudonym, latest.cancer_type,
                                       {**latest.features, **features},
                                       max(latest.recorded_at, recorded_at))
                self._store_record(merged)
                ingested += 1
        self.stats["aggregator_ingested"] += ingested
        return {"ingested": ingested, "rejected": rejections}

    # -- wearable registration -----------------------------------------------

    def _require_patient(self, pseudonym: str) -> None:
        if pseudonym not in self.records and pseudonym not in self.observations:
            raise NotFound(f"unknown patient {pseudonym!r}")

    def register_wearable(self, pseudonym: str, device_id: str) -> dict:
        with self._lock:
            self._require_patient(pseudonym)
            self.wearables.setdefault(pseudonym, set()).add(device_id)
            self.store.append({"t": "wearable", "action": "register",
                               "pseudonym": pseudonym, "device_id": device_id})
            return {"pseudonym": pseudonym, "devices": sorted(self.wearables[pseudonym])}

    def deregister_wearable(self, pseudonym: str, device_id: str) -> dict:
        with self._lock:
            self._require_patient(pseudonym)
            self.wearables.setdefault(pseudonym, set()).discard(device_id)
            self.store.append({"t": "wearable", "action": "deregister",
                               "pseudonym": pseudonym, "device_id": device_id})
            return {"pseudonym": pseudonym, "devices": sorted(self.wearables[pseudonym])}

    # -- training data --------------------------------------------------------

    def _all_records(self) -> list[PatientRecord]:
        return [r for bucket in self.records.values() for r in bucket]

    def _all_observations(self) -> list[QoLObservation]:
        return [o for bucket in self.observations.values() for o in bucket]

    def _interventions_by_pseudonym(self) -> dict[Pseudonym, list[Intervention]]:
        out: dict[Pseudonym, list[Intervention]] = {}
        for token, items in self.interventions.items():
            out[Pseudonym(token)] = items
        return out

    def extract_dataset(self, key: ModelKey) -> TrainingDataset:
        return extract_training_dataset(
            self._all_records(), self._all_observations(), self.config.schema,
            key.cancer_type, key.target_variable,
            interventions=self._interventions_by_pseudonym(),
        )

    # -- model management ------------------------------------------------------

    def _slot(self, key: ModelKey) -> _ModelSlot:
        return self.slots.setdefault(str(key), _ModelSlot())

    def _split(self, key: ModelKey, dataset: TrainingDataset) -> tuple[TrainingDataset, TrainingDataset]:
        n = dataset.n
        if n < 5:
            return dataset, dataset
        key_hash = int(canonical.content_hash64(str(key)), 16)
        seed = (self.config.rng_seed * 1_000_003 + key_hash) % (2 ** 32)
        rng = np.random.default_rng(seed)
        perm = rng.permutation(n)
        n_hold = max(1, n // 5)
        hold_idx = set(int(i) for i in perm[:n_hold])
        train_rows, train_targets, hold_rows, hold_targets = [], [], [], []
        for i in range(n):
            if i in hold_idx:
                hold_rows.append(dataset.rows[i])
                hold_targets.append(dataset.targets[i])
            else:
                train_rows.append(dataset.rows[i])
                train_targets.append(dataset.targets[i])
        mk = lambda rows, targets: TrainingDataset(dataset.schema_hash, dataset.cancer_type,
                                                   dataset.target_variable, tuple(rows),
                                                   tuple(targets))
        return mk(train_rows, train_targets), mk(hold_rows, hold_targets)

    def _train_config(self, key: ModelKey) -> ml.TrainingConfig:
        return replace(self.config.training, task=key.task)

    def train_local(self, key: ModelKey) -> ml.Model:
        dataset = self.extract_dataset(key)
        train, holdout = self._split(key, dataset)
        cfg = self._train_config(key)
        if key.family == "linear":
            model: ml.Model = ml.train_linear_with_retry(train, cfg)
        else:
            model = ml.train_tree(train, cfg)
        slot = self._slot(key)
        slot.local = model
        slot.train = train
        slot.holdout = holdout
        return model

    # federation client ---------------------------------------------------------

    def _train_for_round(self, key: ModelKey, base_json: dict | None) -> ml.Model:
        slot = self._slot(key)
        cfg = self._train_config(key)
        if key.family != "linear" or base_json is None:
            if key.family == "linear":
                return ml.train_linear_with_retry(slot.train, cfg)
            return ml.train_tree(slot.train, cfg)
        base = ml.deserialize_model(canonical.dump_bytes(base_json))
        return ml.train_linear_with_retry(slot.train, cfg, init=base)

    def _pump_tasks(self) -> None:
        for task in self.client.poll_tasks():
            self._inbox.append(task)

    def _take_task(self, types: tuple[str, ...], key_s: str | None = None) -> dict | None:
        for i, task in enumerate(self._inbox):
            if task["type"] in types and (key_s is None or task.get("model_key") == key_s):
                return self._inbox.pop(i)
        return None

    def federation_session(self, key: ModelKey) -> "FederationSession":
        if self.client is None:
            raise TransportError("no cloud client configured")
        return FederationSession(self, key)

    def run_federation(self, key: ModelKey, max_steps: int = 10_000) -> str:
        """Blocking federation pass; cooperative callers drive a session directly."""
        session = self.federation_session(key)
        for _ in range(max_steps):
            state = session.step()
            if state in ("done", "aborted"):
                return state
            if state == "polling" and self.config.poll_sleep > 0:
                time.sleep(self.config.poll_sleep)
        raise TransportError(f"federation on {key} did not finish within {max_steps} steps")

    def adopt_global(self, key: ModelKey) -> ml.Model | None:
        record = self.client.fetch_global(str(key))
        if record is None:
            return None
        slot = self._slot(key)
        slot.federated = ml.deserialize_model(canonical.dump_bytes(record["model"]))
        slot.federated_version = record["version"]
        return slot.federated

    # encrypted dataset upload ----------------------------------------------------

    def _he_applicable(self, key: ModelKey) -> bool:
        if key.task != "regression" or key.family != "linear":
            return False
        if self.config.he_targets is not None and \
                key.target_variable not in self.config.he_targets:
            return False
        return True

    def upload_encrypted_dataset(self, key: ModelKey) -> bool:
        """Upload once per data change; returns True when an upload happened."""
        if not self.config.he_enabled:
            raise FeatureDisabled("HE is not enabled on this edge")
        if not self._he_applicable(key):
            return False
        from ..crypto import encrypt_dataset, dataset_fingerprint
        slot = self._slot(key)
        if slot.train is None:
            self.train_local(key)
            slot = self._slot(key)
        plain_fp = canonical.sha256(canonical.dump_bytes(slot.train.to_json()))
        if slot.uploaded_fingerprint == plain_fp:
            return False
        enc = encrypt_dataset(self.config.more_key, slot.train, self._he_rng)
        self.client.ingest_encrypted_dataset(enc.to_json())
        slot.uploaded_fingerprint = plain_fp
        return True

    # candidate evaluation ----------------------------------------------------------

    def _he_holdout_metrics(self, key: ModelKey, holdout: TrainingDataset) -> ml.Metrics | None:
        preds = []
        for row in holdout.rows:
            try:
                value = self.he_predict_vector(key, row)
            except (HETimeout, TransportError, NotFound):
                return None
            preds.append(value)
        y = np.asarray(holdout.targets)
        err = np.asarray(preds) - y
        rmse = float(np.sqrt(np.mean(err ** 2)))
        mae = float(np.mean(np.abs(err)))
        sst = float(((y - y.mean()) ** 2).sum())
        sse = float((err ** 2).sum())
        r2 = 1.0 - sse / sst if sst > 0 else (1.0 if sse == 0 else 0.0)
        return ml.Metrics(task="regression", rmse=rmse, mae=mae, r2=r2)

    def evaluate_candidates(self, key: ModelKey, degraded: bool = False,
                            include_he: bool = True) -> ModelSelection:
        slot = self._slot(key)
        if slot.local is None or slot.holdout is None:
            raise EmptyDataset(f"no local model for {key}; call train_local first")
        candidates: list[tuple[str, ml.Metrics, ml.Model | None]] = [
            ("local", ml.evaluate(slot.local, slot.holdout), slot.local)]
        if slot.federated is not None:
            candidates.append(("federated_global",
                               ml.evaluate(slot.federated, slot.holdout), slot.federated))
        if include_he and self.config.he_enabled and self._he_applicable(key) \
                and self.client is not None:
            metrics = self._he_holdout_metrics(key, slot.holdout)
            if metrics is not None:
                slot.he_metrics = metrics
                candidates.append(("he_global", metrics, None))

        def sort_key(item):
            source, metrics, _ = item
            return (metrics.primary(), _SOURCE_PREFERENCE[source])

        ranked = sorted(candidates, key=sort_key)
        best_metric = ranked[0][1].primary()
        tied = [c for c in candidates if c[1].primary() <= best_metric + _METRIC_TIE_TOL]
        chosen = min(tied, key=lambda c: _SOURCE_PREFERENCE[c[0]])
        selection = ModelSelection(
            model_key=str(key),
            candidates=[{"source": s, "metrics": m.to_json()} for s, m, _ in candidates],
            chosen=chosen[0],
            evaluated_at=self.clock.now(),
            degraded=degraded,
        )
        slot.selection = selection
        serving = chosen[2]
        if serving is None:  # he_global chosen: serve from best materialized model
            materialized = [c for c in candidates if c[2] is not None]
            serving = min(materialized, key=sort_key)[2]
        if serving is not slot.serving:
            slot.serving = serving
            slot.version_counter += 1
        return selection

    def ensure_model(self, key: ModelKey) -> ModelSelection:
        """Local training, optional federation and encrypted upload, candidate
        evaluation on the held-out split, and selection of the serving model."""
        with self._lock:
            self.train_local(key)
            degraded = False
            if self.config.federation_enabled and self.client is not None:
                try:
                    self.run_federation(key)
                    self.adopt_global(key)
                except TransportError:
                    degraded = True
            if self.config.he_enabled and self._he_applicable(key) \
                    and self.client is not None:
                try:
                    self.upload_encrypted_dataset(key)
                except TransportError:
                    degraded = True
            return self.evaluate_candidates(key, degraded=degraded)

    # -- serving (Predictions & Simulations Manager) --------------------------------

    def _serving_slot(self, cancer_type: str, target: str) -> tuple[ModelKey, _ModelSlot] | None:
        best: tuple[float, ModelKey, _ModelSlot] | None = None
        for key_s, slot in self.slots.items():
            key = ModelKey.parse(key_s)
            if key.cancer_type != cancer_type or key.target_variable != target:
                continue
            if slot.serving is None or slot.selection is None:
                continue
            chosen = slot.selection.chosen
            metric = next(c["metrics"] for c in slot.selection.candidates
                          if c["source"] == chosen)
            primary = metric.get("rmse") if metric["task"] == "regression" \
                else -metric.get("accuracy", 0.0)
            if best is None or primary < best[0]:
                best = (primary, key, slot)
        if best is None:
            return None
        return best[1], best[2]

    def _patient_state(self, pseudonym: str):
        self._require_patient(pseudonym)
        history = self.records.get(pseudonym, [])
        obs = self.observations.get(pseudonym, [])
        ivs = self.interventions.get(pseudonym, [])
        anchor = 0
        if history:
            anchor = max(anchor, history[-1].recorded_at)
        if obs:
            anchor = max(anchor, obs[-1].measured_at)
        return history, obs, ivs, anchor

    def _feature_vector(self, record: PatientRecord, active_ids: set[str],
                        model: ml.Model, steps_ahead: int = 0) -> list[float]:
        schema = self.config.schema
        features = dict(record.features)
        for name in schema.intervention_features():
            features[name] = 0.0
        for iv_id in active_ids:
            feat = intervention_feature(iv_id)
            if feat in schema.names:
                features[feat] = 1.0
        if steps_ahead:
            for feat, per_step in self.config.time_advance:
                if feat in schema.names and feat in features:
                    features[feat] = float(features[feat]) + per_step * steps_ahead
        fill = {name: mean for name, mean in zip(schema.names, model.feature_means)}
        vec = build_feature_vector(schema, features, fill=fill)
        return [v if v is not None else 0.0 for v in vec]

    def _predict_series(self, pseudonym: str, targets: Sequence[str], horizon: int,
                        active_ids: set[str] | None) -> tuple[list[dict], dict[str, Attribution]]:
        history, obs, ivs, anchor = self._patient_state(pseudonym)
        if not history:
            return [], {}
        latest = history[-1]
        ids = active_ids
        if ids is None:
            configured = {iv.id for iv in self.config.interventions}
            ids = {iv.id for iv in ivs
                   if iv.active_at(anchor) and (iv.id in configured or
                                                intervention_feature(iv.id) in self.config.schema.names)}
        predictions: list[dict] = []
        attributions: dict[str, Attribution] = {}
        for target in targets:
            found = self._serving_slot(latest.cancer_type, target)
            if found is None:
                continue
            _, slot = found
            model = slot.serving
            for k in range(1, horizon + 1):
                vec = self._feature_vector(latest, ids, model, steps_ahead=k)
                predictions.append({
                    "time": anchor + k * self.config.horizon_step_seconds,
                    "target": target,
                    "value": ml.predict(model, vec),
                    "assuming": sorted(ids),
                })
                if k == 1:
                    attributions[target] = shapley(
                        lambda x: ml.predict(model, x), vec,
                        list(model.feature_means),
                        feature_names=list(self.config.schema.names),
                        rng_seed=self.config.rng_seed)
        return predictions, attributions

    def get_timeline(self, pseudonym: str, targets: Sequence[str], horizon: int) -> Timeline:
        """Recorded observations and interventions plus model predictions at
        future steps, assuming currently active interventions persist."""
        with self._lock:
            history, obs, ivs, _ = self._patient_state(pseudonym)
            predictions, attributions = self._predict_series(pseudonym, targets, horizon, None)
            return Timeline(
                pseudonym=pseudonym,
                observations=[o.to_json() for o in obs],
                interventions=[iv.to_json() for iv in ivs],
                predictions=predictions,
                attributions={t: a.to_json() for t, a in attributions.items()},
            )

    def what_if(self, pseudonym: str, intervention_ids: Sequence[str],
                targets: Sequence[str], horizon: int) -> list[dict]:
        """Pure query: predictions with the indicator features forced to the given set."""
        with self._lock:
            for iv_id in intervention_ids:
                if intervention_feature(iv_id) not in self.config.schema.names:
                    raise SchemaMismatch(f"unknown intervention id {iv_id!r}")
            predictions, _ = self._predict_series(pseudonym, targets, horizon,
                                                  set(intervention_ids))
            return [{k: v for k, v in p.items() if k != "assuming"} for p in predictions]

    def suggest_interventions(self, pseudonym: str, target: str) -> list[dict]:
        """Cached intervention-effect ranking; recomputed when the serving model
        version or the patient's latest record changes."""
        with self._lock:
            history, obs, ivs, anchor = self._patient_state(pseudonym)
            if not history:
                raise NotFound(f"no records for patient {pseudonym!r}")
            latest = history[-1]
            found = self._serving_slot(latest.cancer_type, target)
            if found is None:
                raise NotFound(f"no trained model for target {target!r}")
            key, slot = found
            record_fp = canonical.sha256(canonical.dump_bytes(latest.to_json()))
            cache_token = (str(key), slot.version_counter, record_fp)
            cached = self._suggestion_cache.get((pseudonym, target))
            if cached is not None and cached[0] == cache_token:
                return cached[1]
            active = {iv.id for iv in ivs if iv.active_at(anchor)}
            vec = self._feature_vector(latest, active, slot.serving)
            suggestions = simulate_interventions(
                slot.serving, vec, list(self.config.interventions), self.config.max_combo,
                target, self.config.schema)
            self.stats["simulations_computed"] += 1
            payload = [s.to_json() for s in suggestions]
            self._suggestion_cache[(pseudonym, target)] = (cache_token, payload)
            return payload

    # -- encrypted inference ----------------------------------------------------------

    def he_predict_vector(self, key: ModelKey, features: Sequence[float]) -> float:
        if not self.config.he_enabled:
            raise FeatureDisabled("HE is not enabled on this edge")
        enc = encrypt_values(self.config.more_key, np.asarray(features, dtype=float),
                             self._he_rng)
        request_id = self.client.submit_inference(
            str(key), [cell.ravel().tolist() for cell in enc])
        for _ in range(self.config.he_max_polls):
            out = self.client.poll_inference(request_id)
            if out["status"] == "done":
                return decrypt(self.config.more_key, Ciphertext.from_json(out["result"]))
            if self.config.poll_sleep > 0:
                time.sleep(self.config.poll_sleep)
        raise HETimeout(f"inference {request_id} still pending after "
                        f"{self.config.he_max_polls} polls")

    def he_predict(self, pseudonym: str, key: ModelKey) -> float:
        """Encrypt the patient's current feature vector, submit it for encrypted
        inference, poll with a bounded budget, and decrypt locally."""
        with self._lock:
            if not self.config.he_enabled:
                raise FeatureDisabled("HE is not enabled on this edge")
            history, obs, ivs, anchor = self._patient_state(pseudonym)
            if not history:
                raise NotFound(f"no records for patient {pseudonym!r}")
            latest = history[-1]
            active = {iv.id for iv in ivs if iv.active_at(anchor)}
            slot = self.slots.get(str(key))
            reference = slot.serving if slot and slot.serving else None
            if reference is None:
                means = tuple(0.0 for _ in range(self.config.schema.arity))
                reference = ml.LinearModel(means, 0.0, means,
                                           tuple(1.0 for _ in means),
                                           self.config.schema.schema_hash, "regression", 0)
            vec = self._feature_vector(latest, active, reference)
            return self.he_predict_vector(key, vec)

    # -- cloud task handling -------------------------------------------------------

    def process_tasks(self) -> int:
        """Poll the cloud once and handle surrogate-training directives."""
        if self.client is None:
            return 0
        with self._lock:
            self._pump_tasks()
            handled = 0
            while True:
                task = self._take_task(("surrogate_train",))
                if task is None:
                    break
                self._handle_surrogate_task(task)
                handled += 1
            return handled

    def _handle_surrogate_task(self, task: dict) -> None:
        key = ModelKey.parse(task["model_key"])
        slot = self._slot(key)
        if slot.train is None:
            self.train_local(key)
        rows = [list(r) for r in slot.train.rows]
        cfg = replace(self.config.surrogate_training,
                      task="regression",
                      max_depth=self.config.training.max_depth,
                      min_leaf_samples=self.config.training.min_leaf_samples)
        if task.get("use_he"):
            from ..explain import surrogate_via_encrypted_labels

            node = self

            class _Client:
                def submit(self, enc_features):
                    return node.client.submit_inference(
                        str(key), [cell.ravel().tolist() for cell in enc_features])

                def poll(self, request_id):
                    out = node.client.poll_inference(request_id)
                    if out["status"] != "done":
                        return None
                    return Ciphertext.from_json(out["result"])

            surrogate = surrogate_via_encrypted_labels(
                _Client(), rows, self.config.more_key, task["kind"], cfg,
                SurrogateRef(key, 0), slot.train.schema_hash, rng=self._he_rng,
                max_polls=self.config.he_max_polls,
                cancer_type=key.cancer_type, target_variable=key.target_variable)
        else:
            record = self.client.fetch_global(str(key))
            if record is None:
                return
            primary = ml.deserialize_model(canonical.dump_bytes(record["model"]))
            surrogate = train_surrogate(
                lambda x: ml.predict(primary, x), rows, task["kind"], cfg,
                SurrogateRef(key, record["version"]), slot.train.schema_hash,
                cancer_type=key.cancer_type, target_variable=key.target_variable)
        self.client.submit_surrogate(str(key), task["kind"], surrogate.inner.to_json(),
                                     surrogate.fidelity_r2, slot.train.n)

    # -- read model & misc -----------------------------------------------------------

    def list_patients(self) -> list[dict]:
        with self._lock:
            out = []
            for token in sorted(set(self.records) | set(self.observations)):
                history = self.records.get(token, [])
                out.append({
                    "pseudonym": token,
                    "cancer_type": history[-1].cancer_type if history else None,
                    "records": len(history),
                    "observations": len(self.observations.get(token, [])),
                })
            return out

    def state_hash(self) -> str:
        """Content hash over every stored collection (read-only query checks)."""
        with self._lock:
            body = {
                "records": {t: [r.to_json() for r in rs] for t, rs in self.records.items()},
                "observations": {t: [o.to_json() for o in os_] for t, os_ in self.observations.items()},
                "interventions": {t: [i.to_json() for i in ivs] for t, ivs in self.interventions.items()},
                "wearables": {t: sorted(d) for t, d in self.wearables.items()},
            }
            return canonical.sha256(canonical.dump_bytes(body))


class FederationSession:
    """Cooperative client-side driver for one federation pass on one model key.

    ``step()`` performs at most a couple of cloud interactions and returns the
    session state, so a single-threaded harness can interleave many edges.
    """

    def __init__(self, edge: EdgeNode, key: ModelKey):
        self.edge = edge
        self.key = key
        self.key_s = str(key)
        self.state = "declare"
        self.round: int | None = None
        self.base: dict | None = None
        self.result: str | None = None

    def step(self) -> str:
        edge, client = self.edge, self.edge.client
        if self.state == "declare":
            directive = client.declare_training(self.key_s)
            if directive["mode"] == "incremental":
                base_record = directive.get("base")
                self.base = base_record["model"] if base_record else None
                self.state = "submit_incremental"
            else:
                self.round = directive["round"]
                self.base = directive.get("base")
                self.state = "train_round"
            return self.state

        if self.state == "submit_incremental":
            model = edge._train_for_round(self.key, self.base)
            try:
                client.submit_update(self.key_s, ml.serialize_model(model),
                                     edge._slot(self.key).train.n)
            except StaleRound:
                self.state = "declare"
                return self.state
            self.result = "stored"
            self.state = "done"
            return self.state

        if self.state == "train_round":
            model = edge._train_for_round(self.key, self.base)
            try:
                out = client.submit_update(self.key_s, ml.serialize_model(model),
                                           edge._slot(self.key).train.n, round_no=self.round)
            except StaleRound:
                self.state = "declare"
                return self.state
            except ProtocolError:
                # The session finalized between our poll and this submit; the
                # final notice is (or will be) in the task queue.
                self.state = "polling"
                return self.state
            if out["status"] == "final":
                self.result = "final"
                self.state = "done"
            elif out["status"] == "round_complete":
                self.round = out["round"]
                self.base = out["base"]
            else:
                self.state = "polling"
            return self.state

        if self.state == "polling":
            edge._pump_tasks()
            while True:
                task = edge._take_task(("federation_round", "federation_final",
                                        "federation_aborted"), self.key_s)
                if task is None:
                    return self.state
                if task["type"] == "federation_round":
                    if self.round is not None and task["round"] <= self.round:
                        continue  # superseded round directive, drop it
                    self.round = task["round"]
                    self.base = task["base"]
                    self.state = "train_round"
                elif task["type"] == "federation_final":
                    self.result = "final"
                    self.state = "done"
                else:
                    self.result = "aborted"
                    self.state = "aborted"
                return self.state

        return self.state
