"""Shared fixtures: a small deployment schema and synthetic HIS payload builders."""

import numpy as np
import pytest

from fedcare.cloud import CloudConfig, CloudService
from fedcare.crypto import keygen
from fedcare.domain import FeatureSchema, Intervention, intervention_feature
from fedcare.edge import EdgeConfig, EdgeNode
from fedcare.ml import TrainingConfig
from fedcare.transport import InProcessCloudClient, SimClock, TransportLog

SECRET = "test-admission-secret"
PSEUDO_KEY = b"edge-pseudonymization-key-000001"

SCHEMA = FeatureSchema((
    ("age_scaled", "numeric"),
    ("months_since_treatment", "numeric"),
    ("steps_daily", "numeric"),
    ("sleep_quality", "numeric"),
    (intervention_feature("exercise"), "binary"),
    (intervention_feature("counseling"), "binary"),
))

CATALOG = (
    Intervention("exercise", "non_pharmacological", "Exercise programme", 0),
    Intervention("counseling", "non_pharmacological", "Counseling", 0),
)

# Generative truth used by payload builders (targets clipped to [0, 100]).
COEFF = {
    "overall_qol": {"_bias": 58.0, "age_scaled": -6.0, "months_since_treatment": 1.5,
                    "steps_daily": 4.0, "sleep_quality": 3.0,
                    intervention_feature("exercise"): 5.0,
                    intervention_feature("counseling"): 2.0},
    "fatigue": {"_bias": 45.0, "age_scaled": 5.0, "months_since_treatment": -1.0,
                "steps_daily": -3.0, "sleep_quality": -2.0,
                intervention_feature("exercise"): -4.0,
                intervention_feature("counseling"): -1.0},
}

TRAIN_CFG = TrainingConfig(learning_rate=0.02, epochs=1500, ridge_lambda=1e-4)

DAY = 86_400
T0 = 1_700_000_000


def make_his_payload(edge_index: int, n_patients: int, seed: int, noise_sigma: float = 4.0,
                     observations_per_patient: int = 3, exercise_rate: float = 0.5):
    """Synthetic HIS batch with linear generative targets; returns (payload, patient_ids)."""
    rng = np.random.default_rng([seed, edge_index])
    records, observations, interventions = [], [], []
    patient_ids = []
    for i in range(n_patients):
        pid = f"P-{edge_index:02d}-{i:04d}"
        patient_ids.append(pid)
        base = {
            "age_scaled": float(rng.uniform(0.2, 0.9)),
            "steps_daily": float(rng.normal(0.0, 1.0)),
            "sleep_quality": float(rng.normal(0.0, 1.0)),
        }
        spans = {}
        for iv_id, name, rate in (("exercise", "Exercise programme", exercise_rate),
                                  ("counseling", "Counseling", 0.35)):
            if rng.uniform() < rate:
                start = T0 + int(rng.integers(20, 40)) * DAY
                spans[iv_id] = start
                interventions.append({"patient_id": pid, "id": iv_id,
                                      "kind": "non_pharmacological", "name": name,
                                      "start": start, "end": None})
        for k in range(observations_per_patient):
            t_rec = T0 + k * 30 * DAY
            t_obs = t_rec + DAY
            features = dict(base, months_since_treatment=float(k))
            records.append({"patient_id": pid, "cancer_type": "breast",
                            "features": features, "recorded_at": t_rec})
            full = dict(features)
            for iv_id in ("exercise", "counseling"):
                active = iv_id in spans and spans[iv_id] <= t_obs
                full[intervention_feature(iv_id)] = 1.0 if active else 0.0
            obs_entry = {"patient_id": pid, "measured_at": t_obs, "issue_scores": {}}
            for target, coef in COEFF.items():
                value = coef["_bias"] + sum(coef[f] * full[f] for f in full)
                value += float(rng.normal(0.0, noise_sigma))
                value = float(min(100.0, max(0.0, value)))
                if target == "overall_qol":
                    obs_entry["overall_qol"] = value
                else:
                    obs_entry["issue_scores"][target] = value
            observations.append(obs_entry)
    return ({"records": records, "observations": observations,
             "interventions": interventions}, patient_ids)


class Deployment:
    """One in-process cloud plus helpers to boot edges against it."""

    def __init__(self, **cloud_cfg):
        self.clock = SimClock()
        self.log = TransportLog()
        defaults = dict(admission_secret=SECRET, rounds=3, round_deadline=30,
                        he_training=TRAIN_CFG)
        defaults.update(cloud_cfg)
        self.cloud = CloudService(CloudConfig(**defaults), self.clock)
        self.more_key = keygen(2024)

    def make_edge(self, edge_id: str, register: bool = True, **overrides) -> EdgeNode:
        cfg = dict(
            edge_id=edge_id,
            pseudonymization_key=PSEUDO_KEY,
            schema=SCHEMA,
            admission_secret=SECRET,
            interventions=CATALOG,
            training=TRAIN_CFG,
            he_enabled=False,
        )
        cfg.update(overrides)
        if cfg.get("he_enabled"):
            cfg.setdefault("more_key", self.more_key)
        client = InProcessCloudClient(self.cloud, edge_id, self.log, self.clock)
        edge = EdgeNode(EdgeConfig(**cfg), self.clock, client)
        if register:
            edge.register_with_cloud()
        return edge


@pytest.fixture
def deployment():
    return Deployment()


def drive_sessions(sessions, max_iterations=500):
    """Round-robin cooperative federation stepping until every session settles."""
    for _ in range(max_iterations):
        pending = [s for s in sessions if s.state not in ("done", "aborted")]
        if not pending:
            return
        for session in pending:
            session.step()
    raise AssertionError("federation sessions did not settle")
