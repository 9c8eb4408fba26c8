"""Scenario specification and deterministic synthetic-cohort generation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..domain import FeatureSchema, OVERALL_QOL, intervention_feature
from ..errors import ValidationError
from ..ml import TrainingConfig

DAY = 86_400
EPOCH_START = 1_700_000_000


@dataclass
class ChurnEvent:
    time_offset: int
    action: str  # join | leave
    edge_id: str
    cohort_size: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "ChurnEvent":
        if obj["action"] not in ("join", "leave"):
            raise ValidationError(f"unknown churn action {obj['action']!r}")
        return cls(int(obj["time_offset"]), obj["action"], obj["edge_id"],
                   int(obj.get("cohort_size", 0)))


@dataclass
class ScenarioSpec:
    name: str
    seed: int
    n_edges: int
    cohort_size: list[int]
    observations_per_patient: int
    cancer_type: str
    targets: list[str]
    schema: FeatureSchema
    noise_sigma: float
    bias: dict[str, float]
    coefficients: dict[str, dict[str, float]]
    numeric_features: dict[str, dict[str, float]]
    binary_rates: dict[str, float]
    steps: dict[str, list[dict]]  # optional non-linear generative terms
    iid: bool
    covariate_shift: float
    interventions: list[dict]
    churn_events: list[ChurnEvent]
    rounds: int
    round_deadline: int
    he_enabled: bool
    he_targets: list[str]
    family: str
    task: str
    training: TrainingConfig
    surrogate_training: TrainingConfig
    surrogates: list[str]
    horizon: int
    sample_patients: int
    eval_cohort_size: int
    checks: dict[str, float | bool]
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioSpec":
        try:
            n_edges = int(obj["n_edges"])
            cohort = obj["cohort_size"]
            cohort_size = [int(cohort)] * n_edges if isinstance(cohort, int) else \
                [int(c) for c in cohort]
            if len(cohort_size) != n_edges:
                raise ValidationError("cohort_size list length must equal n_edges")
            gen = obj["generative"]
            training = TrainingConfig(task=obj.get("task", "regression"),
                                      **obj.get("training", {}))
            surrogate_training = TrainingConfig(
                task="regression", **obj.get("surrogate_training",
                                             {"learning_rate": 0.05, "epochs": 4000,
                                              "ridge_lambda": 0.0}))
            spec = cls(
                name=obj["name"],
                seed=int(obj["seed"]),
                n_edges=n_edges,
                cohort_size=cohort_size,
                observations_per_patient=int(obj.get("observations_per_patient", 3)),
                cancer_type=obj.get("cancer_type", "breast"),
                targets=list(obj["targets"]),
                schema=FeatureSchema.from_json(obj["schema"]),
                noise_sigma=float(gen.get("noise_sigma", 0.0)),
                bias={k: float(v) for k, v in gen["bias"].items()},
                coefficients={t: {f: float(v) for f, v in c.items()}
                              for t, c in gen["coefficients"].items()},
                numeric_features={f: {"mean": float(p["mean"]), "std": float(p["std"])}
                                  for f, p in gen.get("numeric_features", {}).items()},
                binary_rates={f: float(r) for f, r in gen.get("binary_rates", {}).items()},
                steps={t: list(s) for t, s in gen.get("steps", {}).items()},
                iid=bool(obj.get("iid", True)),
                covariate_shift=float(obj.get("covariate_shift", 0.0)),
                interventions=list(obj.get("interventions", [])),
                churn_events=[ChurnEvent.from_json(e) for e in obj.get("churn_events", [])],
                rounds=int(obj.get("rounds", 5)),
                round_deadline=int(obj.get("round_deadline", 30)),
                he_enabled=bool(obj.get("he_enabled", False)),
                he_targets=list(obj.get("he_targets", [])),
                family=obj.get("family", "linear"),
                task=obj.get("task", "regression"),
                training=training,
                surrogate_training=surrogate_training,
                surrogates=list(obj.get("surrogates", [])),
                horizon=int(obj.get("horizon", 2)),
                sample_patients=int(obj.get("sample_patients", 2)),
                eval_cohort_size=int(obj.get("eval_cohort_size", 400)),
                checks=dict(obj.get("checks", {})),
                raw=obj,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed scenario spec: {exc!r}") from exc
        times = [e.time_offset for e in spec.churn_events]
        if times != sorted(times):
            raise ValidationError("churn event times must be ordered")
        for target in spec.targets:
            if target not in spec.coefficients or target not in spec.bias:
                raise ValidationError(f"generative model missing target {target!r}")
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioSpec":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot parse scenario spec {path}: {exc}") from exc
        return cls.from_json(obj)

    def true_coefficient_vector(self, target: str) -> tuple[np.ndarray, float]:
        coef = self.coefficients[target]
        vec = np.array([coef.get(name, 0.0) for name in self.schema.names])
        return vec, self.bias[target]


def generate_cohort(spec: ScenarioSpec, edge_index: int, cohort_size: int | None = None):
    """Deterministic synthetic cohort for one edge.

    Returns (his_payload, patient_ids, ground_truth). Features are drawn from
    the spec's per-feature distributions (numeric means shifted per edge when
    not IID), targets are the true linear combination plus Gaussian noise,
    clipped to the QoL range.
    """
    rng = np.random.default_rng([spec.seed, edge_index])
    n = spec.cohort_size[edge_index] if cohort_size is None else cohort_size
    if edge_index < spec.n_edges and not spec.iid:
        shift = spec.covariate_shift * (edge_index - (spec.n_edges - 1) / 2.0)
    else:
        shift = 0.0

    issue_targets = [t for t in spec.targets if t != OVERALL_QOL]
    records, observations, interventions = [], [], []
    patient_ids = []
    clipped = 0
    iv_features = set(spec.schema.intervention_features())

    for i in range(n):
        pid = f"P-{edge_index:02d}-{i:04d}"
        patient_ids.append(pid)
        base = {}
        for name, params in spec.numeric_features.items():
            base[name] = float(rng.normal(params["mean"] + shift, params["std"]))
        for name, rate in spec.binary_rates.items():
            base[name] = float(rng.uniform() < rate)
        spans: dict[str, int] = {}
        for iv in spec.interventions:
            if rng.uniform() < float(iv.get("rate", 0.5)):
                start = EPOCH_START + int(rng.integers(15, 45)) * DAY
                spans[iv["id"]] = start
                interventions.append({
                    "patient_id": pid, "id": iv["id"], "kind": iv["kind"],
                    "name": iv["name"], "start": start, "end": None})
        stagger = int(rng.integers(0, 5)) * DAY
        for k in range(spec.observations_per_patient):
            t_rec = EPOCH_START + stagger + k * 30 * DAY
            t_obs = t_rec + DAY
            features = dict(base)
            if "months_since_treatment" in spec.schema.names:
                features["months_since_treatment"] = float(k)
            records.append({"patient_id": pid, "cancer_type": spec.cancer_type,
                            "features": features, "recorded_at": t_rec})
            full = dict(features)
            for name in iv_features:
                full[name] = 0.0
            for iv_id, start in spans.items():
                feat = intervention_feature(iv_id)
                if feat in iv_features and start <= t_obs:
                    full[feat] = 1.0
            entry = {"patient_id": pid, "measured_at": t_obs, "issue_scores": {}}
            for target in spec.targets:
                coef = spec.coefficients[target]
                value = spec.bias[target] + sum(
                    coef.get(f, 0.0) * v for f, v in full.items())
                for step in spec.steps.get(target, []):
                    if full.get(step["feature"], 0.0) >= step["threshold"]:
                        value += step["delta"]
                if spec.noise_sigma > 0:
                    value += float(rng.normal(0.0, spec.noise_sigma))
                clipped_value = float(min(100.0, max(0.0, value)))
                if clipped_value != value:
                    clipped += 1
                if target == OVERALL_QOL:
                    entry["overall_qol"] = clipped_value
                else:
                    entry["issue_scores"][target] = clipped_value
            if OVERALL_QOL not in spec.targets:
                entry["overall_qol"] = 50.0  # placeholder when QoL itself is not modeled
            for issue in issue_targets:
                entry["issue_scores"].setdefault(issue, 0.0)
            observations.append(entry)

    truth = {
        target: {"coefficients": spec.true_coefficient_vector(target)[0].tolist(),
                 "bias": spec.bias[target]}
        for target in spec.targets
    }
    payload = {"records": records, "observations": observations,
               "interventions": interventions}
    return payload, patient_ids, {"per_target": truth, "clipped": clipped}
