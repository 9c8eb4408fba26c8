"""Shared data model: patients, QoL observations, interventions, schemas, datasets.

Everything here is an immutable value; operations are pure functions. Feature
vectors are dense numeric, categoricals pre-encoded as binary indicators, and
timestamps are integer UTC seconds so every wire payload is byte-reproducible.
"""

from __future__ import annotations

import hashlib
import hmac
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from . import canonical
from .errors import EmptyDataset, ValidationError

CANCER_TYPES = ("breast", "prostate", "head_neck")

# QoL issue scales shipped as deployment defaults; overall_qol is higher-is-better,
# every issue scale is lower-is-better.
DEFAULT_ISSUES = ("fatigue", "pain", "anxiety", "sleep_disorder", "appetite_loss")

OVERALL_QOL = "overall_qol"

MODEL_FAMILIES = ("linear", "tree")
TASKS = ("regression", "classification")

# Interventions enter models as binary indicator features under this prefix.
INTERVENTION_FEATURE_PREFIX = "intervention_"


def intervention_feature(intervention_id: str) -> str:
    return INTERVENTION_FEATURE_PREFIX + intervention_id


@dataclass(frozen=True, order=True)
class Pseudonym:
    """Opaque 32-hex-char patient identifier produced by :func:`pseudonymize`."""

    token: str

    def __post_init__(self) -> None:
        if len(self.token) != 32 or any(c not in "0123456789abcdef" for c in self.token):
            raise ValidationError(f"pseudonym token must be 32 lowercase hex chars, got {self.token!r}")

    def to_json(self) -> str:
        return self.token


def pseudonymize(patient_id: str, key: bytes) -> Pseudonym:
    """Deterministic keyed one-way mapping from a raw patient id to a pseudonym.

    HMAC-SHA256 truncated to 128 bits, hex encoded. Same (id, key) always
    yields the same token; distinct keys yield unrelated tokens.
    """
    if not patient_id:
        raise ValidationError("patient_id must be non-empty")
    if not key:
        raise ValidationError("pseudonymization key must be present")
    digest = hmac.new(key, patient_id.encode("utf-8"), hashlib.sha256).hexdigest()
    return Pseudonym(digest[:32])


@dataclass(frozen=True)
class PatientRecord:
    pseudonym: Pseudonym
    cancer_type: str
    features: Mapping[str, float]
    recorded_at: int  # UTC seconds

    def to_json(self) -> dict:
        return {
            "pseudonym": self.pseudonym.token,
            "cancer_type": self.cancer_type,
            "features": {k: float(v) for k, v in sorted(self.features.items())},
            "recorded_at": int(self.recorded_at),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatientRecord":
        return cls(
            pseudonym=Pseudonym(obj["pseudonym"]),
            cancer_type=obj["cancer_type"],
            features=dict(obj["features"]),
            recorded_at=int(obj["recorded_at"]),
        )


@dataclass(frozen=True)
class QoLObservation:
    pseudonym: Pseudonym
    measured_at: int
    overall_qol: float  # [0, 100], higher is better
    issue_scores: Mapping[str, float]  # [0, 100] each, lower is better

    def __post_init__(self) -> None:
        for name, score in [(OVERALL_QOL, self.overall_qol), *self.issue_scores.items()]:
            if not (isinstance(score, (int, float)) and math.isfinite(score) and 0.0 <= score <= 100.0):
                raise ValidationError(f"QoL score {name}={score!r} outside [0, 100]")

    def target_value(self, target_variable: str) -> float:
        if target_variable == OVERALL_QOL:
            return float(self.overall_qol)
        if target_variable in self.issue_scores:
            return float(self.issue_scores[target_variable])
        raise ValidationError(f"unknown target variable {target_variable!r}")

    def to_json(self) -> dict:
        return {
            "pseudonym": self.pseudonym.token,
            "measured_at": int(self.measured_at),
            "overall_qol": float(self.overall_qol),
            "issue_scores": {k: float(v) for k, v in sorted(self.issue_scores.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QoLObservation":
        return cls(Pseudonym(obj["pseudonym"]), int(obj["measured_at"]),
                   float(obj["overall_qol"]), dict(obj["issue_scores"]))


@dataclass(frozen=True)
class Intervention:
    id: str
    kind: str  # pharmacological | non_pharmacological
    name: str
    start: int
    end: int | None = None  # None = ongoing

    def __post_init__(self) -> None:
        if self.kind not in ("pharmacological", "non_pharmacological"):
            raise ValidationError(f"unknown intervention kind {self.kind!r}")
        if self.end is not None and self.start > self.end:
            raise ValidationError(f"intervention {self.id}: start after end")

    def active_at(self, t: int) -> bool:
        """Active means start <= t < end; open-ended interventions stay active."""
        return self.start <= t and (self.end is None or t < self.end)

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind, "name": self.name,
                "start": int(self.start), "end": None if self.end is None else int(self.end)}

    @classmethod
    def from_json(cls, obj: dict) -> "Intervention":
        return cls(obj["id"], obj["kind"], obj["name"], int(obj["start"]),
                   None if obj.get("end") is None else int(obj["end"]))


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list; the order is the canonical feature-vector order."""

    entries: tuple[tuple[str, str], ...]  # (name, "numeric" | "binary")
    schema_hash: str = field(init=False)

    def __post_init__(self) -> None:
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValidationError("feature names must be unique")
        for name, kind in self.entries:
            if kind not in ("numeric", "binary"):
                raise ValidationError(f"feature {name!r}: unknown kind {kind!r}")
        object.__setattr__(self, "schema_hash",
                           canonical.content_hash64([[n, k] for n, k in self.entries]))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.entries)

    @property
    def arity(self) -> int:
        return len(self.entries)

    def index_of(self, name: str) -> int:
        return self.names.index(name)

    def intervention_features(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n.startswith(INTERVENTION_FEATURE_PREFIX))

    def to_json(self) -> list:
        return [{"name": n, "kind": k} for n, k in self.entries]

    @classmethod
    def from_json(cls, obj: Iterable[Mapping[str, str]]) -> "FeatureSchema":
        return cls(tuple((e["name"], e["kind"]) for e in obj))


@dataclass(frozen=True)
class TrainingDataset:
    schema_hash: str
    cancer_type: str
    target_variable: str
    rows: tuple[tuple[float, ...], ...]
    targets: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.rows) != len(self.targets):
            raise ValidationError("row and target counts differ")
        arities = {len(r) for r in self.rows}
        if len(arities) > 1:
            raise ValidationError("rows have inconsistent arity")

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def arity(self) -> int:
        return len(self.rows[0]) if self.rows else 0

    def to_json(self) -> dict:
        return {
            "schema_hash": self.schema_hash,
            "cancer_type": self.cancer_type,
            "target_variable": self.target_variable,
            "rows": [list(r) for r in self.rows],
            "targets": list(self.targets),
            "n": self.n,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingDataset":
        return cls(obj["schema_hash"], obj["cancer_type"], obj["target_variable"],
                   tuple(tuple(float(x) for x in r) for r in obj["rows"]),
                   tuple(float(t) for t in obj["targets"]))


@dataclass(frozen=True, order=True)
class ModelKey:
    """Identifies one model slot: what is predicted, for whom, by which family."""

    cancer_type: str
    target_variable: str
    family: str
    task: str

    def __post_init__(self) -> None:
        if self.family not in MODEL_FAMILIES:
            raise ValidationError(f"unknown model family {self.family!r}")
        if self.task not in TASKS:
            raise ValidationError(f"unknown task {self.task!r}")

    def __str__(self) -> str:
        return f"{self.cancer_type}.{self.target_variable}.{self.family}.{self.task}"

    @classmethod
    def parse(cls, text: str) -> "ModelKey":
        parts = text.split(".")
        if len(parts) != 4:
            raise ValidationError(f"model key must be cancer_type.target.family.task, got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class Violation:
    code: str  # unknown_feature | non_finite | missing_feature
    feature: str

    def __str__(self) -> str:
        return f"{self.code}:{self.feature}"


def validate_record(record: PatientRecord, schema: FeatureSchema,
                    required: Sequence[str] = ()) -> list[Violation]:
    """Return every violation of *record* against *schema*; empty means ok.

    Violations are data, not errors: unknown feature names, non-finite values,
    and (when *required* names are given) missing features.
    """
    violations: list[Violation] = []
    known = set(schema.names)
    for name, value in record.features.items():
        if name not in known:
            violations.append(Violation("unknown_feature", name))
        elif not (isinstance(value, (int, float)) and math.isfinite(value)):
            violations.append(Violation("non_finite", name))
    present = set(record.features)
    for name in required:
        if name not in present:
            violations.append(Violation("missing_feature", name))
    return violations


def _active_indicator_values(schema: FeatureSchema,
                             interventions: Sequence[Intervention], t: int) -> dict[str, float]:
    active = {intervention_feature(iv.id) for iv in interventions if iv.active_at(t)}
    return {name: 1.0 if name in active else 0.0 for name in schema.intervention_features()}


def build_feature_vector(schema: FeatureSchema, features: Mapping[str, float],
                         fill: Mapping[str, float] | None = None) -> list[float | None]:
    """Order *features* canonically; unknown names ignored, missing become
    *fill* values (or None when no fill is given)."""
    out: list[float | None] = []
    for name in schema.names:
        if name in features:
            out.append(float(features[name]))
        elif fill is not None and name in fill:
            out.append(float(fill[name]))
        else:
            out.append(None)
    return out


def extract_training_dataset(
    records: Iterable[PatientRecord],
    observations: Iterable[QoLObservation],
    schema: FeatureSchema,
    cancer_type: str,
    target_variable: str,
    interventions: Mapping[Pseudonym, Sequence[Intervention]] | None = None,
) -> TrainingDataset:
    """Join observations to the most recent prior record and emit one row per pair.

    Each QoL observation joins the latest PatientRecord of the same pseudonym
    with recorded_at <= measured_at; observations with no prior record are
    skipped. Intervention indicator features are overlaid from the spans active
    at measurement time. Missing feature values are filled with the per-extraction
    mean of that feature (0 when a feature never occurs). Output ordering is
    canonical (sorted by pseudonym, then time), making extraction independent of
    input ordering.
    """
    by_patient: dict[Pseudonym, list[PatientRecord]] = {}
    for rec in records:
        if rec.cancer_type == cancer_type:
            by_patient.setdefault(rec.pseudonym, []).append(rec)
    for recs in by_patient.values():
        recs.sort(key=lambda r: r.recorded_at)

    obs_sorted = sorted(
        (o for o in observations if o.pseudonym in by_patient),
        key=lambda o: (o.pseudonym.token, o.measured_at, o.target_value(target_variable)),
    )

    joined: list[tuple[list[float | None], float]] = []
    for obs in obs_sorted:
        candidates = [r for r in by_patient[obs.pseudonym] if r.recorded_at <= obs.measured_at]
        if not candidates:
            continue
        rec = candidates[-1]  # most recent rule
        features = dict(rec.features)
        if interventions is not None:
            features.update(_active_indicator_values(
                schema, interventions.get(obs.pseudonym, ()), obs.measured_at))
        joined.append((build_feature_vector(schema, features),
                       obs.target_value(target_variable)))

    if not joined:
        raise EmptyDataset(f"no joinable rows for ({cancer_type}, {target_variable})")

    # Mean-fill, computed once per extraction over the joined rows.
    fills: list[float] = []
    for j in range(schema.arity):
        present = [row[j] for row, _ in joined if row[j] is not None]
        fills.append(sum(present) / len(present) if present else 0.0)
    rows = tuple(
        tuple(v if v is not None else fills[j] for j, v in enumerate(row))
        for row, _ in joined
    )
    return TrainingDataset(
        schema_hash=schema.schema_hash,
        cancer_type=cancer_type,
        target_variable=target_variable,
        rows=rows,
        targets=tuple(t for _, t in joined),
    )
