"""Shapley attributions, surrogate training, and intervention-effect simulation."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .errors import SchemaMismatch, SurrogateTrainingTimeout, ValidationError
from .domain import (
    OVERALL_QOL,
    FeatureSchema,
    Intervention,
    ModelKey,
    TrainingDataset,
    intervention_feature,
)
from . import crypto, ml

PredictFn = Callable[[Sequence[float]], float]

DEFAULT_EXACT_LIMIT = 12
DEFAULT_PERMUTATIONS = 2000


@dataclass(frozen=True)
class Attribution:
    """Per-feature Shapley values for one prediction.

    Efficiency holds by construction: the values sum to the difference between
    the instance prediction and the baseline prediction.
    """

    shapley_values: Mapping[str, float]
    baseline_prediction: float
    instance_prediction: float

    def to_json(self) -> dict:
        return {
            "shapley_values": [
                {"feature": k, "value": float(v)} for k, v in self.shapley_values.items()
            ],
            "baseline_prediction": self.baseline_prediction,
            "instance_prediction": self.instance_prediction,
        }


@dataclass(frozen=True)
class SurrogateRef:
    model_key: ModelKey
    version: int

    def to_json(self) -> dict:
        return {"model_key": str(self.model_key), "version": self.version}


@dataclass(frozen=True)
class SurrogateModel:
    inner: ml.Model
    primary_ref: SurrogateRef
    fidelity_r2: float

    def to_json(self) -> dict:
        return {
            "inner": self.inner.to_json(),
            "primary_ref": self.primary_ref.to_json(),
            "fidelity_r2": self.fidelity_r2,
        }


@dataclass(frozen=True)
class InterventionSuggestion:
    intervention_ids: frozenset[str]
    predicted_delta: float
    rank: int

    def to_json(self) -> dict:
        return {
            "intervention_ids": sorted(self.intervention_ids),
            "predicted_delta": self.predicted_delta,
            "rank": self.rank,
        }


def _exact_shapley(values: list[float], d: int) -> np.ndarray:
    """Exact Shapley from the cached coalition-value table (index = bitmask)."""
    fact = [math.factorial(k) for k in range(d + 1)]
    denom = fact[d]
    weights = [fact[s] * fact[d - 1 - s] / denom for s in range(d)]
    phi = np.zeros(d)
    for i in range(d):
        bit = 1 << i
        acc = 0.0
        for mask in range(1 << d):
            if mask & bit:
                continue
            s = bin(mask).count("1")
            acc += weights[s] * (values[mask | bit] - values[mask])
        phi[i] = acc
    return phi


def _sampled_shapley(coalition_value: Callable[[int], float], d: int,
                     permutations: int, rng: np.random.Generator) -> np.ndarray:
    phi = np.zeros(d)
    cache: dict[int, float] = {}

    def value(mask: int) -> float:
        if mask not in cache:
            cache[mask] = coalition_value(mask)
        return cache[mask]

    for _ in range(permutations):
        order = rng.permutation(d)
        mask = 0
        prev = value(0)
        for i in order:
            mask |= 1 << i
            cur = value(mask)
            phi[i] += cur - prev
            prev = cur
    return phi / permutations


def shapley(predict_fn: PredictFn, instance: Sequence[float], background: Sequence[float],
            exact_limit: int = DEFAULT_EXACT_LIMIT, permutations: int = DEFAULT_PERMUTATIONS,
            rng_seed: int = 0, feature_names: Sequence[str] | None = None) -> Attribution:
    """Shapley attribution of ``predict_fn`` at ``instance`` against ``background``.

    A coalition's value is the prediction on the hybrid vector taking coalition
    features from the instance and the rest from the background. Dimensions up
    to ``exact_limit`` are solved by exact enumeration of all 2^d coalitions;
    larger ones by seeded permutation sampling. Either way the efficiency
    residual (zero for the exact path up to float noise) is redistributed
    proportionally to |phi| so the axiom holds on every produced attribution.
    """
    inst = np.asarray(instance, dtype=float)
    bg = np.asarray(background, dtype=float)
    if inst.shape != bg.shape or inst.ndim != 1:
        raise SchemaMismatch(f"instance shape {inst.shape} != background shape {bg.shape}")
    d = inst.shape[0]
    if feature_names is None:
        feature_names = [f"f{i}" for i in range(d)]
    if len(feature_names) != d:
        raise SchemaMismatch("feature_names arity mismatch")

    def coalition_value(mask: int) -> float:
        hybrid = bg.copy()
        for i in range(d):
            if mask & (1 << i):
                hybrid[i] = inst[i]
        return float(predict_fn(hybrid))

    if d <= exact_limit:
        values = [coalition_value(mask) for mask in range(1 << d)]
        phi = _exact_shapley(values, d)
        baseline, full = values[0], values[-1]
    else:
        rng = np.random.default_rng(rng_seed)
        baseline = coalition_value(0)
        full = coalition_value((1 << d) - 1)
        phi = _sampled_shapley(coalition_value, d, permutations, rng)

    residual = (full - baseline) - float(phi.sum())
    magnitude = float(np.abs(phi).sum())
    if magnitude > 0.0:
        phi = phi + residual * np.abs(phi) / magnitude
    elif d > 0:
        phi = phi + residual / d

    return Attribution(
        shapley_values={name: float(v) for name, v in zip(feature_names, phi)},
        baseline_prediction=baseline,
        instance_prediction=full,
    )


def _labeled_dataset(feature_rows: Sequence[Sequence[float]], labels: Sequence[float],
                     schema_hash: str, cancer_type: str, target_variable: str) -> TrainingDataset:
    return TrainingDataset(
        schema_hash=schema_hash,
        cancer_type=cancer_type,
        target_variable=target_variable,
        rows=tuple(tuple(float(v) for v in row) for row in feature_rows),
        targets=tuple(float(v) for v in labels),
    )


def train_surrogate(predict_fn: PredictFn, feature_rows: Sequence[Sequence[float]],
                    kind: str, config: ml.TrainingConfig, primary_ref: SurrogateRef,
                    schema_hash: str, cancer_type: str = "",
                    target_variable: str = "") -> SurrogateModel:
    """Train an interpretable stand-in by relabelling rows with primary predictions.

    Fidelity is the R^2 of the surrogate against those labels on the same rows.
    """
    if len(feature_rows) < 1:
        raise ValidationError("surrogate training requires at least one row")
    labels = [float(predict_fn(row)) for row in feature_rows]
    dataset = _labeled_dataset(feature_rows, labels, schema_hash, cancer_type, target_variable)
    if kind == "linear":
        inner: ml.Model = ml.train_linear_with_retry(dataset, config)
    elif kind == "tree":
        inner = ml.train_tree(dataset, config)
    else:
        raise ValidationError(f"unknown surrogate kind {kind!r}")
    fidelity = ml.evaluate(inner, dataset).r2
    return SurrogateModel(inner=inner, primary_ref=primary_ref, fidelity_r2=float(fidelity))


class EncryptedInferenceClient(Protocol):
    """Minimal client surface for encrypted label acquisition."""

    def submit(self, enc_features: np.ndarray) -> str: ...

    def poll(self, request_id: str) -> crypto.Ciphertext | None: ...


def surrogate_via_encrypted_labels(
    client: EncryptedInferenceClient, feature_rows: Sequence[Sequence[float]],
    key: crypto.MoreKey, kind: str, config: ml.TrainingConfig, primary_ref: SurrogateRef,
    schema_hash: str, rng: np.random.Generator, max_polls: int = 100,
    cancer_type: str = "", target_variable: str = "") -> SurrogateModel:
    """Label rows through the encrypted-inference queue, then train a surrogate.

    Each row is encrypted, submitted as an inference request, polled until the
    encrypted answer arrives, and decrypted into a label.
    """
    if len(feature_rows) < 1:
        raise ValidationError("surrogate training requires at least one row")
    labels: list[float] = []
    for row in feature_rows:
        enc = crypto.encrypt_values(key, np.asarray(row, dtype=float), rng)
        request_id = client.submit(enc)
        result = None
        for _ in range(max_polls):
            result = client.poll(request_id)
            if result is not None:
                break
        if result is None:
            raise SurrogateTrainingTimeout(
                f"inference request {request_id} still pending after {max_polls} polls")
        labels.append(crypto.decrypt(key, result))
    dataset = _labeled_dataset(feature_rows, labels, schema_hash, cancer_type, target_variable)
    if kind == "linear":
        inner: ml.Model = ml.train_linear_with_retry(dataset, config)
    elif kind == "tree":
        inner = ml.train_tree(dataset, config)
    else:
        raise ValidationError(f"unknown surrogate kind {kind!r}")
    fidelity = ml.evaluate(inner, dataset).r2
    return SurrogateModel(inner=inner, primary_ref=primary_ref, fidelity_r2=float(fidelity))


def simulate_interventions(model: ml.Model, patient_features: Sequence[float],
                           candidates: Sequence[Intervention], max_combo: int,
                           target_variable: str, schema: FeatureSchema) -> list[InterventionSuggestion]:
    """Predicted effect of every candidate subset of size <= max_combo.

    Each subset's indicator features are switched on (all other candidates
    off), the model is re-queried, and the delta against the all-off baseline
    is reported. Beneficial means positive for overall QoL and negative for
    issue scales. Deltas are model predictions, not estimated causal effects.
    """
    if max_combo < 1:
        raise ValidationError("max_combo must be >= 1")
    indices: dict[str, int] = {}
    for cand in candidates:
        feat = intervention_feature(cand.id)
        if feat not in schema.names:
            raise SchemaMismatch(f"candidate {cand.id!r} has no indicator feature {feat!r}")
        indices[cand.id] = schema.index_of(feat)

    base = np.asarray(patient_features, dtype=float).copy()
    for idx in indices.values():
        base[idx] = 0.0
    baseline = ml.predict(model, base)

    scored: list[tuple[float, int, tuple[str, ...], float]] = []
    ids = sorted(indices)
    for size in range(1, max_combo + 1):
        for combo in itertools.combinations(ids, size):
            vec = base.copy()
            for cid in combo:
                vec[indices[cid]] = 1.0
            delta = ml.predict(model, vec) - baseline
            sort_delta = -delta if target_variable == OVERALL_QOL else delta
            scored.append((sort_delta, size, combo, delta))

    scored.sort(key=lambda item: (item[0], item[1], item[2]))
    return [
        InterventionSuggestion(intervention_ids=frozenset(combo), predicted_delta=float(delta), rank=i + 1)
        for i, (_, _, combo, delta) in enumerate(scored)
    ]
