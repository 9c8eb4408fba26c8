"""Training, prediction, evaluation, serialization and averaging for the two
model families used platform-wide: ridge/logistic linear models fit by
deterministic full-batch gradient descent, and CART trees.

The linear recurrence is deliberately written as plain scalar arithmetic on
standardized features so the homomorphic trainer can replay it operation for
operation on ciphertexts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import canonical
from .errors import DecodeError, DivergenceError, EmptyDataset, SchemaMismatch, ValidationError
from .domain import TrainingDataset

_STD_FLOOR = 1e-12


def column_stats(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column population mean and std (constant columns get std 1).

    Uses the moment formulation (sum, sum of squares) so the same numbers can
    be reproduced from plaintext moment metadata shipped alongside encrypted
    datasets.
    """
    n = matrix.shape[0]
    sums = matrix.sum(axis=0)
    sumsqs = (matrix * matrix).sum(axis=0)
    return stats_from_moments(sums, sumsqs, n)


def stats_from_moments(sums: np.ndarray, sumsqs: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    means = np.asarray(sums, dtype=float) / n
    variances = np.maximum(np.asarray(sumsqs, dtype=float) / n - means * means, 0.0)
    stds = np.sqrt(variances)
    stds = np.where(stds < _STD_FLOOR, 1.0, stds)
    return means, stds


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.02
    epochs: int = 1200
    ridge_lambda: float = 1e-4
    max_depth: int = 6
    min_leaf_samples: int = 5
    rng_seed: int = 0
    task: str = "regression"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.ridge_lambda < 0:
            raise ValidationError("ridge_lambda must be >= 0")
        if self.max_depth < 1:
            raise ValidationError("max_depth must be >= 1")
        if self.min_leaf_samples < 1:
            raise ValidationError("min_leaf_samples must be >= 1")
        if self.task not in ("regression", "classification"):
            raise ValidationError(f"unknown task {self.task!r}")


@dataclass(frozen=True)
class LinearModel:
    """Linear (or logistic) model over standardized features.

    ``weights`` and ``bias`` live in standardized space; ``feature_means`` and
    ``feature_stds`` are the stored per-dataset transform applied by
    :func:`predict`.
    """

    weights: tuple[float, ...]
    bias: float
    feature_means: tuple[float, ...]
    feature_stds: tuple[float, ...]
    schema_hash: str
    task: str
    trained_on_n: int

    @property
    def arity(self) -> int:
        return len(self.weights)

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Equivalent raw-space coefficients: f(x) = a.x + c."""
        w = np.asarray(self.weights)
        mu = np.asarray(self.feature_means)
        sd = np.asarray(self.feature_stds)
        a = w / sd
        c = self.bias - float(np.dot(w, mu / sd))
        return a, c

    def to_json(self) -> dict:
        return {
            "family": "linear",
            "task": self.task,
            "schema_hash": self.schema_hash,
            "weights": list(self.weights),
            "bias": self.bias,
            "feature_means": list(self.feature_means),
            "feature_stds": list(self.feature_stds),
            "trained_on_n": self.trained_on_n,
        }


@dataclass(frozen=True)
class TreeModel:
    """CART tree; internal nodes route left when feature value < threshold."""

    nodes: tuple[dict, ...]
    root: int
    schema_hash: str
    task: str
    feature_means: tuple[float, ...]
    trained_on_n: int
    arity: int

    def to_json(self) -> dict:
        return {
            "family": "tree",
            "task": self.task,
            "schema_hash": self.schema_hash,
            "nodes": [dict(n) for n in self.nodes],
            "root": self.root,
            "feature_means": list(self.feature_means),
            "trained_on_n": self.trained_on_n,
            "arity": self.arity,
        }

    def depth(self) -> int:
        def walk(i: int) -> int:
            node = self.nodes[i]
            if "value" in node:
                return 0
            return 1 + max(walk(node["left_child"]), walk(node["right_child"]))
        return walk(self.root)


Model = LinearModel | TreeModel


@dataclass(frozen=True)
class Metrics:
    task: str
    rmse: float | None = None
    mae: float | None = None
    r2: float | None = None
    accuracy: float | None = None
    f1: float | None = None

    def primary(self) -> float:
        """Lower-is-better scalar used for model selection."""
        if self.task == "regression":
            return float(self.rmse)
        return -float(self.accuracy)

    def to_json(self) -> dict:
        if self.task == "regression":
            return {"task": self.task, "rmse": self.rmse, "mae": self.mae, "r2": self.r2}
        return {"task": self.task, "accuracy": self.accuracy, "f1": self.f1}

    @classmethod
    def from_json(cls, obj: dict) -> "Metrics":
        return cls(**obj)


def _dataset_arrays(dataset: TrainingDataset) -> tuple[np.ndarray, np.ndarray]:
    if dataset.n == 0:
        raise EmptyDataset("dataset has no rows")
    X = np.asarray(dataset.rows, dtype=float)
    y = np.asarray(dataset.targets, dtype=float)
    return X, y


def train_linear(dataset: TrainingDataset, config: TrainingConfig,
                 init: LinearModel | None = None) -> LinearModel:
    """Full-batch gradient descent on ridge-regularized squared loss
    (regression) or logistic loss (classification).

    Features are standardized internally and the transform is stored in the
    model. A warm start from ``init`` is converted into the new transform
    space so the represented function is preserved exactly.
    """
    X, y = _dataset_arrays(dataset)
    n, d = X.shape
    mu, sd = column_stats(X)
    Z = (X - mu) / sd

    if init is not None:
        if init.schema_hash != dataset.schema_hash or init.arity != d:
            raise SchemaMismatch("init model does not match dataset schema")
        a, c = init.raw_coefficients()
        w = a * sd
        b = c + float(np.dot(a, mu))
    else:
        w = np.zeros(d)
        b = 0.0

    lr = config.learning_rate
    lam = config.ridge_lambda
    classification = config.task == "classification"
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(config.epochs):
            pred = Z @ w + b
            if classification:
                pred = sigmoid(pred)
            err = pred - y
            loss = float(err @ err)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite loss during linear training")
            grad_w = Z.T @ err / n + lam * w
            grad_b = float(err.sum()) / n
            w = w - lr * grad_w
            b = b - lr * grad_b
    if not (np.isfinite(w).all() and np.isfinite(b)):
        raise DivergenceError("non-finite parameters after linear training")

    return LinearModel(
        weights=tuple(float(v) for v in w),
        bias=float(b),
        feature_means=tuple(float(v) for v in mu),
        feature_stds=tuple(float(v) for v in sd),
        schema_hash=dataset.schema_hash,
        task=config.task,
        trained_on_n=n,
    )


def train_linear_with_retry(dataset: TrainingDataset, config: TrainingConfig,
                            init: LinearModel | None = None, max_retries: int = 5) -> LinearModel:
    """Retry policy for divergence: halve the learning rate, at most 5 times."""
    last: DivergenceError | None = None
    for attempt in range(max_retries + 1):
        try:
            return train_linear(dataset, replace(
                config, learning_rate=config.learning_rate / 2 ** attempt), init)
        except DivergenceError as exc:
            last = exc
    raise last


# -- CART induction ---------------------------------------------------------

def _impurity_sums(y: np.ndarray, classification: bool) -> float:
    """Total impurity mass of a node: SSE for regression, n*Gini for classification."""
    n = y.shape[0]
    if classification:
        p1 = float(y.sum()) / n
        return n * 2.0 * p1 * (1.0 - p1)
    mean = float(y.sum()) / n
    return float(((y - mean) ** 2).sum())


def _best_split(X: np.ndarray, y: np.ndarray, classification: bool,
                min_leaf: int) -> tuple[int, float, float] | None:
    """Exhaustive search over midpoint thresholds of every feature.

    Returns (feature, threshold, gain) of the best candidate, ties resolved to
    the lowest feature index then the lowest threshold; None when no split
    satisfies the min-leaf constraint. When every candidate has zero gain the
    first candidate in tie-break order is still returned (gain 0), so callers
    can split symmetric nodes like XOR corners instead of stalling.
    """
    n, d = X.shape
    if n < 2 * min_leaf:
        return None
    parent = _impurity_sums(y, classification)
    best: tuple[int, float, float] | None = None
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        ys = y[order]
        csum = np.cumsum(ys)
        total = csum[-1]
        if classification:
            # children impurity mass from class-1 prefix counts
            left_n = np.arange(1, n, dtype=float)
            left_pos = csum[:-1]
            right_n = n - left_n
            right_pos = total - left_pos
            child = (2.0 * left_pos * (left_n - left_pos) / left_n
                     + 2.0 * right_pos * (right_n - right_pos) / right_n)
        else:
            csq = np.cumsum(ys * ys)
            left_n = np.arange(1, n, dtype=float)
            right_n = n - left_n
            child = ((csq[:-1] - csum[:-1] ** 2 / left_n)
                     + ((csq[-1] - csq[:-1]) - (total - csum[:-1]) ** 2 / right_n))
        gains = parent - child
        valid = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        for k in np.flatnonzero(valid):
            threshold = (xs[k] + xs[k + 1]) / 2.0
            gain = float(gains[k])
            if best is None or gain > best[2]:
                best = (j, float(threshold), gain)
    return best


def train_tree(dataset: TrainingDataset, config: TrainingConfig) -> TreeModel:
    """Greedy top-down CART induction.

    Split criterion is variance reduction (regression) or Gini impurity
    decrease (classification); thresholds are midpoints of sorted unique
    feature values; growth stops at max_depth, min_leaf_samples, or node
    purity. Leaf values are the node target mean (class-1 probability for
    classification).
    """
    X, y = _dataset_arrays(dataset)
    if config.task == "classification" and not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValidationError("classification targets must be binary 0/1")
    classification = config.task == "classification"
    nodes: list[dict] = []

    def build(idx: np.ndarray, depth: int) -> int:
        sub_y = y[idx]
        node_index = len(nodes)
        nodes.append({})  # placeholder, patched below
        impurity = _impurity_sums(sub_y, classification)
        pure = impurity <= 1e-12 * max(1.0, float(np.abs(sub_y).max()) ** 2) * len(sub_y)
        split = None
        if depth < config.max_depth and not pure:
            split = _best_split(X[idx], sub_y, classification, config.min_leaf_samples)
        if split is None:
            nodes[node_index] = {"value": float(sub_y.sum() / len(sub_y))}
            return node_index
        feature, threshold, _gain = split
        mask = X[idx, feature] < threshold
        left = build(idx[mask], depth + 1)
        right = build(idx[~mask], depth + 1)
        nodes[node_index] = {
            "split_feature_index": int(feature),
            "threshold": float(threshold),
            "left_child": left,
            "right_child": right,
        }
        return node_index

    root = build(np.arange(X.shape[0]), 0)
    mu, _ = column_stats(X)
    return TreeModel(
        nodes=tuple(nodes),
        root=root,
        schema_hash=dataset.schema_hash,
        task=config.task,
        feature_means=tuple(float(v) for v in mu),
        trained_on_n=X.shape[0],
        arity=X.shape[1],
    )


def predict(model: Model, features: Sequence[float]) -> float:
    """Single-instance prediction; classification returns the class-1 probability."""
    x = np.asarray(features, dtype=float)
    if x.shape != (model.arity,):
        raise SchemaMismatch(f"expected {model.arity} features, got {x.shape}")
    if isinstance(model, LinearModel):
        z = (x - np.asarray(model.feature_means)) / np.asarray(model.feature_stds)
        raw = float(np.dot(np.asarray(model.weights), z) + model.bias)
        if model.task == "classification":
            return float(sigmoid(np.asarray([raw]))[0])
        return raw
    node = model.nodes[model.root]
    while "value" not in node:
        if x[node["split_feature_index"]] < node["threshold"]:
            node = model.nodes[node["left_child"]]
        else:
            node = model.nodes[node["right_child"]]
    return float(node["value"])


def predict_batch(model: Model, rows: np.ndarray) -> np.ndarray:
    if isinstance(model, LinearModel):
        Z = (rows - np.asarray(model.feature_means)) / np.asarray(model.feature_stds)
        raw = Z @ np.asarray(model.weights) + model.bias
        return sigmoid(raw) if model.task == "classification" else raw
    return np.asarray([predict(model, row) for row in rows])


def evaluate(model: Model, dataset: TrainingDataset) -> Metrics:
    if dataset.n == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    if model.schema_hash != dataset.schema_hash:
        raise SchemaMismatch("model and dataset schema differ")
    X, y = _dataset_arrays(dataset)
    preds = predict_batch(model, X)
    if model.task == "classification":
        labels = (preds >= 0.5).astype(float)
        accuracy = float((labels == y).mean())
        tp = float(((labels == 1) & (y == 1)).sum())
        fp = float(((labels == 1) & (y == 0)).sum())
        fn = float(((labels == 0) & (y == 1)).sum())
        f1 = 1.0 if (2 * tp + fp + fn) == 0 else 2 * tp / (2 * tp + fp + fn)
        return Metrics(task="classification", accuracy=accuracy, f1=f1)
    err = preds - y
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))
    sse = float((err ** 2).sum())
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        # Constant target: r2 is 1 for an (up to float stall) exact fit, else 0.
        r2 = 1.0 if sse <= 1e-18 * len(y) * max(1.0, float(np.mean(y * y))) else 0.0
    else:
        r2 = 1.0 - sse / sst
    return Metrics(task="regression", rmse=rmse, mae=mae, r2=r2)


def average_models(models: Sequence[LinearModel],
                   weights: Sequence[int] | None = None) -> LinearModel:
    """Element-wise (optionally sample-count weighted) mean of linear models.

    Models sharing an identical standardization transform are averaged in
    place; otherwise each is converted to its raw-space coefficients first so
    the mean is taken in function space, and the result carries an identity
    transform.
    """
    if not models:
        raise ValidationError("average_models requires at least one model")
    first = models[0]
    for m in models[1:]:
        if m.schema_hash != first.schema_hash or m.arity != first.arity:
            raise SchemaMismatch("models disagree on schema")
        if m.task != first.task:
            raise SchemaMismatch("models disagree on task")
    if weights is not None:
        if len(weights) != len(models):
            raise ValidationError("one weight per model required")
        counts = np.asarray(weights, dtype=float)
        if counts.sum() <= 0:
            raise ValidationError("weights must sum to a positive count")
    else:
        counts = np.ones(len(models))
    frac = counts / counts.sum()
    total_n = int(sum(w if weights is not None else m.trained_on_n
                      for w, m in zip(counts, models)))

    same_transform = all(
        m.feature_means == first.feature_means and m.feature_stds == first.feature_stds
        for m in models[1:]
    )
    if same_transform:
        w_avg = np.sum([f * np.asarray(m.weights) for f, m in zip(frac, models)], axis=0)
        b_avg = float(np.sum([f * m.bias for f, m in zip(frac, models)]))
        return replace(first, weights=tuple(float(v) for v in w_avg), bias=b_avg,
                       trained_on_n=total_n)
    raws = [m.raw_coefficients() for m in models]
    a_avg = np.sum([f * a for f, (a, _) in zip(frac, raws)], axis=0)
    c_avg = float(np.sum([f * c for f, (_, c) in zip(frac, raws)]))
    return LinearModel(
        weights=tuple(float(v) for v in a_avg),
        bias=c_avg,
        feature_means=tuple(0.0 for _ in range(first.arity)),
        feature_stds=tuple(1.0 for _ in range(first.arity)),
        schema_hash=first.schema_hash,
        task=first.task,
        trained_on_n=total_n,
    )


def serialize_model(model: Model) -> bytes:
    return canonical.dump_bytes(model.to_json())


def deserialize_model(data: bytes) -> Model:
    obj = canonical.loads(data)
    try:
        family = obj["family"]
        if family == "linear":
            return LinearModel(
                weights=tuple(float(v) for v in obj["weights"]),
                bias=float(obj["bias"]),
                feature_means=tuple(float(v) for v in obj["feature_means"]),
                feature_stds=tuple(float(v) for v in obj["feature_stds"]),
                schema_hash=obj["schema_hash"],
                task=obj["task"],
                trained_on_n=int(obj["trained_on_n"]),
            )
        if family == "tree":
            return TreeModel(
                nodes=tuple(dict(n) for n in obj["nodes"]),
                root=int(obj["root"]),
                schema_hash=obj["schema_hash"],
                task=obj["task"],
                feature_means=tuple(float(v) for v in obj["feature_means"]),
                trained_on_n=int(obj["trained_on_n"]),
                arity=int(obj["arity"]),
            )
        raise DecodeError(f"unknown model family {family!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed model payload: {exc}") from exc
