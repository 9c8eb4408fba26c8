"""Matrix-conjugation homomorphic encryption and encrypted linear training.

A scalar x is encrypted as C = K @ diag(x, r) @ K^-1 where K is a secret
invertible 2x2 matrix shared by all edge nodes and r is a fresh uniform draw
from [1, 2] occupying the randomization slot. Conjugation commutes with ring
arithmetic, so ciphertext addition and multiplication decrypt to plaintext
addition and multiplication exactly (up to float drift), and an entire
gradient-descent recurrence can be replayed on ciphertexts.

This module implements the scheme for protocol fidelity, not as a security
product: with known plaintext/ciphertext pairs the key is recoverable by
linear algebra.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import canonical
from .errors import KeygenError, MergeError, SchemaMismatch, ValidationError
from .domain import TrainingDataset
from .ml import LinearModel, TrainingConfig, stats_from_moments

_MAX_CONDITION = 100.0
_KEYGEN_ATTEMPTS = 1000


@dataclass(frozen=True)
class MoreKey:
    """Symmetric key: an invertible 2x2 matrix and its inverse."""

    K: np.ndarray
    K_inv: np.ndarray
    seed: int

    def to_json(self) -> dict:
        return {"K": [float(v) for v in self.K.ravel()], "seed": int(self.seed)}

    @classmethod
    def from_json(cls, obj: dict) -> "MoreKey":
        K = np.asarray(obj["K"], dtype=float).reshape(2, 2)
        return cls(K=K, K_inv=np.linalg.inv(K), seed=int(obj["seed"]))


def keygen(seed: int) -> MoreKey:
    """Deterministically generate a key from *seed*.

    Entries are drawn uniformly from [-1, 1]; candidates are rejected until
    the matrix is invertible with condition number at most 100, which keeps
    decryption drift near machine precision.
    """
    rng = np.random.default_rng(seed)
    for _ in range(_KEYGEN_ATTEMPTS):
        K = rng.uniform(-1.0, 1.0, size=(2, 2))
        cond = np.linalg.cond(K)
        if np.isfinite(cond) and cond <= _MAX_CONDITION:
            return MoreKey(K=K, K_inv=np.linalg.inv(K), seed=seed)
    raise KeygenError(f"no acceptable key after {_KEYGEN_ATTEMPTS} draws (seed {seed})")


@dataclass(frozen=True)
class Ciphertext:
    """An encrypted scalar: a 2x2 real matrix."""

    C: np.ndarray

    def to_json(self) -> list[float]:
        return [float(v) for v in self.C.ravel()]

    @classmethod
    def from_json(cls, obj: Sequence[float]) -> "Ciphertext":
        arr = np.asarray(obj, dtype=float)
        if arr.shape != (4,):
            raise ValidationError("ciphertext wire form must be 4 doubles")
        return cls(arr.reshape(2, 2))


def encrypt_values(key: MoreKey, values: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized encryption: values of shape (...) -> matrices of shape (..., 2, 2)."""
    values = np.asarray(values, dtype=float)
    if not np.isfinite(values).all():
        raise ValidationError("cannot encrypt non-finite values")
    r = rng.uniform(1.0, 2.0, size=values.shape)
    diag = np.zeros(values.shape + (2, 2))
    diag[..., 0, 0] = values
    diag[..., 1, 1] = r
    return np.einsum("ab,...bc,cd->...ad", key.K, diag, key.K_inv)


def decrypt_values(key: MoreKey, ciphers: np.ndarray) -> np.ndarray:
    """Vectorized decryption of matrices shaped (..., 2, 2)."""
    return np.einsum("ab,...bc,cd->...ad", key.K_inv, np.asarray(ciphers, dtype=float), key.K)[..., 0, 0]


def encrypt(key: MoreKey, x: float, rng: np.random.Generator) -> Ciphertext:
    return Ciphertext(encrypt_values(key, np.asarray(x, dtype=float), rng))


def decrypt(key: MoreKey, c: Ciphertext) -> float:
    return float(decrypt_values(key, c.C))


def he_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    return Ciphertext(c1.C + c2.C)


def he_mul(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    return Ciphertext(c1.C @ c2.C)


def he_scale(c: Ciphertext, s: float) -> Ciphertext:
    return Ciphertext(float(s) * c.C)


def plain_embed(value: float) -> np.ndarray:
    """Embed a plaintext constant as value * I, which both slots decrypt to.

    K @ (vI) @ K^-1 == vI, so the embedding needs no key and participates in
    homomorphic arithmetic exactly.
    """
    return float(value) * np.eye(2)


@dataclass(frozen=True)
class EncryptedDataset:
    """Element-wise encrypted training data.

    Identification metadata (cancer type, target variable, schema hash, n)
    stays plaintext, as do the per-feature first and second moments that let
    the cloud reproduce the edge-side standardization without encrypted
    division. Shipping those moments is a documented privacy trade-off.
    """

    cancer_type: str
    target_variable: str
    schema_hash: str
    rows: np.ndarray      # (n, d, 2, 2)
    targets: np.ndarray   # (n, 2, 2)
    feature_sums: np.ndarray
    feature_sumsqs: np.ndarray

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])

    @property
    def arity(self) -> int:
        return int(self.rows.shape[1])

    def metadata(self) -> tuple[str, str, str]:
        return (self.cancer_type, self.target_variable, self.schema_hash)

    def to_json(self) -> dict:
        return {
            "cancer_type": self.cancer_type,
            "target_variable": self.target_variable,
            "schema_hash": self.schema_hash,
            "rows": [[[float(v) for v in cell.ravel()] for cell in row] for row in self.rows],
            "targets": [[float(v) for v in cell.ravel()] for cell in self.targets],
            "n": self.n,
            "feature_sums": [float(v) for v in self.feature_sums],
            "feature_sumsqs": [float(v) for v in self.feature_sumsqs],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncryptedDataset":
        d = len(obj["feature_sums"])
        rows = np.asarray(obj["rows"], dtype=float)
        rows = rows.reshape(-1, d, 2, 2) if rows.size else np.zeros((0, d, 2, 2))
        targets = np.asarray(obj["targets"], dtype=float)
        targets = targets.reshape(-1, 2, 2) if targets.size else np.zeros((0, 2, 2))
        return cls(
            cancer_type=obj["cancer_type"],
            target_variable=obj["target_variable"],
            schema_hash=obj["schema_hash"],
            rows=rows,
            targets=targets,
            feature_sums=np.asarray(obj["feature_sums"], dtype=float),
            feature_sumsqs=np.asarray(obj["feature_sumsqs"], dtype=float),
        )


@dataclass(frozen=True)
class EncryptedLinearModel:
    """Linear regression model with encrypted parameters.

    Weights and bias are ciphertexts in standardized feature space; the
    standardization constants are plaintext, mirroring how they travel with
    encrypted datasets.
    """

    weights: np.ndarray  # (d, 2, 2)
    bias: np.ndarray     # (2, 2)
    schema_hash: str
    trained_on_n: int
    feature_means: np.ndarray
    feature_stds: np.ndarray

    @property
    def arity(self) -> int:
        return int(self.weights.shape[0])

    def to_json(self) -> dict:
        return {
            "weights": [[float(v) for v in w.ravel()] for w in self.weights],
            "bias": [float(v) for v in self.bias.ravel()],
            "schema_hash": self.schema_hash,
            "trained_on_n": int(self.trained_on_n),
            "feature_means": [float(v) for v in self.feature_means],
            "feature_stds": [float(v) for v in self.feature_stds],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncryptedLinearModel":
        return cls(
            weights=np.asarray(obj["weights"], dtype=float).reshape(-1, 2, 2),
            bias=np.asarray(obj["bias"], dtype=float).reshape(2, 2),
            schema_hash=obj["schema_hash"],
            trained_on_n=int(obj["trained_on_n"]),
            feature_means=np.asarray(obj["feature_means"], dtype=float),
            feature_stds=np.asarray(obj["feature_stds"], dtype=float),
        )

    def decrypt_model(self, key: MoreKey, task: str = "regression") -> LinearModel:
        """Decrypt into a plaintext LinearModel (edge-side operation)."""
        return LinearModel(
            weights=tuple(float(v) for v in decrypt_values(key, self.weights)),
            bias=float(decrypt_values(key, self.bias)),
            feature_means=tuple(float(v) for v in self.feature_means),
            feature_stds=tuple(float(v) for v in self.feature_stds),
            schema_hash=self.schema_hash,
            task=task,
            trained_on_n=self.trained_on_n,
        )


def encrypt_dataset(key: MoreKey, dataset: TrainingDataset,
                    rng: np.random.Generator) -> EncryptedDataset:
    """Encrypt every feature cell and target of *dataset* element-wise."""
    X = np.asarray(dataset.rows, dtype=float)
    y = np.asarray(dataset.targets, dtype=float)
    if X.size == 0:
        raise ValidationError("cannot encrypt an empty dataset")
    return EncryptedDataset(
        cancer_type=dataset.cancer_type,
        target_variable=dataset.target_variable,
        schema_hash=dataset.schema_hash,
        rows=encrypt_values(key, X, rng),
        targets=encrypt_values(key, y, rng),
        feature_sums=X.sum(axis=0),
        feature_sumsqs=(X * X).sum(axis=0),
    )


def decrypt_dataset(key: MoreKey, enc: EncryptedDataset) -> TrainingDataset:
    X = decrypt_values(key, enc.rows)
    y = decrypt_values(key, enc.targets)
    return TrainingDataset(
        schema_hash=enc.schema_hash,
        cancer_type=enc.cancer_type,
        target_variable=enc.target_variable,
        rows=tuple(tuple(float(v) for v in row) for row in X),
        targets=tuple(float(v) for v in y),
    )


def merge_encrypted_datasets(a: EncryptedDataset, b: EncryptedDataset) -> EncryptedDataset:
    if a.metadata() != b.metadata():
        raise MergeError(f"cannot merge datasets with metadata {a.metadata()} vs {b.metadata()}")
    if b.n == 0:
        return a
    if a.n == 0:
        return b
    if a.arity != b.arity:
        raise MergeError("cannot merge datasets of different arity")
    return EncryptedDataset(
        cancer_type=a.cancer_type,
        target_variable=a.target_variable,
        schema_hash=a.schema_hash,
        rows=np.concatenate([a.rows, b.rows]),
        targets=np.concatenate([a.targets, b.targets]),
        feature_sums=a.feature_sums + b.feature_sums,
        feature_sumsqs=a.feature_sumsqs + b.feature_sumsqs,
    )


def train_encrypted_linear(enc: EncryptedDataset, config: TrainingConfig) -> EncryptedLinearModel:
    """Replay the plaintext full-batch gradient-descent recurrence on ciphertexts.

    Regression only: the logistic link is non-polynomial and has no exact
    homomorphic counterpart under this scheme. Every plaintext constant
    (learning rate, 1/n, ridge strength, standardization constants) enters
    via scalar-matrix products or identity embeddings, so decrypted
    parameters track the plaintext trainer up to floating-point drift.
    """
    if config.task != "regression":
        raise ValidationError("encrypted training supports regression targets only")
    n, d = enc.n, enc.arity
    if n < 1:
        raise ValidationError("encrypted dataset has no rows")
    mu, sd = stats_from_moments(enc.feature_sums, enc.feature_sumsqs, n)

    eye = np.eye(2)
    # Standardize homomorphically: (C - mu*I) * (1/sigma), per feature.
    Z = (enc.rows - eye[None, None] * mu[None, :, None, None]) * (1.0 / sd)[None, :, None, None]
    Y = enc.targets

    W = np.zeros((d, 2, 2))
    B = np.zeros((2, 2))
    lr = config.learning_rate
    lam = config.ridge_lambda
    for _ in range(config.epochs):
        pred = np.einsum("ndab,dbc->nac", Z, W) + B[None]
        err = pred - Y
        grad_w = np.einsum("ndab,nbc->dac", Z, err) / n + lam * W
        grad_b = err.sum(axis=0) / n
        W = W - lr * grad_w
        B = B - lr * grad_b

    return EncryptedLinearModel(
        weights=W,
        bias=B,
        schema_hash=enc.schema_hash,
        trained_on_n=n,
        feature_means=mu,
        feature_stds=sd,
    )


def predict_encrypted(model: EncryptedLinearModel, enc_features: np.ndarray) -> Ciphertext:
    """Homomorphic dot product plus bias on an encrypted feature vector (d, 2, 2)."""
    enc_features = np.asarray(enc_features, dtype=float)
    if enc_features.shape != (model.arity, 2, 2):
        raise SchemaMismatch(
            f"expected {model.arity} encrypted features, got shape {enc_features.shape}")
    eye = np.eye(2)
    Z = ((enc_features - eye[None] * model.feature_means[:, None, None])
         * (1.0 / model.feature_stds)[:, None, None])
    out = np.einsum("dab,dbc->ac", Z, model.weights) + model.bias
    return Ciphertext(out)


def dataset_fingerprint(enc: EncryptedDataset) -> str:
    return canonical.sha256(canonical.dump_bytes(enc.to_json()))
