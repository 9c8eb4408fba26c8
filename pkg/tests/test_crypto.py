import numpy as np
import pytest

from fedcare.crypto import (
    Ciphertext,
    EncryptedDataset,
    MoreKey,
    decrypt,
    decrypt_dataset,
    decrypt_values,
    encrypt,
    encrypt_dataset,
    encrypt_values,
    he_add,
    he_mul,
    he_scale,
    keygen,
    merge_encrypted_datasets,
    plain_embed,
    predict_encrypted,
    train_encrypted_linear,
)
from fedcare.domain import TrainingDataset
from fedcare.errors import MergeError, SchemaMismatch, ValidationError
from fedcare.ml import LinearModel, TrainingConfig, train_linear
from fedcare import canonical

H = "0" * 16
KEY = keygen(42)


def _close(got, want, tol=1e-9):
    return abs(got - want) <= tol + tol * abs(want)


def _ds(rows, targets):
    return TrainingDataset(H, "breast", "overall_qol",
                           tuple(tuple(float(v) for v in r) for r in rows),
                           tuple(float(t) for t in targets))


class TestKeygen:
    def test_deterministic(self):
        k1, k2 = keygen(7), keygen(7)
        assert np.array_equal(k1.K, k2.K)

    def test_shape_is_2x2(self):
        assert keygen(123).K.shape == (2, 2)

    def test_condition_bound_over_seed_sweep(self):
        for seed in range(1000):
            assert np.linalg.cond(keygen(seed).K) <= 100.0

    def test_inverse_residual(self):
        k = keygen(99)
        assert np.abs(k.K @ k.K_inv - np.eye(2)).max() < 1e-12

    def test_json_roundtrip(self):
        k = keygen(5)
        k2 = MoreKey.from_json(k.to_json())
        assert np.array_equal(k.K, k2.K)


class TestEncryptDecrypt:
    def test_roundtrip(self):
        rng = np.random.default_rng(0)
        assert _close(decrypt(KEY, encrypt(KEY, 7.5, rng)), 7.5)

    def test_fresh_randomness(self):
        rng = np.random.default_rng(0)
        c1, c2 = encrypt(KEY, 5.0, rng), encrypt(KEY, 5.0, rng)
        assert not np.array_equal(c1.C, c2.C)
        assert _close(decrypt(KEY, c1), 5.0) and _close(decrypt(KEY, c2), 5.0)

    def test_zero(self):
        rng = np.random.default_rng(1)
        assert _close(decrypt(KEY, encrypt(KEY, 0.0, rng)), 0.0)

    def test_non_finite_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValidationError):
            encrypt(KEY, float("inf"), rng)

    def test_wire_form(self):
        rng = np.random.default_rng(3)
        c = encrypt(KEY, 1.25, rng)
        restored = Ciphertext.from_json(c.to_json())
        assert np.array_equal(c.C, restored.C)


class TestHomomorphism:
    def test_add(self):
        rng = np.random.default_rng(4)
        a, b = encrypt(KEY, 2.0, rng), encrypt(KEY, 3.0, rng)
        assert _close(decrypt(KEY, he_add(a, b)), 5.0)

    def test_mul(self):
        rng = np.random.default_rng(5)
        a, b = encrypt(KEY, 2.0, rng), encrypt(KEY, 3.0, rng)
        assert _close(decrypt(KEY, he_mul(a, b)), 6.0)

    def test_scale(self):
        rng = np.random.default_rng(6)
        assert _close(decrypt(KEY, he_scale(encrypt(KEY, 4.0, rng), 0.5)), 2.0)

    def test_random_suite(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-1e3, 1e3, size=10_000)
        b = rng.uniform(-1e3, 1e3, size=10_000)
        s = rng.uniform(-10, 10, size=10_000)
        ca, cb = encrypt_values(KEY, a, rng), encrypt_values(KEY, b, rng)
        adds = decrypt_values(KEY, ca + cb)
        muls = decrypt_values(KEY, np.einsum("nab,nbc->nac", ca, cb))
        scales = decrypt_values(KEY, s[:, None, None] * ca)
        for got, want in ((adds, a + b), (muls, a * b), (scales, s * a)):
            assert np.all(np.abs(got - want) <= 1e-9 + 1e-9 * np.abs(want))

    def test_plain_embed(self):
        rng = np.random.default_rng(8)
        c = encrypt(KEY, 3.0, rng)
        shifted = Ciphertext(c.C + plain_embed(2.5))
        assert _close(decrypt(KEY, shifted), 5.5)

    def test_polynomial_transparency(self):
        # Random degree-<=4 expressions evaluated on ciphertexts match the
        # plaintext evaluator (spot check of conjugation transparency).
        rng = np.random.default_rng(9)
        for _ in range(25):
            vals = rng.uniform(-3, 3, size=3)
            cts = [encrypt(KEY, v, rng) for v in vals]
            coef = rng.uniform(-2, 2, size=4)
            # c0 + c1*x0 + c2*x0*x1 + c3*x0*x1*x2*x0  (degree 4)
            plain = (coef[0] + coef[1] * vals[0] + coef[2] * vals[0] * vals[1]
                     + coef[3] * vals[0] * vals[1] * vals[2] * vals[0])
            enc = Ciphertext(plain_embed(coef[0]))
            enc = he_add(enc, he_scale(cts[0], coef[1]))
            enc = he_add(enc, he_scale(he_mul(cts[0], cts[1]), coef[2]))
            enc = he_add(enc, he_scale(he_mul(he_mul(cts[0], cts[1]), he_mul(cts[2], cts[0])), coef[3]))
            assert _close(decrypt(KEY, enc), plain, tol=1e-8)


class TestEncryptedDataset:
    def _plain(self, n=3, d=2, seed=0):
        rng = np.random.default_rng(seed)
        return _ds(rng.normal(size=(n, d)), rng.uniform(0, 100, size=n))

    def test_shape_preserved(self):
        enc = encrypt_dataset(KEY, self._plain(n=3), np.random.default_rng(1))
        assert enc.n == 3 and enc.rows.shape == (3, 2, 2, 2)

    def test_cell_roundtrip(self):
        ds = self._plain(n=4, d=3, seed=2)
        enc = encrypt_dataset(KEY, ds, np.random.default_rng(3))
        back = decrypt_dataset(KEY, enc)
        assert np.allclose(back.rows, ds.rows, atol=1e-9)
        assert np.allclose(back.targets, ds.targets, atol=1e-9)

    def test_metadata_stays_plaintext(self):
        ds = self._plain()
        enc = encrypt_dataset(KEY, ds, np.random.default_rng(4))
        plain_meta = canonical.dumps({"cancer_type": ds.cancer_type,
                                      "target_variable": ds.target_variable,
                                      "schema_hash": ds.schema_hash, "n": ds.n})
        enc_meta = canonical.dumps({"cancer_type": enc.cancer_type,
                                    "target_variable": enc.target_variable,
                                    "schema_hash": enc.schema_hash, "n": enc.n})
        assert plain_meta == enc_meta

    def test_merge_concatenates(self):
        rng = np.random.default_rng(5)
        a = encrypt_dataset(KEY, self._plain(n=2), rng)
        b = encrypt_dataset(KEY, self._plain(n=3, seed=6), rng)
        merged = merge_encrypted_datasets(a, b)
        assert merged.n == 5
        assert np.allclose(merged.feature_sums, a.feature_sums + b.feature_sums)

    def test_merge_metadata_mismatch(self):
        rng = np.random.default_rng(7)
        a = encrypt_dataset(KEY, self._plain(), rng)
        other = TrainingDataset(H, "breast", "fatigue", ((1.0, 2.0),), (3.0,))
        b = encrypt_dataset(KEY, other, rng)
        with pytest.raises(MergeError):
            merge_encrypted_datasets(a, b)

    def test_merge_with_empty_is_identity(self):
        rng = np.random.default_rng(8)
        a = encrypt_dataset(KEY, self._plain(), rng)
        empty = EncryptedDataset(a.cancer_type, a.target_variable, a.schema_hash,
                                 np.zeros((0, a.arity, 2, 2)), np.zeros((0, 2, 2)),
                                 np.zeros(a.arity), np.zeros(a.arity))
        assert merge_encrypted_datasets(a, empty) is a
        assert merge_encrypted_datasets(empty, a) is a

    def test_wire_roundtrip(self):
        enc = encrypt_dataset(KEY, self._plain(), np.random.default_rng(9))
        restored = EncryptedDataset.from_json(enc.to_json())
        assert np.array_equal(enc.rows, restored.rows)
        assert np.array_equal(enc.targets, restored.targets)


class TestEncryptedTraining:
    def test_matches_plaintext_trainer(self):
        # Oracle: the plaintext trainer on the same dataset and config.
        rng = np.random.default_rng(10)
        X = rng.normal(0.5, 1.2, size=(40, 4))
        y = X @ np.array([2.0, -1.0, 0.5, 3.0]) + 50.0 + rng.normal(0, 2.0, 40)
        ds = _ds(X, y)
        cfg = TrainingConfig(learning_rate=0.05, epochs=400, ridge_lambda=1e-4)
        plain = train_linear(ds, cfg)
        enc_model = train_encrypted_linear(encrypt_dataset(KEY, ds, rng), cfg)
        got = enc_model.decrypt_model(KEY)
        w_plain = np.asarray(plain.weights)
        w_got = np.asarray(got.weights)
        assert np.all(np.abs(w_got - w_plain) <= 1e-6 * np.maximum(1.0, np.abs(w_plain)))
        assert abs(got.bias - plain.bias) <= 1e-6 * max(1.0, abs(plain.bias))

    def test_single_sample_constant_fit(self):
        ds = _ds([[0.0]], [3.0])
        cfg = TrainingConfig(learning_rate=0.05, epochs=2000, ridge_lambda=0.0)
        enc_model = train_encrypted_linear(encrypt_dataset(KEY, ds, np.random.default_rng(11)), cfg)
        assert abs(decrypt_values(KEY, enc_model.bias) - 3.0) < 1e-6

    def test_zero_epochs_rejected_at_config(self):
        with pytest.raises(ValidationError):
            TrainingConfig(epochs=0)

    def test_classification_rejected(self):
        enc = encrypt_dataset(KEY, _ds([[1.0]], [1.0]), np.random.default_rng(12))
        with pytest.raises(ValidationError):
            train_encrypted_linear(enc, TrainingConfig(task="classification"))


class TestEncryptedPrediction:
    def _enc_model(self, weights, bias, rng, means=None, stds=None):
        d = len(weights)
        means = np.zeros(d) if means is None else np.asarray(means, dtype=float)
        stds = np.ones(d) if stds is None else np.asarray(stds, dtype=float)
        from fedcare.crypto import EncryptedLinearModel
        return EncryptedLinearModel(
            weights=encrypt_values(KEY, np.asarray(weights, dtype=float), rng),
            bias=encrypt_values(KEY, np.asarray(float(bias)), rng),
            schema_hash=H, trained_on_n=1, feature_means=means, feature_stds=stds)

    def test_dot_product_plus_bias(self):
        rng = np.random.default_rng(13)
        model = self._enc_model([2.0], 1.0, rng)
        enc_x = encrypt_values(KEY, np.asarray([3.0]), rng)
        assert _close(decrypt(KEY, predict_encrypted(model, enc_x)), 7.0, tol=1e-8)

    def test_zero_weights_gives_bias(self):
        rng = np.random.default_rng(14)
        model = self._enc_model([0.0, 0.0], 4.5, rng)
        enc_x = encrypt_values(KEY, np.asarray([100.0, -5.0]), rng)
        assert _close(decrypt(KEY, predict_encrypted(model, enc_x)), 4.5, tol=1e-8)

    def test_matches_plaintext_predict_on_random_instances(self):
        # Oracle: plaintext LinearModel applied directly.
        rng = np.random.default_rng(15)
        for _ in range(100):
            d = int(rng.integers(1, 6))
            w = rng.normal(size=d)
            b = float(rng.normal())
            mu = rng.normal(size=d)
            sd = rng.uniform(0.5, 2.0, size=d)
            plain = LinearModel(tuple(w), b, tuple(mu), tuple(sd), H, "regression", 1)
            model = self._enc_model(w, b, rng, means=mu, stds=sd)
            x = rng.normal(size=d)
            enc_x = encrypt_values(KEY, x, rng)
            from fedcare.ml import predict
            want = predict(plain, x)
            got = decrypt(KEY, predict_encrypted(model, enc_x))
            assert abs(got - want) <= 1e-6 * max(1.0, abs(want))

    def test_arity_mismatch(self):
        rng = np.random.default_rng(16)
        model = self._enc_model([1.0, 2.0], 0.0, rng)
        with pytest.raises(SchemaMismatch):
            predict_encrypted(model, encrypt_values(KEY, np.asarray([1.0]), rng))
