import numpy as np
import pytest

from fedcare import canonical, crypto
from fedcare.cloud import CloudConfig, CloudService
from fedcare.domain import ModelKey, TrainingDataset
from fedcare.errors import (
    AuthError,
    DuplicateEdge,
    MergeError,
    NotFound,
    ProtocolError,
    StaleRound,
)
from fedcare.ml import LinearModel, TrainingConfig, serialize_model
from fedcare.transport import InProcessCloudClient, SimClock, TransportLog

H = "0" * 16
SECRET = "cloud-admission-secret"
KEY = ModelKey("breast", "overall_qol", "linear", "regression")
MORE = crypto.keygen(1)


def _linear(weights, bias, n=10):
    d = len(weights)
    return LinearModel(tuple(float(w) for w in weights), float(bias),
                       tuple(0.0 for _ in range(d)), tuple(1.0 for _ in range(d)),
                       H, "regression", n)


def _setup(n_edges=2, **cfg):
    clock = SimClock()
    log = TransportLog()
    cloud = CloudService(CloudConfig(admission_secret=SECRET, **cfg), clock)
    clients = []
    for i in range(n_edges):
        client = InProcessCloudClient(cloud, f"edge-{i}", log, clock)
        client.register(SECRET)
        clients.append(client)
    return cloud, clock, log, clients


class TestGatekeeper:
    def test_register_wrong_secret(self):
        cloud, clock, log, _ = _setup(0)
        client = InProcessCloudClient(cloud, "edge-x", log, clock)
        with pytest.raises(AuthError):
            client.register("wrong")

    def test_duplicate_rejected(self):
        cloud, clock, log, clients = _setup(1)
        dup = InProcessCloudClient(cloud, "edge-0", log, clock)
        with pytest.raises(DuplicateEdge):
            dup.register(SECRET)

    def test_departed_cannot_submit_and_can_rejoin(self):
        cloud, clock, log, (a,) = _setup(1)
        old_token = a.token
        a.deregister()
        with pytest.raises(AuthError):
            a.declare_training(str(KEY))
        rejoin = InProcessCloudClient(cloud, "edge-0", log, clock)
        out = rejoin.register(SECRET)
        assert out["status"] == "active"
        assert rejoin.token != old_token

    def test_deregistration_preserves_models(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.0], 2.0)), 10)
        before = {k: canonical.dumps(r.to_json()) for k, r in cloud.registry.items()}
        b.deregister()
        after = {k: canonical.dumps(r.to_json()) for k, r in cloud.registry.items()}
        assert before == after


class TestIncrementalMode:
    def test_first_declarer_no_global(self):
        cloud, clock, log, (a,) = _setup(1)
        directive = a.declare_training(str(KEY))
        assert directive == {"mode": "incremental", "round": 0, "base": None}

    def test_incremental_submit_becomes_global(self):
        cloud, clock, log, (a,) = _setup(1)
        a.declare_training(str(KEY))
        model = _linear([1.5], 0.5)
        out = a.submit_update(str(KEY), serialize_model(model), 10)
        assert out == {"status": "stored", "version": 1}
        fetched = a.fetch_global(str(KEY))
        assert fetched["version"] == 1
        assert canonical.dumps(fetched["model"]) == serialize_model(model).decode()

    def test_single_declarer_with_global_gets_base(self):
        cloud, clock, log, (a,) = _setup(1)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.0], 0.0)), 5)
        directive = a.declare_training(str(KEY))
        assert directive["mode"] == "incremental"
        assert directive["base"]["version"] == 1

    def test_fetch_before_training_absent(self):
        cloud, clock, log, (a,) = _setup(1)
        assert a.fetch_global(str(KEY)) is None

    def test_new_edge_benefits_from_stored_model(self):
        cloud, clock, log, (a,) = _setup(1)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([3.0], 1.0)), 5)
        newcomer = InProcessCloudClient(cloud, "edge-new", log, clock)
        newcomer.register(SECRET)
        fetched = newcomer.fetch_global(str(KEY))
        assert fetched is not None and fetched["version"] == 1
        assert "edge-new" not in fetched["contributing_edges"]


class TestSemiConcurrentMode:
    def test_second_declarer_flips_mode(self):
        cloud, clock, log, (a, b) = _setup(2)
        first = a.declare_training(str(KEY))
        assert first["mode"] == "incremental"
        second = b.declare_training(str(KEY))
        assert second["mode"] == "semi_concurrent" and second["round"] == 1
        # A discovers the flip on its (now stale) incremental submit
        with pytest.raises(StaleRound):
            a.submit_update(str(KEY), serialize_model(_linear([1.0], 0.0)), 5)
        refetched = a.declare_training(str(KEY))
        assert refetched["mode"] == "semi_concurrent" and refetched["round"] == 1

    def test_round_averaging_and_final(self):
        cloud, clock, log, (a, b) = _setup(2, rounds=2)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        a.declare_training(str(KEY))
        out_a = a.submit_update(str(KEY), serialize_model(_linear([0.0], 0.0, n=1)), 1, round_no=1)
        assert out_a == {"status": "waiting", "round": 1}
        out_b = b.submit_update(str(KEY), serialize_model(_linear([0.0], 4.0, n=1)), 1, round_no=1)
        assert out_b["status"] == "round_complete" and out_b["round"] == 2
        assert out_b["base"]["bias"] == 2.0  # sample-weighted mean of 0 and 4 (n=1,1)
        # a learns about the new round via its task queue
        tasks = a.poll_tasks()
        assert any(t["type"] == "federation_round" and t["round"] == 2 for t in tasks)
        out_a = a.submit_update(str(KEY), serialize_model(_linear([1.0], 2.0, n=1)), 1, round_no=2)
        out_b = b.submit_update(str(KEY), serialize_model(_linear([3.0], 2.0, n=1)), 1, round_no=2)
        assert out_b["status"] == "final"
        final = b.fetch_global(str(KEY))
        assert final["model"]["weights"] == [2.0]
        assert sorted(final["contributing_edges"]) == ["edge-0", "edge-1"]
        tasks_a = a.poll_tasks()
        assert any(t["type"] == "federation_final" for t in tasks_a)

    def test_stale_round_rejected(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        with pytest.raises(StaleRound):
            a.submit_update(str(KEY), serialize_model(_linear([0.0], 0.0)), 1, round_no=7)

    def test_unknown_declaration_rejected(self):
        cloud, clock, log, (a, b) = _setup(2)
        with pytest.raises(ProtocolError):
            a.submit_update(str(KEY), serialize_model(_linear([0.0], 0.0)), 1)

    def test_weighted_round_mean(self):
        cloud, clock, log, (a, b) = _setup(2, rounds=1)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([0.0], 0.0, n=1)), 1, round_no=1)
        out = b.submit_update(str(KEY), serialize_model(_linear([0.0], 4.0, n=3)), 3, round_no=1)
        assert out["status"] == "final"
        assert b.fetch_global(str(KEY))["model"]["bias"] == 3.0

    def test_mid_round_crash_completes_at_deadline(self):
        cloud, clock, log, (a, b) = _setup(2, rounds=5, round_deadline=30)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        model = _linear([1.0], 1.0, n=4)
        a.submit_update(str(KEY), serialize_model(model), 4, round_no=1)
        # b crashes: never submits; deadline passes
        clock.advance(31)
        cloud.tick()
        final = a.fetch_global(str(KEY))
        assert final is not None and final["version"] == 1
        assert final["model"]["bias"] == 1.0  # a's model alone
        assert cloud.federation[str(KEY)].mode == "idle"
        # a is told the session finished
        assert any(t["type"] == "federation_final" for t in a.poll_tasks())

    def test_empty_round_aborts_at_deadline(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        clock.advance(31)
        cloud.tick()
        assert cloud.federation[str(KEY)].mode == "idle"
        assert a.fetch_global(str(KEY)) is None
        assert any(t["type"] == "federation_aborted" for t in a.poll_tasks())

    def test_version_monotonic(self):
        cloud, clock, log, (a,) = _setup(1)
        versions = []
        for i in range(3):
            a.declare_training(str(KEY))
            out = a.submit_update(str(KEY), serialize_model(_linear([float(i)], 0.0)), 5)
            versions.append(out["version"])
        assert versions == [1, 2, 3]

    def test_tree_keys_stay_incremental(self):
        tree_key = ModelKey("breast", "overall_qol", "tree", "regression")
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(tree_key))
        directive = b.declare_training(str(tree_key))
        assert directive["mode"] == "incremental"


def _enc_dataset(n=4, d=2, seed=0, target="overall_qol"):
    rng = np.random.default_rng(seed)
    ds = TrainingDataset(H, "breast", target,
                         tuple(tuple(float(v) for v in row) for row in rng.normal(size=(n, d))),
                         tuple(float(v) for v in rng.uniform(20, 80, size=n)))
    return ds, crypto.encrypt_dataset(MORE, ds, rng)


class TestHEManagers:
    def test_aggregate_merging(self):
        cloud, clock, log, (a, b) = _setup(2)
        _, enc1 = _enc_dataset(n=10, seed=1)
        _, enc2 = _enc_dataset(n=15, seed=2)
        assert a.ingest_encrypted_dataset(enc1.to_json())["aggregate_n"] == 10
        assert b.ingest_encrypted_dataset(enc2.to_json())["aggregate_n"] == 25

    def test_new_aggregate_per_target(self):
        cloud, clock, log, (a,) = _setup(1)
        _, enc1 = _enc_dataset(seed=3)
        _, enc2 = _enc_dataset(seed=4, target="fatigue")
        a.ingest_encrypted_dataset(enc1.to_json())
        out = a.ingest_encrypted_dataset(enc2.to_json())
        assert out["aggregate_n"] == 4
        assert len(cloud.he_aggregates) == 2

    def test_schema_mismatch_rejected(self):
        cloud, clock, log, (a,) = _setup(1)
        _, enc1 = _enc_dataset(seed=5)
        a.ingest_encrypted_dataset(enc1.to_json())
        bad = dict(enc1.to_json())
        bad["schema_hash"] = "f" * 16
        with pytest.raises(MergeError):
            a.ingest_encrypted_dataset(bad)

    def test_train_sweep_counts(self):
        cloud, clock, log, (a,) = _setup(
            1, he_training=TrainingConfig(learning_rate=0.05, epochs=50, ridge_lambda=0.0))
        _, enc = _enc_dataset(n=8, seed=6)
        a.ingest_encrypted_dataset(enc.to_json())
        assert cloud.train_he_models() == 1
        assert cloud.train_he_models() == 0  # idempotent, nothing stale

    def test_refreshed_model_matches_plaintext_twin(self):
        cfg = TrainingConfig(learning_rate=0.05, epochs=300, ridge_lambda=1e-4)
        cloud, clock, log, (a, b) = _setup(2, he_training=cfg)
        ds1, enc1 = _enc_dataset(n=20, seed=7)
        ds2, enc2 = _enc_dataset(n=30, seed=8)
        a.ingest_encrypted_dataset(enc1.to_json())
        b.ingest_encrypted_dataset(enc2.to_json())
        cloud.train_he_models()
        model_json, _ = cloud.he_models["breast|overall_qol"]
        decrypted = crypto.EncryptedLinearModel.from_json(model_json).decrypt_model(MORE)
        # Oracle: plaintext trainer on the pooled rows in ingest order.
        pooled = TrainingDataset(H, "breast", "overall_qol", ds1.rows + ds2.rows,
                                 ds1.targets + ds2.targets)
        from fedcare.ml import train_linear
        twin = train_linear(pooled, cfg)
        for got, want in zip(decrypted.weights, twin.weights):
            assert abs(got - want) <= 1e-6 * max(1.0, abs(want))
        assert abs(decrypted.bias - twin.bias) <= 1e-6 * max(1.0, abs(twin.bias))

    def test_inference_pending_then_done(self):
        cloud, clock, log, (a,) = _setup(
            1, he_training=TrainingConfig(learning_rate=0.05, epochs=50, ridge_lambda=0.0))
        rng = np.random.default_rng(9)
        enc_x = crypto.encrypt_values(MORE, np.asarray([0.5, -0.25]), rng)
        request_id = a.submit_inference(str(KEY), [c.ravel().tolist() for c in enc_x])
        assert a.poll_inference(request_id) == {"status": "pending"}
        _, enc = _enc_dataset(n=8, seed=10)
        a.ingest_encrypted_dataset(enc.to_json())
        cloud.train_he_models()
        out = a.poll_inference(request_id)
        assert out["status"] == "done"
        assert len(out["result"]) == 4

    def test_foreign_poll_rejected(self):
        cloud, clock, log, (a, b) = _setup(2)
        rng = np.random.default_rng(11)
        enc_x = crypto.encrypt_values(MORE, np.asarray([0.1, 0.2]), rng)
        request_id = a.submit_inference(str(KEY), [c.ravel().tolist() for c in enc_x])
        with pytest.raises(AuthError):
            b.poll_inference(request_id)

    def test_unknown_request(self):
        cloud, clock, log, (a,) = _setup(1)
        with pytest.raises(NotFound):
            a.poll_inference("req-999999")


class TestSurrogateCoordination:
    def test_request_without_global(self):
        cloud, clock, log, (a,) = _setup(1)
        with pytest.raises(NotFound):
            a.request_surrogate(str(KEY), "linear")

    def test_tree_argmax_fidelity(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.0], 0.0)), 5)
        out = a.request_surrogate(str(KEY), "tree")
        assert out["status"] == "started"
        assert any(t["type"] == "surrogate_train" for t in a.poll_tasks())
        from fedcare.ml import TreeModel
        t_low = TreeModel(({"value": 1.0},), 0, H, "regression", (0.0,), 5, 1)
        t_high = TreeModel(({"value": 2.0},), 0, H, "regression", (0.0,), 5, 1)
        a.submit_surrogate(str(KEY), "tree", t_low.to_json(), 0.90, 5)
        out = b.submit_surrogate(str(KEY), "tree", t_high.to_json(), 0.95, 5)
        assert out["status"] == "final"
        stored = a.fetch_global(str(KEY), surrogate="tree")
        assert stored["model"]["nodes"][0]["value"] == 2.0  # the 0.95-fidelity tree

    def test_linear_surrogates_averaged(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.0], 0.0)), 5)
        a.request_surrogate(str(KEY), "linear")
        a.submit_surrogate(str(KEY), "linear", _linear([2.0], 0.0, n=1).to_json(), 0.999, 1)
        out = b.submit_surrogate(str(KEY), "linear", _linear([4.0], 2.0, n=1).to_json(), 0.999, 1)
        assert out["status"] == "final"
        stored = a.fetch_global(str(KEY), surrogate="linear")
        assert stored["model"]["weights"] == [3.0]
        assert stored["model"]["bias"] == 1.0

    def test_ready_short_circuit(self):
        cloud, clock, log, (a,) = _setup(1)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.0], 0.0)), 5)
        a.request_surrogate(str(KEY), "linear")
        a.submit_surrogate(str(KEY), "linear", _linear([2.0], 0.0).to_json(), 0.999, 5)
        assert a.request_surrogate(str(KEY), "linear")["status"] == "ready"


class TestDurability:
    def test_restart_preserves_registry_bytes(self, tmp_path):
        clock = SimClock()
        log = TransportLog()
        cloud = CloudService(CloudConfig(admission_secret=SECRET, data_dir=str(tmp_path)), clock)
        a = InProcessCloudClient(cloud, "edge-0", log, clock)
        a.register(SECRET)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([1.25], -0.5)), 10)
        _, enc = _enc_dataset(n=5, seed=12)
        a.ingest_encrypted_dataset(enc.to_json())
        before = canonical.dumps({k: r.to_json() for k, r in cloud.registry.items()})

        rebooted = CloudService(CloudConfig(admission_secret=SECRET, data_dir=str(tmp_path)),
                                SimClock())
        after = canonical.dumps({k: r.to_json() for k, r in rebooted.registry.items()})
        assert before == after
        assert rebooted.he_aggregates["breast|overall_qol"].n == 5
        assert rebooted.edges["edge-0"].status == "active"

    def test_snapshot_compaction(self, tmp_path):
        clock = SimClock()
        log = TransportLog()
        cloud = CloudService(CloudConfig(admission_secret=SECRET, data_dir=str(tmp_path)), clock)
        a = InProcessCloudClient(cloud, "edge-0", log, clock)
        a.register(SECRET)
        a.declare_training(str(KEY))
        a.submit_update(str(KEY), serialize_model(_linear([2.0], 0.0)), 10)
        cloud.snapshot()
        assert not (tmp_path / "events.jsonl").exists()
        rebooted = CloudService(CloudConfig(admission_secret=SECRET, data_dir=str(tmp_path)),
                                SimClock())
        assert rebooted.registry[str(KEY)].version == 1


class TestTransportLogging:
    def test_all_entries_edge_initiated(self):
        cloud, clock, log, (a, b) = _setup(2)
        a.declare_training(str(KEY))
        b.declare_training(str(KEY))
        a.poll_tasks()
        assert log.cloud_initiated() == []
        assert len(log.entries) >= 5  # registrations + declares + poll

    def test_payload_scan(self):
        cloud, clock, log, (a,) = _setup(1)
        a.declare_training(str(KEY))
        hits = log.scan_for(["P-0001"])
        assert hits == []
        hits = log.scan_for(["overall_qol"])
        assert hits  # sanity: the scanner does see payload content
