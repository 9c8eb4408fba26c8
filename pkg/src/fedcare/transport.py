"""Clocks, the connection-direction log, and the edge-side cloud clients.

Every cloud interaction goes through a client that records one log entry per
connection it initiates. The cloud has no client of its own, so a log with
only ``edge:*`` initiators is structural evidence of the edge-initiated-only
rule, and the logged request payloads double as the corpus for the privacy
scan.
"""

from __future__ import annotations

import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any

from . import canonical, errors


class WallClock:
    def now(self) -> int:
        return int(time.time())


class SimClock:
    """Manually advanced clock driving deterministic simulated runs."""

    def __init__(self, start: int = 1_700_000_000):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, seconds: int) -> int:
        self._now += int(seconds)
        return self._now


@dataclass
class LogEntry:
    seq: int
    initiator: str
    target: str
    op: str
    payload: str
    at: int

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "initiator": self.initiator,
            "target": self.target,
            "op": self.op,
            "payload_sha256": canonical.sha256(self.payload),
            "payload_len": len(self.payload),
            "at": self.at,
        }


class TransportLog:
    """Append-only record of connection initiations, kept by the initiating side."""

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []

    def record(self, initiator: str, target: str, op: str, payload: str, at: int) -> None:
        self.entries.append(LogEntry(len(self.entries), initiator, target, op, payload, at))

    def scan_for(self, needles: list[str]) -> list[tuple[int, str]]:
        """Return (entry seq, needle) for every needle found in a logged payload."""
        corpus = "\n".join(e.payload for e in self.entries)
        suspicious = [n for n in needles if n and n in corpus]
        hits = []
        for needle in suspicious:
            for entry in self.entries:
                if needle in entry.payload:
                    hits.append((entry.seq, needle))
        return hits

    def cloud_initiated(self) -> list[LogEntry]:
        return [e for e in self.entries if not e.initiator.startswith("edge:")]

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.entries]


# Wire error mapping: typed errors survive both the in-process and HTTP paths.
_ERROR_CLASSES = {
    cls.__name__: cls
    for cls in (
        errors.ValidationError, errors.EmptyDataset, errors.SchemaMismatch,
        errors.DecodeError, errors.DivergenceError, errors.KeygenError,
        errors.MergeError, errors.AuthError, errors.DuplicateEdge,
        errors.StaleRound, errors.ProtocolError, errors.NotFound,
        errors.UnknownAggregator, errors.FeatureDisabled, errors.HETimeout,
        errors.SurrogateTrainingTimeout,
    )
}

_ERROR_STATUS = {
    "AuthError": 401,
    "NotFound": 404,
    "DuplicateEdge": 409,
    "StaleRound": 409,
    "MergeError": 409,
    "ProtocolError": 409,
    "ValidationError": 400,
    "SchemaMismatch": 400,
    "DecodeError": 400,
}


def error_to_wire(exc: Exception) -> tuple[int, dict]:
    name = type(exc).__name__
    return _ERROR_STATUS.get(name, 422), {"error": name, "message": str(exc)}


def error_from_wire(obj: dict) -> Exception:
    cls = _ERROR_CLASSES.get(obj.get("error", ""), errors.FedcareError)
    return cls(obj.get("message", "remote error"))


class InProcessCloudClient:
    """Function-call transport that still serializes every payload to the wire
    encoding, so logged bytes match what HTTP would carry."""

    def __init__(self, cloud, edge_id: str, log: TransportLog, clock) -> None:
        self.cloud = cloud
        self.edge_id = edge_id
        self.log = log
        self.clock = clock
        self.token: str | None = None
        self.down = False  # fault injection: cloud unreachable

    def request(self, op: str, payload: dict | None = None) -> Any:
        body = canonical.dumps(payload or {})
        self.log.record(f"edge:{self.edge_id}", "cloud", op, body, self.clock.now())
        if self.down:
            raise errors.TransportError("cloud unreachable (fault injected)")
        handler = getattr(self.cloud, "handle_" + op)
        return handler(self.edge_id, self.token, canonical.loads(body))

    # -- protocol surface ------------------------------------------------

    def register(self, admission_secret: str) -> dict:
        out = self.request("register_edge", {"edge_id": self.edge_id,
                                             "admission_secret": admission_secret})
        self.token = out["bearer_token"]
        return out

    def deregister(self) -> dict:
        return self.request("deregister_edge", {})

    def declare_training(self, key: str) -> dict:
        return self.request("declare_training", {"model_key": key})

    def submit_update(self, key: str, model_bytes: bytes, sample_count: int,
                      round_no: int | None = None) -> dict:
        return self.request("submit_update", {
            "model_key": key, "model": canonical.loads(model_bytes),
            "sample_count": sample_count, "round": round_no})

    def fetch_global(self, key: str, surrogate: str | None = None) -> dict | None:
        return self.request("fetch_global", {"model_key": key, "surrogate": surrogate})

    def ingest_encrypted_dataset(self, dataset_json: dict) -> dict:
        return self.request("ingest_encrypted_dataset", {"dataset": dataset_json})

    def submit_inference(self, key: str, enc_features: list) -> str:
        return self.request("submit_inference", {"model_key": key,
                                                 "features": enc_features})["request_id"]

    def poll_inference(self, request_id: str) -> dict:
        return self.request("poll_inference", {"request_id": request_id})

    def request_surrogate(self, key: str, kind: str) -> dict:
        return self.request("surrogate", {"model_key": key, "kind": kind,
                                          "action": "request"})

    def submit_surrogate(self, key: str, kind: str, model_json: dict,
                         fidelity_r2: float, sample_count: int) -> dict:
        return self.request("surrogate", {
            "model_key": key, "kind": kind, "action": "submit", "model": model_json,
            "fidelity_r2": fidelity_r2, "sample_count": sample_count})

    def poll_tasks(self) -> list[dict]:
        return self.request("poll_tasks", {})["tasks"]


class HttpCloudClient:
    """Loopback-HTTP transport speaking the documented endpoint surface."""

    def __init__(self, base_url: str, edge_id: str, log: TransportLog, clock,
                 timeout: float = 10.0) -> None:
        self.base_url = base_url.rstrip("/")
        self.edge_id = edge_id
        self.log = log
        self.clock = clock
        self.token: str | None = None
        self.timeout = timeout

    def _call(self, method: str, path: str, payload: dict | None, op: str) -> Any:
        body = canonical.dumps(payload) if payload is not None else ""
        self.log.record(f"edge:{self.edge_id}", "cloud", op,
                        body if payload is not None else path, self.clock.now())
        req = urllib.request.Request(
            self.base_url + path,
            data=body.encode("utf-8") if payload is not None else None,
            method=method,
            headers={"Content-Type": "application/json",
                     **({"Authorization": f"Bearer {self.token}"} if self.token else {})},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
                return json.loads(text) if text else None
        except urllib.error.HTTPError as exc:
            detail = exc.read().decode("utf-8", "replace")
            try:
                raise error_from_wire(json.loads(detail)) from None
            except json.JSONDecodeError:
                raise errors.TransportError(f"HTTP {exc.code}: {detail}") from None
        except urllib.error.URLError as exc:
            raise errors.TransportError(f"cloud unreachable: {exc.reason}") from None

    def register(self, admission_secret: str) -> dict:
        out = self._call("POST", "/edges", {"edge_id": self.edge_id,
                                            "admission_secret": admission_secret},
                         "register_edge")
        self.token = out["bearer_token"]
        return out

    def deregister(self) -> dict:
        return self._call("DELETE", f"/edges/{self.edge_id}", None, "deregister_edge")

    def declare_training(self, key: str) -> dict:
        return self._call("POST", f"/federation/{key}/declare", {}, "declare_training")

    def submit_update(self, key: str, model_bytes: bytes, sample_count: int,
                      round_no: int | None = None) -> dict:
        return self._call("POST", f"/federation/{key}/update", {
            "model": json.loads(model_bytes), "sample_count": sample_count,
            "round": round_no}, "submit_update")

    def fetch_global(self, key: str, surrogate: str | None = None) -> dict | None:
        suffix = f"?surrogate={surrogate}" if surrogate else ""
        try:
            return self._call("GET", f"/models/{key}{suffix}", None, "fetch_global")
        except errors.NotFound:
            return None

    def ingest_encrypted_dataset(self, dataset_json: dict) -> dict:
        return self._call("POST", "/he/datasets", {"dataset": dataset_json},
                          "ingest_encrypted_dataset")

    def submit_inference(self, key: str, enc_features: list) -> str:
        return self._call("POST", "/he/inference", {"model_key": key,
                                                    "features": enc_features},
                          "submit_inference")["request_id"]

    def poll_inference(self, request_id: str) -> dict:
        return self._call("GET", f"/he/inference/{request_id}", None, "poll_inference")

    def request_surrogate(self, key: str, kind: str) -> dict:
        return self._call("POST", f"/surrogates/{key}", {"kind": kind, "action": "request"},
                          "surrogate")

    def submit_surrogate(self, key: str, kind: str, model_json: dict,
                         fidelity_r2: float, sample_count: int) -> dict:
        return self._call("POST", f"/surrogates/{key}", {
            "kind": kind, "action": "submit", "model": model_json,
            "fidelity_r2": fidelity_r2, "sample_count": sample_count}, "surrogate")

    def poll_tasks(self) -> list[dict]:
        return self._call("GET", "/tasks", None, "poll_tasks")["tasks"]
