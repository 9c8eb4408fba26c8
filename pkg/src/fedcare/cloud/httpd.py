"""HTTP facade for the cloud coordinator (all endpoints edge-initiated)."""

from __future__ import annotations

import threading

from ..errors import NotFound
from ..httpserver import JsonHttpServer
from .service import CloudService


class CloudHttpServer:
    def __init__(self, cloud: CloudService, host: str = "127.0.0.1", port: int = 0,
                 tick_interval: float = 0.2):
        self.cloud = cloud
        self.server = JsonHttpServer(host, port)
        self.tick_interval = tick_interval
        self._stop = threading.Event()
        self._ticker: threading.Thread | None = None
        s, c = self.server, cloud

        def authed(handler):
            def wrapped(match, query, body, token):
                edge_id = c.resolve_token(token)
                return handler(edge_id, token, match, query, body)
            return wrapped

        s.route("POST", r"/edges", lambda m, q, b, t: c.handle_register_edge("", t, b))
        s.route("DELETE", r"/edges/(?P<edge>[^/]+)",
                authed(lambda e, t, m, q, b: c.handle_deregister_edge(e, t, {})))
        s.route("POST", r"/federation/(?P<key>[^/]+)/declare",
                authed(lambda e, t, m, q, b: c.handle_declare_training(
                    e, t, {"model_key": m.group("key")})))
        s.route("POST", r"/federation/(?P<key>[^/]+)/update",
                authed(lambda e, t, m, q, b: c.handle_submit_update(
                    e, t, {**b, "model_key": m.group("key")})))
        s.route("GET", r"/models/(?P<key>[^/]+)", authed(self._fetch_global))
        s.route("POST", r"/he/datasets",
                authed(lambda e, t, m, q, b: c.handle_ingest_encrypted_dataset(e, t, b)))
        s.route("POST", r"/he/inference",
                authed(lambda e, t, m, q, b: c.handle_submit_inference(e, t, b)))
        s.route("GET", r"/he/inference/(?P<rid>[^/]+)",
                authed(lambda e, t, m, q, b: c.handle_poll_inference(
                    e, t, {"request_id": m.group("rid")})))
        s.route("POST", r"/surrogates/(?P<key>[^/]+)",
                authed(lambda e, t, m, q, b: c.handle_surrogate(
                    e, t, {**b, "model_key": m.group("key")})))
        s.route("GET", r"/tasks", authed(lambda e, t, m, q, b: c.handle_poll_tasks(e, t, {})))
        s.route("GET", r"/health", lambda m, q, b, t: {"status": "ok"})

    def _fetch_global(self, edge_id, token, match, query, body):
        record = self.cloud.handle_fetch_global(
            edge_id, token, {"model_key": match.group("key"),
                             "surrogate": query.get("surrogate")})
        if record is None:
            raise NotFound(f"no global model for {match.group('key')}")
        return record

    @property
    def base_url(self) -> str:
        host, port = self.server.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self.server.start()
        self._ticker = threading.Thread(target=self._tick_loop, daemon=True)
        self._ticker.start()

    def _tick_loop(self) -> None:
        # Cloud-internal maintenance: round deadlines and the HE training sweep.
        while not self._stop.wait(self.tick_interval):
            with self.cloud._lock:
                self.cloud.tick()
            self.cloud.train_he_models()

    def stop(self) -> None:
        self._stop.set()
        if self._ticker is not None:
            self._ticker.join(timeout=5)
        self.server.stop()
