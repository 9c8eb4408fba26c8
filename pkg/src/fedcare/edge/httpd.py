"""HTTP facade for the edge node (consumed by the dashboard and the harness)."""

from __future__ import annotations

from ..domain import ModelKey
from ..errors import AuthError
from ..httpserver import JsonHttpServer
from .node import EdgeNode


class EdgeHttpServer:
    def __init__(self, edge: EdgeNode, host: str = "127.0.0.1", port: int = 0):
        self.edge = edge
        self.server = JsonHttpServer(host, port)
        s, e = self.server, edge

        def authed(handler):
            def wrapped(match, query, body, token):
                if token != e.config.bearer_token:
                    raise AuthError("bad bearer token")
                return handler(match, query, body)
            return wrapped

        s.route("POST", r"/ingest/his",
                authed(lambda m, q, b: e.ingest_his_payload(b)))
        s.route("POST", r"/ingest/aggregator/(?P<source>[^/]+)",
                authed(lambda m, q, b: e.ingest_aggregator_payload(m.group("source"), b)))
        s.route("POST", r"/models/(?P<key>[^/]+)/ensure",
                authed(lambda m, q, b: e.ensure_model(ModelKey.parse(m.group("key"))).to_json()))
        s.route("GET", r"/patients", authed(lambda m, q, b: e.list_patients()))
        s.route("GET", r"/patients/(?P<p>[0-9a-f]{32})/timeline",
                authed(lambda m, q, b: e.get_timeline(
                    m.group("p"),
                    [t for t in q.get("targets", "overall_qol").split(",") if t],
                    int(q.get("horizon", "2"))).to_json()))
        s.route("POST", r"/patients/(?P<p>[0-9a-f]{32})/what-if",
                authed(lambda m, q, b: e.what_if(
                    m.group("p"), b.get("interventions", []),
                    b.get("targets", ["overall_qol"]), int(b.get("horizon", 2)))))
        s.route("GET", r"/patients/(?P<p>[0-9a-f]{32})/suggestions",
                authed(lambda m, q, b: e.suggest_interventions(
                    m.group("p"), q.get("target", "overall_qol"))))
        s.route("POST", r"/patients/(?P<p>[0-9a-f]{32})/wearables",
                authed(lambda m, q, b: e.register_wearable(m.group("p"), b["device_id"])))
        s.route("DELETE", r"/patients/(?P<p>[0-9a-f]{32})/wearables/(?P<d>[^/]+)",
                authed(lambda m, q, b: e.deregister_wearable(m.group("p"), m.group("d"))))
        s.route("GET", r"/health", lambda m, q, b, t: {"status": "ok",
                                                       "edge_id": e.config.edge_id})

    @property
    def base_url(self) -> str:
        host, port = self.server.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self.server.start()

    def stop(self) -> None:
        self.server.stop()
