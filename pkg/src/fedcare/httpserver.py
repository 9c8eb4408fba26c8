"""Minimal stdlib JSON-over-HTTP server plumbing shared by cloud and edge."""

from __future__ import annotations

import json
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, urlparse

from . import transport

Route = tuple[str, re.Pattern, Callable]


class JsonHttpServer:
    """Routes (method, path-regex) to handlers returning JSON-serializable values.

    Handlers receive (match, query, body, token) and may raise the platform's
    typed errors, which map to HTTP statuses via the shared wire encoding.
    """

    def __init__(self, host: str, port: int):
        self.routes: list[Route] = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):  # quiet by default
                pass

            def _dispatch(self, method: str) -> None:
                parsed = urlparse(self.path)
                query = {k: v[0] for k, v in parse_qs(parsed.query).items()}
                token = None
                auth = self.headers.get("Authorization", "")
                if auth.startswith("Bearer "):
                    token = auth[len("Bearer "):]
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length).decode("utf-8") if length else ""
                body = json.loads(raw) if raw else None
                for route_method, pattern, handler in server.routes:
                    if route_method != method:
                        continue
                    match = pattern.fullmatch(parsed.path)
                    if match is None:
                        continue
                    try:
                        result = handler(match, query, body, token)
                    except Exception as exc:
                        status, payload = transport.error_to_wire(exc)
                        self._reply(status, payload)
                        return
                    self._reply(200, result)
                    return
                self._reply(404, {"error": "NotFound", "message": f"no route {method} {parsed.path}"})

            def _reply(self, status: int, payload: Any) -> None:
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                self._dispatch("GET")

            def do_POST(self):
                self._dispatch("POST")

            def do_DELETE(self):
                self._dispatch("DELETE")

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def route(self, method: str, pattern: str, handler: Callable) -> None:
        self.routes.append((method, re.compile(pattern), handler))

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
