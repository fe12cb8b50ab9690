"""HTTP ingestion service.

``POST /reports``   signed envelope JSON -> acceptance record, or 4xx + reason
``GET /risk?res=N`` current risk raster as CSV
``GET /health``     version info
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

from gridwatch import __version__
from gridwatch.contingency import ScreeningPolicy, analyze, derive_probabilities
from gridwatch.grid import GridSpec
from gridwatch.reports import (
    DEFAULT_GEO,
    DEFAULT_RADIUS_M,
    DeviceRegistry,
    GeoReference,
    Rejection,
    ReportStore,
    ingest,
    now_ms,
)
from gridwatch.riskmap import raster_csv, risk_surface

log = logging.getLogger(__name__)

MAX_BODY = 1 << 20


@dataclass
class ReportService:
    registry: DeviceRegistry
    store: ReportStore
    spec: GridSpec
    policy: ScreeningPolicy = field(default_factory=ScreeningPolicy)
    radius: float = DEFAULT_RADIUS_M
    geo: GeoReference = DEFAULT_GEO
    clock: Callable[[], int] = now_ms
    _risk_cache: dict[tuple[int, int], str] = field(default_factory=dict, repr=False)
    _risk_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def submit(self, body: bytes) -> tuple[int, dict]:
        try:
            rec = ingest(body, self.registry, self.store, self.spec, self.clock(), self.radius, self.geo)
        except Rejection as rej:
            return rej.status, rej.to_dict()
        return 200, rec.to_dict()

    def risk_csv(self, res: int) -> str:
        reports = self.store.snapshot()
        key = (len(reports), res)
        with self._risk_lock:
            if key not in self._risk_cache:
                probs = derive_probabilities(reports, self.spec, self.policy.floor)
                assessment = analyze(self.spec, probs, self.policy)
                self._risk_cache.clear()
                self._risk_cache[key] = raster_csv(risk_surface(assessment, self.spec, res))
            return self._risk_cache[key]

    def health(self) -> dict:
        return {"status": "ok", "version": __version__, "accepted": len(self.store.records)}


def make_handler(service: ReportService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        server_version = f"gridwatch/{__version__}"

        def log_message(self, fmt: str, *args) -> None:
            log.info("%s %s", self.address_string(), fmt % args)

        def _send(self, status: int, body: bytes, ctype: str) -> None:
            self.send_response(status)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _json(self, status: int, doc: dict) -> None:
            self._send(status, json.dumps(doc).encode(), "application/json")

        def do_GET(self) -> None:
            url = urlsplit(self.path)
            if url.path == "/health":
                self._json(200, service.health())
            elif url.path == "/risk":
                qs = parse_qs(url.query)
                try:
                    res = int(qs.get("res", ["20"])[0])
                    if not 2 <= res <= 500:
                        raise ValueError
                except ValueError:
                    self._json(400, {"error": "res must be an integer in [2, 500]"})
                    return
                self._send(200, service.risk_csv(res).encode(), "text/csv")
            else:
                self._json(404, {"error": "not found"})

        def do_POST(self) -> None:
            if urlsplit(self.path).path != "/reports":
                self._json(404, {"error": "not found"})
                return
            length = int(self.headers.get("Content-Length") or 0)
            if length > MAX_BODY:
                self._json(413, {"decision": "rejected", "reason": "TooLarge", "detail": ""})
                return
            status, doc = service.submit(self.rfile.read(length))
            self._json(status, doc)

    return Handler


class _Server(ThreadingHTTPServer):
    # the default backlog of 5 resets connections under bursty submission
    request_queue_size = 256


def make_server(service: ReportService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    server = _Server((host, port), make_handler(service))
    server.daemon_threads = True
    return server
