"""HTTP ingestion gateway.

``POST /ingest/<topic>`` stores the body first (the storage sink is the
system of record, so a storage failure fails the request with 503) and then
hands it to the dispatcher, which is best effort. ``GET /healthz`` reports
liveness and counters.
"""
from __future__ import annotations

import hmac
import http.client
import json
import logging
import threading
import time
import urllib.parse
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .pubsub import CloudEnvelope, Dispatcher, InvalidTopic, check_topic
from .storage import StorageSink, StorageUnavailable

log = logging.getLogger(__name__)

TOKEN_HEADER = "X-MSight-Token"
MAX_BODY = 4 * 1024 * 1024


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True  # small replies on keep-alive would otherwise stall on delayed ACKs
    server: "_Server"

    def log_message(self, fmt, *args):  # keep test output quiet
        log.debug("%s " + fmt, self.address_string(), *args)

    def _reply(self, code: int, body: dict):
        raw = json.dumps(body).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(raw)))
        self.end_headers()
        self.wfile.write(raw)

    def do_GET(self):
        if self.path != "/healthz":
            return self._reply(404, {"error": "not found"})
        gw = self.server.gateway
        self._reply(200, {"ok": True, "ingested": gw.ingested, "stored": gw.sink.records,
                          "dropped": gw.dispatcher.stats.dropped})

    def do_POST(self):
        gw = self.server.gateway
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self.close_connection = True
            return self._reply(411, {"error": "length required"})
        if not self.path.startswith("/ingest/"):
            self._discard(length)
            return self._reply(404, {"error": "not found"})
        token = self.headers.get(TOKEN_HEADER, "")
        if not hmac.compare_digest(token.encode(), gw.token.encode()):
            self._discard(length)
            return self._reply(401, {"error": "unauthorized"})
        if length > gw.max_body:
            self.close_connection = True  # do not read the oversized body
            return self._reply(413, {"error": "body too large", "limit": gw.max_body})
        try:
            topic = check_topic(self.path[len("/ingest/"):])
        except InvalidTopic as e:
            self._discard(length)
            return self._reply(400, {"error": str(e)})
        body = self.rfile.read(length)
        env = CloudEnvelope(topic, int(gw.clock()), body, self.headers.get("X-MSight-Source", self.client_address[0]))
        try:
            gw.sink.append(env)
        except StorageUnavailable as e:
            return self._reply(503, {"error": f"storage unavailable: {e}"})
        rep = gw.dispatcher.publish(env)
        with gw._lock:
            gw.ingested += 1
        self._reply(200, {"stored": True, "delivered": rep.delivered, "dropped": rep.dropped})

    def _discard(self, length: int):
        if 0 < length <= self.server.gateway.max_body:
            self.rfile.read(length)
        else:
            self.close_connection = True


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    gateway: "Gateway"


class Gateway:
    def __init__(self, dispatcher: Dispatcher, sink: StorageSink, token: str, host: str = "127.0.0.1",
                 port: int = 0, max_body: int = MAX_BODY, clock=lambda: time.time() * 1000.0):
        if not token:
            raise ValueError("a non-empty token is required")
        self.dispatcher = dispatcher
        self.sink = sink
        self.token = token
        self.max_body = max_body
        self.clock = clock
        self.ingested = 0
        self._lock = threading.Lock()
        self._server = _Server((host, port), _Handler)
        self._server.gateway = self
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        h, p = self.address
        return f"http://{h}:{p}"

    def start(self) -> "Gateway":
        self._thread = threading.Thread(target=self._server.serve_forever, name="gateway", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class IngestClient:
    """Keep-alive HTTP client for the gateway (edge side, tests, benchmarks)."""

    def __init__(self, url: str, token: str, source: str = "", timeout: float = 10.0):
        u = urllib.parse.urlsplit(url)
        self._conn = http.client.HTTPConnection(u.hostname, u.port, timeout=timeout)
        self.token = token
        self.source = source

    def post(self, topic: str, body: bytes, content_type: str = "application/octet-stream") -> tuple[int, dict]:
        headers = {TOKEN_HEADER: self.token, "Content-Type": content_type}
        if self.source:
            headers["X-MSight-Source"] = self.source
        self._conn.request("POST", f"/ingest/{topic}", body=body, headers=headers)
        r = self._conn.getresponse()
        data = r.read()
        if r.getheader("Connection", "").lower() == "close":
            self._conn.close()
        return r.status, json.loads(data or b"{}")

    def get(self, path: str) -> tuple[int, dict]:
        self._conn.request("GET", path)
        r = self._conn.getresponse()
        return r.status, json.loads(r.read() or b"{}")

    def close(self):
        self._conn.close()
