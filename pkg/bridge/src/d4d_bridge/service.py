"""HTTP service exposing the denoising wire protocol.

``GET /v1/health`` reports the protocol version and loaded slots;
``POST /v1/denoise`` runs one slot. Error mapping: malformed framing is
400, an unloaded slot is 409, saturation beyond the configured
concurrency limit is 429, and backend failures are 500. Mock mode loads
the identity backend in every slot and needs no model assets.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .models import BackendError, ModelSlot
from .protocol import VERSION, ProtocolError, parse_request, serialize_response


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8941
    max_concurrency: int = 2
    slots: dict = field(default_factory=dict)  # kind -> model id
    # artificial per-request delay, used by backpressure tests
    mock_delay_s: float = 0.0

    @staticmethod
    def mock(port: int = 0, **kwargs) -> "ServiceConfig":
        return ServiceConfig(
            port=port,
            slots={"image2d": "mock", "multiview3d": "mock", "video": "mock"},
            **kwargs,
        )


class GuidanceService:
    """Slot registry plus the HTTP server lifecycle."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.slots = {
            kind: ModelSlot(kind, model_id, guidance_scale=100.0)
            for kind, model_id in config.slots.items()
        }
        self._sem = threading.Semaphore(config.max_concurrency)
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # ---- request handling (transport-independent) ----------------------

    def health_body(self) -> bytes:
        return json.dumps(
            {"version": VERSION, "slots": sorted(self.slots)}, sort_keys=True
        ).encode("utf-8")

    def handle_denoise(self, blob: bytes) -> tuple[int, bytes]:
        """Returns (http_status, body). Body is a protocol frame on 200."""
        try:
            request = parse_request(blob)
        except ProtocolError as exc:
            return 400, json.dumps({"error": str(exc)}).encode()
        slot = self.slots.get(request.kind)
        if slot is None:
            return 409, json.dumps(
                {"error": f"no model loaded for kind {request.kind!r}"}
            ).encode()
        try:
            response = slot.run(request)
        except BackendError as exc:
            return 500, json.dumps(
                {"error": str(exc), "provider_id": slot.model_id}
            ).encode()
        return 200, serialize_response(response)

    # ---- HTTP plumbing ---------------------------------------------------

    def _make_handler(self):
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # tests stay quiet
                pass

            def _send(self, status: int, body: bytes, ctype: str):
                self.send_response(status)
                self.send_header("Content-Type", ctype)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_GET(self):
                if self.path == "/v1/health":
                    self._send(200, service.health_body(), "application/json")
                else:
                    self._send(404, b'{"error": "not found"}', "application/json")

            def do_POST(self):
                if self.path != "/v1/denoise":
                    self._send(404, b'{"error": "not found"}', "application/json")
                    return
                if not service._sem.acquire(blocking=False):
                    self._send(
                        429, b'{"error": "concurrency limit reached"}', "application/json"
                    )
                    return
                try:
                    if service.config.mock_delay_s > 0:
                        import time

                        time.sleep(service.config.mock_delay_s)
                    n = int(self.headers.get("Content-Length", 0))
                    blob = self.rfile.read(n)
                    status, body = service.handle_denoise(blob)
                finally:
                    service._sem.release()
                ctype = (
                    "application/octet-stream" if status == 200 else "application/json"
                )
                self._send(status, body, ctype)

        return Handler

    def start(self) -> str:
        """Bind and serve on a background thread; returns the endpoint URL."""
        self._server = ThreadingHTTPServer(
            (self.config.host, self.config.port), self._make_handler()
        )
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def stop(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def serve_forever(self) -> None:  # pragma: no cover - CLI path
        url = self.start()
        print(f"guidance service listening at {url} (slots: {sorted(self.slots)})")
        try:
            self._thread.join()
        except KeyboardInterrupt:
            self.stop()
