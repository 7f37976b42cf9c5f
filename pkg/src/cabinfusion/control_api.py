"""HTTP+JSON control/status API with a server-sent-events live stream.

Endpoints (all JSON):
    POST /session/start           {"subject_pseudo_id"?, "devices"?} -> {"session_id"}
    POST /session/{id}/annotate   {"kind", "value", "ts"?}           -> {"ok": true}
    POST /session/{id}/stop                                          -> session summary
    GET  /status                                                     -> live status document
    GET  /stream                  text/event-stream: one initial status event,
                                  then row/status events in order

Workstation-local tool: no auth/TLS by design. Permissive CORS headers are
sent so the browser console can talk to it from another origin.
"""

from __future__ import annotations

import json
import queue
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .collector import Collector, now_ms
from .errors import CabinError, ConfigError, NotFoundError, StateError, TransportError, ValidationError
from .model import Annotation

_ERROR_STATUS = {
    ValidationError: 400,
    ConfigError: 400,
    StateError: 409,
    NotFoundError: 404,
    TransportError: 502,
}


def _status_for(exc: CabinError) -> int:
    for cls, code in _ERROR_STATUS.items():
        if isinstance(exc, cls):
            return code
    return 500


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    collector: Collector  # set by ControlServer

    def log_message(self, *_args) -> None:  # keep test output quiet
        pass

    # -- helpers -----------------------------------------------------------

    def _cors(self) -> None:
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send_json(self, code: int, doc: dict) -> None:
        body = json.dumps(doc).encode()
        self.send_response(code)
        self._cors()
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if not length:
            return {}
        try:
            return json.loads(self.rfile.read(length))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad JSON body: {exc}") from exc

    # -- routes ------------------------------------------------------------

    def do_OPTIONS(self) -> None:  # noqa: N802 - BaseHTTPRequestHandler naming
        self.send_response(204)
        self._cors()
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self) -> None:  # noqa: N802
        if self.path == "/status":
            self._send_json(200, self.collector.status())
        elif self.path == "/stream":
            self._stream()
        else:
            self._send_json(404, {"error": f"no route {self.path}"})

    def do_POST(self) -> None:  # noqa: N802
        try:
            self._route_post()
        except CabinError as exc:
            self._send_json(_status_for(exc), {"error": str(exc)})

    def _route_post(self) -> None:
        parts = [p for p in self.path.split("/") if p]
        if parts == ["session", "start"]:
            body = self._read_body()
            session_id = self.collector.start_session(
                subject_pseudo_id=body.get("subject_pseudo_id"), devices=body.get("devices")
            )
            self._send_json(200, {"session_id": session_id})
        elif len(parts) == 3 and parts[0] == "session" and parts[2] == "annotate":
            body = self._read_body()
            if "kind" not in body or "value" not in body:
                raise ValidationError("annotation needs kind and value")
            annotation = Annotation(ts=body.get("ts", now_ms()), kind=body["kind"], value=body["value"])
            self.collector.annotate(parts[1], annotation)
            self._send_json(200, {"ok": True})
        elif len(parts) == 3 and parts[0] == "session" and parts[2] == "stop":
            summary = self.collector.stop_session(parts[1])
            self._send_json(200, summary.to_dict())
        else:
            self._send_json(404, {"error": f"no route {self.path}"})

    def _stream(self) -> None:
        consumer = self.collector.subscribe_stream()
        try:
            self.send_response(200)
            self._cors()
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Connection", "close")
            self.end_headers()
            while True:
                try:
                    event = consumer.get(timeout=15.0)
                except queue.Empty:
                    self.wfile.write(b": keepalive\n\n")
                    self.wfile.flush()
                    continue
                payload = json.dumps(event["data"])
                self.wfile.write(f"event: {event['event']}\ndata: {payload}\n\n".encode())
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            self.collector.unsubscribe_stream(consumer)


class ControlServer:
    """Threaded HTTP server wrapper; one handler thread per request, stream
    requests hold their thread for the connection's lifetime."""

    def __init__(self, collector: Collector, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"collector": collector})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="control-api", daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._httpd.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ControlServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
