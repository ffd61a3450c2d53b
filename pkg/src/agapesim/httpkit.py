"""Small JSON-over-HTTP service kit shared by every network-facing piece.

One router maps (method, path pattern) to a handler. Handlers take a
Request and return a JSON-encodable value, or raise an ApiError to send
a structured error with the right status code. Serving happens on a
thread-per-request loopback server, which is plenty for a desk-scale
deployment and keeps the stack dependency-free on the server side.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable
from urllib.parse import parse_qs, unquote, urlsplit

log = logging.getLogger(__name__)


class ApiError(Exception):
    status = 400
    code = "bad_request"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class BadRequest(ApiError):
    status = 400
    code = "bad_request"


class Unauthorized(ApiError):
    status = 401
    code = "unauthorized"


class Forbidden(ApiError):
    status = 403
    code = "forbidden"


class NotFound(ApiError):
    status = 404
    code = "not_found"


class Conflict(ApiError):
    status = 409
    code = "conflict"


@dataclass
class Request:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, list[str]]
    headers: dict[str, str]
    body: Any

    def header(self, name: str) -> str | None:
        return self.headers.get(name.lower())

    def bearer_token(self) -> str | None:
        auth = self.header("authorization")
        if auth and auth.lower().startswith("bearer "):
            return auth[7:].strip()
        return None


@dataclass
class JsonResponse:
    value: Any
    status: int = 200
    headers: dict[str, str] = field(default_factory=dict)


Handler = Callable[[Request], Any]


@dataclass
class _Route:
    method: str
    segments: list[str]
    handler: Handler

    def match(self, method: str, parts: list[str]) -> dict[str, str] | None:
        if method != self.method:
            return None
        params: dict[str, str] = {}
        for i, seg in enumerate(self.segments):
            if seg.startswith("{") and seg.endswith("...}"):
                if i != len(self.segments) - 1:
                    raise ValueError("tail parameter must be last")
                if len(parts) < i + 1:
                    return None
                params[seg[1:-4]] = "/".join(parts[i:])
                return params
            if i >= len(parts):
                return None
            if seg.startswith("{") and seg.endswith("}"):
                params[seg[1:-1]] = parts[i]
            elif seg != parts[i]:
                return None
        if len(parts) != len(self.segments):
            return None
        return params


class Router:
    def __init__(self) -> None:
        self._routes: list[_Route] = []

    def route(self, method: str, pattern: str) -> Callable[[Handler], Handler]:
        segments = [s for s in pattern.split("/") if s]

        def register(fn: Handler) -> Handler:
            self._routes.append(_Route(method.upper(), segments, fn))
            return fn

        return register

    def dispatch(self, req: Request) -> Any:
        parts = [unquote(s) for s in req.path.split("/") if s]
        for route in self._routes:
            params = route.match(req.method, parts)
            if params is not None:
                req.params = params
                return route.handler(req)
        raise NotFound(f"no route for {req.method} {req.path}")


@dataclass
class JsonHttpServer:
    router: Router
    host: str = "127.0.0.1"
    port: int = 0
    name: str = "service"
    _httpd: ThreadingHTTPServer | None = field(default=None, repr=False)
    _thread: threading.Thread | None = field(default=None, repr=False)

    def start(self) -> int:
        router = self.router
        service_name = self.name

        class _Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"
            # without this, keep-alive requests stall ~40ms on delayed ACKs
            disable_nagle_algorithm = True

            def log_message(self, fmt: str, *args: Any) -> None:
                log.debug("%s %s", service_name, fmt % args)

            def _respond(self, status: int, value: Any, headers: dict[str, str] | None = None) -> None:
                payload = json.dumps(value, ensure_ascii=False).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json; charset=utf-8")
                self.send_header("Content-Length", str(len(payload)))
                for name, val in (headers or {}).items():
                    self.send_header(name, val)
                self.end_headers()
                self.wfile.write(payload)

            def _handle(self) -> None:
                split = urlsplit(self.path)
                body: Any = None
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                if raw:
                    try:
                        body = json.loads(raw.decode("utf-8"))
                    except (UnicodeDecodeError, json.JSONDecodeError):
                        self._respond(
                            400, {"error": {"code": "bad_request", "message": "body is not JSON"}}
                        )
                        return
                req = Request(
                    method=self.command,
                    path=split.path,
                    params={},
                    query=parse_qs(split.query),
                    headers={k.lower(): v for k, v in self.headers.items()},
                    body=body,
                )
                try:
                    result = router.dispatch(req)
                except ApiError as exc:
                    self._respond(exc.status, {"error": {"code": exc.code, "message": str(exc)}})
                    return
                except Exception:
                    log.exception("unhandled error in %s for %s %s", service_name, req.method, req.path)
                    self._respond(500, {"error": {"code": "internal", "message": "internal error"}})
                    return
                if isinstance(result, JsonResponse):
                    self._respond(result.status, result.value, result.headers)
                elif isinstance(result, tuple):
                    status, value = result
                    self._respond(status, value)
                else:
                    self._respond(200, result)

            do_GET = _handle
            do_PUT = _handle
            do_POST = _handle
            do_DELETE = _handle

        self._httpd = ThreadingHTTPServer((self.host, self.port), _Handler)
        self._httpd.daemon_threads = True
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, name=f"http-{self.name}", daemon=True
        )
        self._thread.start()
        return self.port

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self) -> None:
        if self._httpd is not None:
            self._httpd.shutdown()
            self._httpd.server_close()
            self._httpd = None
