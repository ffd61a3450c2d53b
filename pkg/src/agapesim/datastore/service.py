"""Network face of the datastore: JSON HTTP routes plus a TCP change feed.

HTTP covers registration, token issuance, and resource reads and writes.
Change feeds run over a plain TCP socket: the client sends one line of
JSON naming its token and watch path, gets one acknowledgment line, and
then receives each matching change event as one line of canonical JSON.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading

from .. import crypto
from ..httpkit import (
    BadRequest,
    Forbidden,
    JsonHttpServer,
    JsonResponse,
    NotFound,
    Router,
    Unauthorized,
)
from .auth import TOKEN_TTL, AuthRegistry, AuthzDenied, AuthzError
from .core import GraphStore, InvalidDelta, InvalidPath, MissingPath

log = logging.getLogger(__name__)

_FEED_STOP = object()


class FeedServer:
    def __init__(self, store: GraphStore, auth: AuthRegistry, host: str = "127.0.0.1", port: int = 0):
        self._store = store
        self._auth = auth
        self._host = host
        self.port = port
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._queues: set[queue.Queue] = set()
        self._lock = threading.Lock()
        self._running = False

    def start(self) -> int:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self._host, self.port))
        self._listener.listen(32)
        self.port = self._listener.getsockname()[1]
        self._running = True
        accept_thread = threading.Thread(target=self._accept_loop, name="feed-accept", daemon=True)
        accept_thread.start()
        self._threads.append(accept_thread)
        return self.port

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _addr = self._listener.accept()
            except OSError:
                return
            worker = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            worker.start()
            self._threads.append(worker)

    def _serve(self, conn: socket.socket) -> None:
        events: queue.Queue = queue.Queue()
        unsubscribe = None
        reader = conn.makefile("rb")
        try:
            line = reader.readline()
            if not line:
                return
            try:
                hello = json.loads(line.decode("utf-8"))
                token = hello.get("token")
                path = hello.get("path")
                self._auth.check(token, path, write=False)
            except (AuthzError, AuthzDenied, ValueError, AttributeError, InvalidPath) as exc:
                conn.sendall(
                    crypto.canonical_serialize(
                        {"ok": False, "error": {"code": "denied", "message": str(exc)}}
                    )
                    + b"\n"
                )
                return
            # subscribe before acking so the client can snapshot after the
            # ack without a gap; merge idempotence absorbs any overlap
            unsubscribe = self._store.subscribe(path, events.put)
            with self._lock:
                self._queues.add(events)
            conn.sendall(crypto.canonical_serialize({"ok": True}) + b"\n")
            while self._running:
                item = events.get()
                if item is _FEED_STOP:
                    return
                conn.sendall(crypto.canonical_serialize(item.to_json()) + b"\n")
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            if unsubscribe is not None:
                unsubscribe()
            with self._lock:
                self._queues.discard(events)
            try:
                conn.close()
            except OSError:
                pass

    def stop(self) -> None:
        self._running = False
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            for q in list(self._queues):
                q.put(_FEED_STOP)


class DatastoreService:
    """Bundles a store, its auth registry, the HTTP server, and the feed."""

    def __init__(
        self,
        store: GraphStore | None = None,
        auth: AuthRegistry | None = None,
        host: str = "127.0.0.1",
        http_port: int = 0,
        feed_port: int = 0,
        log_path: str | None = None,
    ):
        self.store = store or GraphStore(log_path=log_path)
        self.auth = auth or AuthRegistry()
        self.feed = FeedServer(self.store, self.auth, host=host, port=feed_port)
        self._http = JsonHttpServer(self._build_router(), host=host, port=http_port, name="datastore")

    @property
    def owner_token(self) -> str:
        return self.auth.owner_token

    @property
    def url(self) -> str:
        return self._http.url

    @property
    def feed_addr(self) -> tuple[str, int]:
        return (self._http.host, self.feed.port)

    def start(self) -> "DatastoreService":
        self._http.start()
        self.feed.start()
        return self

    def stop(self) -> None:
        self._http.stop()
        self.feed.stop()
        self.store.close()

    def _require_owner(self, req) -> None:
        if not self.auth.is_owner(req.bearer_token()):
            raise Forbidden("operator token required")

    def _build_router(self) -> Router:
        router = Router()
        auth = self.auth
        store = self.store

        @router.route("GET", "/meta")
        def meta(req):
            return {"feed_host": self._http.host, "feed_port": self.feed.port}

        @router.route("POST", "/clients/register")
        def register(req):
            body = req.body or {}
            if not isinstance(body.get("jwk"), dict):
                raise BadRequest("jwk object required")
            try:
                client = auth.register_client(body["jwk"], str(body.get("name", "")))
            except AuthzError as exc:
                raise BadRequest(str(exc))
            return {
                "client_id": client.client_id,
                "status": "authorized" if client.authorized is not None else "pending",
            }

        @router.route("POST", "/clients/authorize")
        def authorize(req):
            self._require_owner(req)
            body = req.body or {}
            try:
                client = auth.authorize_client(str(body.get("client_id")), body.get("scopes") or [])
            except AuthzError as exc:
                raise NotFound(str(exc))
            return {"client_id": client.client_id, "status": "authorized"}

        @router.route("POST", "/token")
        def token(req):
            body = req.body or {}
            if body.get("grant_type") != "urn:ietf:params:oauth:grant-type:jwt-bearer":
                raise BadRequest("unsupported grant_type")
            try:
                record = auth.issue_for_assertion(str(body.get("assertion", "")))
            except AuthzError as exc:
                raise Unauthorized(str(exc))
            except AuthzDenied as exc:
                raise Forbidden(str(exc))
            return {
                "access_token": record.token,
                "token_type": "bearer",
                "expires_in": TOKEN_TTL,
                "scope": [s.to_json() for s in record.scopes],
            }

        @router.route("POST", "/tokens")
        def mint(req):
            self._require_owner(req)
            body = req.body or {}
            scopes = body.get("scopes")
            if not isinstance(scopes, list) or not scopes:
                raise BadRequest("scopes list required")
            try:
                record = auth.mint_token(
                    str(body.get("subject", "operator")), scopes, int(body.get("ttl", 3600))
                )
            except AuthzError as exc:
                raise BadRequest(str(exc))
            return {
                "access_token": record.token,
                "token_type": "bearer",
                "scope": [s.to_json() for s in record.scopes],
            }

        @router.route("GET", "/resources/{path...}")
        def get_resource(req):
            path = "/" + req.params["path"]
            self._authz(req, path, write=False)
            try:
                value, meta = store.get_with_meta(path)
            except MissingPath:
                raise NotFound(f"nothing stored at {path}")
            except InvalidPath as exc:
                raise BadRequest(str(exc))
            headers = {}
            if meta is not None:
                headers["X-Resource-Rev"] = str(meta.rev)
                headers["X-Resource-Id"] = meta.resource_id
            return JsonResponse(value, headers=headers)

        @router.route("PUT", "/resources/{path...}")
        def put_resource(req):
            path = "/" + req.params["path"]
            self._authz(req, path, write=True)
            try:
                return store.merge(path, req.body)
            except (InvalidPath, InvalidDelta) as exc:
                raise BadRequest(str(exc))

        return router

    def _authz(self, req, path: str, write: bool) -> None:
        try:
            self.auth.check(req.bearer_token(), path, write=write)
        except AuthzError as exc:
            raise Unauthorized(str(exc))
        except AuthzDenied as exc:
            raise Forbidden(str(exc))
