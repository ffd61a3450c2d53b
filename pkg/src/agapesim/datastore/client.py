"""HTTP and feed-socket client for the datastore."""

from __future__ import annotations

import json
import socket
import time
from typing import Any, Iterator

import requests

from .. import crypto


class RemoteStoreError(Exception):
    def __init__(self, message: str, status: int = 0, code: str = ""):
        super().__init__(message)
        self.status = status
        self.code = code


class ResourceNotFound(RemoteStoreError):
    pass


class AccessDenied(RemoteStoreError):
    pass


def build_assertion(
    client_id: str,
    secret: bytes,
    scopes: list[dict[str, Any]] | None = None,
    lifetime: int = 120,
) -> str:
    """Compact signed token request: header.payload.signature, base64url."""
    header = crypto.b64url_nopad(crypto.canonical_serialize({"alg": "EdDSA"}))
    claims: dict[str, Any] = {"client_id": client_id, "exp": int(time.time()) + lifetime}
    if scopes is not None:
        claims["scope"] = scopes
    payload = crypto.b64url_nopad(crypto.canonical_serialize(claims))
    signature = crypto.sign(secret, (header + "." + payload).encode("ascii"))
    return header + "." + payload + "." + crypto.b64url_nopad(signature)


def public_jwk(public: bytes) -> dict[str, str]:
    return {"kty": "OKP", "crv": "Ed25519", "x": crypto.b64url_nopad(public)}


def _raise_for(resp: requests.Response) -> None:
    if resp.ok:
        return
    code, message = "", resp.text[:200]
    try:
        err = resp.json().get("error", {})
        code, message = err.get("code", ""), err.get("message", "")
    except ValueError:
        pass
    cls = RemoteStoreError
    if resp.status_code == 404:
        cls = ResourceNotFound
    elif resp.status_code in (401, 403):
        cls = AccessDenied
    raise cls(f"{resp.status_code}: {message}", status=resp.status_code, code=code)


class FeedSubscription:
    """One live feed connection. Iterate for events, close when done."""

    def __init__(self, host: str, port: int, token: str, path: str, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rb")
        hello = json.dumps({"token": token, "path": path}).encode("utf-8") + b"\n"
        self._sock.sendall(hello)
        ack_line = self._file.readline()
        if not ack_line:
            raise RemoteStoreError("feed closed before acknowledging")
        ack = json.loads(ack_line.decode("utf-8"))
        if not ack.get("ok"):
            err = ack.get("error") or {}
            raise AccessDenied(str(err.get("message", "feed denied")), code=err.get("code", ""))
        self._sock.settimeout(None)

    def events(self) -> Iterator[dict[str, Any]]:
        while True:
            line = self._file.readline()
            if not line:
                return
            yield json.loads(line.decode("utf-8"))

    def next_event(self, timeout: float | None = None) -> dict[str, Any] | None:
        self._sock.settimeout(timeout)
        try:
            line = self._file.readline()
        except (socket.timeout, OSError):
            return None
        finally:
            try:
                self._sock.settimeout(None)
            except OSError:
                pass
        if not line:
            return None
        return json.loads(line.decode("utf-8"))

    def close(self) -> None:
        # shutdown wakes any thread blocked in readline; close alone does not
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class DatastoreClient:
    def __init__(
        self,
        base_url: str,
        feed_addr: tuple[str, int] | None = None,
        token: str | None = None,
        timeout: float = 30.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.feed_addr = feed_addr
        self.token = token
        self.timeout = timeout
        self._session = requests.Session()

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def discover_feed(self) -> tuple[str, int]:
        resp = self._session.get(self.base_url + "/meta", timeout=self.timeout)
        _raise_for(resp)
        doc = resp.json()
        self.feed_addr = (doc["feed_host"], doc["feed_port"])
        return self.feed_addr

    def register(self, jwk: dict[str, Any], name: str) -> dict[str, Any]:
        resp = self._session.post(
            self.base_url + "/clients/register",
            json={"jwk": jwk, "name": name},
            timeout=self.timeout,
        )
        _raise_for(resp)
        return resp.json()

    def authorize_client(self, client_id: str, scopes: list[dict[str, Any]]) -> dict[str, Any]:
        resp = self._session.post(
            self.base_url + "/clients/authorize",
            json={"client_id": client_id, "scopes": scopes},
            headers=self._headers(),
            timeout=self.timeout,
        )
        _raise_for(resp)
        return resp.json()

    def obtain_token(
        self, client_id: str, secret: bytes, scopes: list[dict[str, Any]] | None = None
    ) -> str:
        assertion = build_assertion(client_id, secret, scopes)
        resp = self._session.post(
            self.base_url + "/token",
            json={
                "grant_type": "urn:ietf:params:oauth:grant-type:jwt-bearer",
                "assertion": assertion,
            },
            timeout=self.timeout,
        )
        _raise_for(resp)
        self.token = resp.json()["access_token"]
        return self.token

    def mint_token(self, scopes: list[dict[str, Any]], ttl: int = 3600, subject: str = "operator") -> str:
        resp = self._session.post(
            self.base_url + "/tokens",
            json={"scopes": scopes, "ttl": ttl, "subject": subject},
            headers=self._headers(),
            timeout=self.timeout,
        )
        _raise_for(resp)
        return resp.json()["access_token"]

    def _resource_url(self, path: str) -> str:
        return self.base_url + "/resources/" + path.lstrip("/")

    def get(self, path: str) -> Any:
        resp = self._session.get(
            self._resource_url(path), headers=self._headers(), timeout=self.timeout
        )
        _raise_for(resp)
        return resp.json()

    def get_with_rev(self, path: str) -> tuple[Any, int | None]:
        resp = self._session.get(
            self._resource_url(path), headers=self._headers(), timeout=self.timeout
        )
        _raise_for(resp)
        rev = resp.headers.get("X-Resource-Rev")
        return resp.json(), int(rev) if rev is not None else None

    def fetch_optional(self, path: str) -> Any:
        try:
            return self.get(path)
        except ResourceNotFound:
            return None

    def put(self, path: str, delta: Any) -> dict[str, Any]:
        resp = self._session.put(
            self._resource_url(path),
            data=json.dumps(delta, ensure_ascii=False).encode("utf-8"),
            headers=self._headers(),
            timeout=self.timeout,
        )
        _raise_for(resp)
        return resp.json()

    def watch(self, path: str, timeout: float = 10.0) -> FeedSubscription:
        if self.feed_addr is None:
            raise RemoteStoreError("client was built without a feed address")
        if not self.token:
            raise AccessDenied("watch needs a token")
        return FeedSubscription(self.feed_addr[0], self.feed_addr[1], self.token, path, timeout)
