"""Client registration and scoped bearer tokens for the datastore.

Clients register a public key once (idempotently, keyed by the key's
fingerprint), an operator authorizes a scope policy for them, and they
trade a self-signed assertion for a short-lived opaque token. Every
token carries explicit path-prefix scopes with read and write flags.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any

from .. import crypto
from .core import split_path, is_path_prefix

TOKEN_TTL = 3600
ASSERTION_MAX_AGE = 300


class AuthzError(Exception):
    """Caller is not identified: unknown, expired, or malformed credentials."""


class AuthzDenied(Exception):
    """Caller is identified but the action is outside its scopes."""


@dataclass(frozen=True)
class ScopeEntry:
    prefix: str
    read: bool = False
    write: bool = False

    def to_json(self) -> dict[str, Any]:
        return {"prefix": self.prefix, "read": self.read, "write": self.write}

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "ScopeEntry":
        if not isinstance(doc, dict) or not isinstance(doc.get("prefix"), str):
            raise AuthzError("scope entries need a string prefix")
        return cls(
            prefix=doc["prefix"], read=bool(doc.get("read")), write=bool(doc.get("write"))
        )


def scope_covers(granted: ScopeEntry, wanted: ScopeEntry) -> bool:
    if wanted.read and not granted.read:
        return False
    if wanted.write and not granted.write:
        return False
    return is_path_prefix(split_path(granted.prefix), split_path(wanted.prefix))


def jwk_fingerprint(jwk: dict[str, Any]) -> str:
    required = {k: jwk.get(k) for k in ("crv", "kty", "x")}
    return crypto.hash_value(required).hex


def _jwk_public_bytes(jwk: dict[str, Any]) -> bytes:
    if not isinstance(jwk, dict) or jwk.get("kty") != "OKP" or jwk.get("crv") != "Ed25519":
        raise AuthzError("client key must be an Ed25519 OKP JWK")
    try:
        pub = crypto.b64url_decode(jwk["x"])
    except Exception as exc:
        raise AuthzError("bad JWK x coordinate") from exc
    if len(pub) != 32:
        raise AuthzError("bad JWK x coordinate")
    return pub


@dataclass
class ClientRecord:
    client_id: str
    name: str
    jwk: dict[str, Any]
    fingerprint: str
    authorized: list[ScopeEntry] | None = None


@dataclass
class TokenRecord:
    token: str
    subject: str
    scopes: list[ScopeEntry]
    expires_at: float


class AuthRegistry:
    def __init__(self, owner_token: str | None = None):
        self.owner_token = owner_token or crypto.random_token()
        self._clients: dict[str, ClientRecord] = {}
        self._by_fp: dict[str, str] = {}
        self._tokens: dict[str, TokenRecord] = {}
        self._lock = threading.Lock()

    def register_client(self, jwk: dict[str, Any], name: str) -> ClientRecord:
        _jwk_public_bytes(jwk)
        fp = jwk_fingerprint(jwk)
        with self._lock:
            if fp in self._by_fp:
                return self._clients[self._by_fp[fp]]
            client = ClientRecord(
                client_id="c-" + fp[:20], name=name, jwk=dict(jwk), fingerprint=fp
            )
            self._clients[client.client_id] = client
            self._by_fp[fp] = client.client_id
            return client

    def authorize_client(self, client_id: str, scopes: list[dict[str, Any]]) -> ClientRecord:
        parsed = [ScopeEntry.from_json(s) for s in scopes]
        with self._lock:
            client = self._clients.get(client_id)
            if client is None:
                raise AuthzError(f"unknown client {client_id!r}")
            client.authorized = parsed
            return client

    def client(self, client_id: str) -> ClientRecord | None:
        with self._lock:
            return self._clients.get(client_id)

    def issue_for_assertion(self, assertion: str) -> TokenRecord:
        """Verify a compact signed assertion and mint a scoped token.

        The assertion is header.payload.signature, all base64url. The
        payload names the client and optionally narrows the requested
        scopes; grants are the intersection with the authorized policy.
        """
        parts = assertion.split(".")
        if len(parts) != 3:
            raise AuthzError("assertion must have three segments")
        try:
            header = json.loads(crypto.b64url_decode(parts[0]))
            payload = json.loads(crypto.b64url_decode(parts[1]))
            signature = crypto.b64url_decode(parts[2])
        except Exception as exc:
            raise AuthzError("assertion is not decodable") from exc
        if not isinstance(header, dict) or header.get("alg") != "EdDSA":
            raise AuthzError("assertion alg must be EdDSA")
        if not isinstance(payload, dict):
            raise AuthzError("assertion payload must be an object")
        client = self.client(str(payload.get("client_id")))
        if client is None:
            raise AuthzError("assertion names an unknown client")
        signing_input = (parts[0] + "." + parts[1]).encode("ascii")
        try:
            ok = crypto.verify(_jwk_public_bytes(client.jwk), signing_input, signature)
        except crypto.MalformedKeyError as exc:
            raise AuthzError("client key unusable") from exc
        if not ok:
            raise AuthzError("assertion signature invalid")
        exp = payload.get("exp")
        now = time.time()
        if not isinstance(exp, int) or exp < now or exp > now + ASSERTION_MAX_AGE * 4:
            raise AuthzError("assertion expired or exp missing")
        if client.authorized is None:
            raise AuthzDenied(f"client {client.client_id} awaits authorization")
        if "scope" in payload:
            requested = [ScopeEntry.from_json(s) for s in payload["scope"]]
        else:
            requested = list(client.authorized)
        granted = [
            want
            for want in requested
            if any(scope_covers(have, want) for have in client.authorized)
        ]
        if not granted:
            raise AuthzDenied("no requested scope is authorized")
        return self._mint(client.client_id, granted, TOKEN_TTL)

    def mint_token(self, subject: str, scopes: list[dict[str, Any]], ttl: int = TOKEN_TTL) -> TokenRecord:
        return self._mint(subject, [ScopeEntry.from_json(s) for s in scopes], ttl)

    def _mint(self, subject: str, scopes: list[ScopeEntry], ttl: int) -> TokenRecord:
        record = TokenRecord(
            token=crypto.random_token(),
            subject=subject,
            scopes=scopes,
            expires_at=time.time() + ttl,
        )
        with self._lock:
            self._tokens[record.token] = record
        return record

    def check(self, token: str | None, path: str, write: bool) -> TokenRecord:
        if not token:
            raise AuthzError("missing bearer token")
        if token == self.owner_token:
            return TokenRecord(
                token=token,
                subject="owner",
                scopes=[ScopeEntry("/", read=True, write=True)],
                expires_at=float("inf"),
            )
        with self._lock:
            record = self._tokens.get(token)
        if record is None:
            raise AuthzError("unknown token")
        if record.expires_at < time.time():
            raise AuthzError("token expired")
        wanted = ScopeEntry(prefix=path, read=not write, write=write)
        if not any(scope_covers(s, wanted) for s in record.scopes):
            verb = "write" if write else "read"
            raise AuthzDenied(f"token may not {verb} {path}")
        return record

    def is_owner(self, token: str | None) -> bool:
        return bool(token) and token == self.owner_token
