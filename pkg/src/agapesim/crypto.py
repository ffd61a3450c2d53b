"""Canonical serialization, hashing, and signature primitives.

Every hash in the system is SHA-256 over a canonical JSON encoding, so
two parties that hold the same logical document always derive the same
digest regardless of key insertion order or formatting. Signatures are
Ed25519. Group signatures are modeled as an ordinary member signature
checked against the whole set of member public keys, which keeps the
verifier interface anonymous: it answers yes or no, never who signed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import secrets
from dataclasses import dataclass, field
from typing import Any, Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class CryptoError(Exception):
    pass


class CanonicalizationError(CryptoError):
    """The value cannot be given a canonical byte encoding."""


class MalformedKeyError(CryptoError):
    pass


def _check_tree(value: Any, path: str) -> None:
    if value is None or value is True or value is False:
        return
    if isinstance(value, float):
        raise CanonicalizationError(
            f"float at {path or '$'}: carry non-integers as decimal strings"
        )
    if isinstance(value, int):
        return
    if isinstance(value, str):
        return
    if isinstance(value, list):
        for i, item in enumerate(value):
            _check_tree(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"non-string key {key!r} at {path or '$'}")
            _check_tree(item, f"{path}.{key}")
        return
    raise CanonicalizationError(f"unsupported type {type(value).__name__} at {path or '$'}")


def canonical_serialize(value: Any) -> bytes:
    """Encode a JSON value to its single canonical UTF-8 byte string.

    Keys are sorted, no whitespace is emitted, and non-ASCII text stays
    literal. Floats are rejected outright rather than risking locale or
    rounding skew between peers.
    """
    _check_tree(value, "")
    try:
        text = json.dumps(
            value,
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
            allow_nan=False,
        )
    except ValueError as exc:
        raise CanonicalizationError(str(exc)) from exc
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise CanonicalizationError(f"unencodable text: {exc}") from exc


@dataclass(frozen=True)
class Digest:
    raw: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.raw, bytes) or len(self.raw) != 32:
            raise CryptoError("digest must be exactly 32 bytes")

    @property
    def hex(self) -> str:
        return self.raw.hex()

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise CryptoError(f"bad digest hex: {text!r}") from exc
        return cls(raw)

    def __str__(self) -> str:
        return self.hex


def sha256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def hash_value(value: Any) -> Digest:
    """SHA-256 of the canonical encoding. The only document hash used anywhere."""
    return sha256(canonical_serialize(value))


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    secret: bytes
    algorithm: str = "ed25519"

    @classmethod
    def generate(cls) -> "KeyPair":
        priv = Ed25519PrivateKey.generate()
        return cls(
            public=priv.public_key().public_bytes_raw(),
            secret=priv.private_bytes_raw(),
        )

    @classmethod
    def from_secret(cls, secret: bytes) -> "KeyPair":
        """Rebuild a pair from its 32-byte seed. Used for reproducible fixtures."""
        return cls(public=public_from_secret(secret), secret=secret)


def _load_private(secret: bytes) -> Ed25519PrivateKey:
    try:
        return Ed25519PrivateKey.from_private_bytes(secret)
    except (ValueError, TypeError) as exc:
        raise MalformedKeyError("bad ed25519 private key") from exc


def _load_public(public: bytes) -> Ed25519PublicKey:
    try:
        return Ed25519PublicKey.from_public_bytes(public)
    except (ValueError, TypeError) as exc:
        raise MalformedKeyError("bad ed25519 public key") from exc


def public_from_secret(secret: bytes) -> bytes:
    return _load_private(secret).public_key().public_bytes_raw()


def sign(secret: bytes, message: bytes) -> bytes:
    return _load_private(secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    key = _load_public(public)
    try:
        key.verify(signature, message)
        return True
    except InvalidSignature:
        return False
    except (ValueError, TypeError):
        # malformed signature bytes, not a crypto failure
        return False


@dataclass(frozen=True)
class GroupSignature:
    """Signature naming only the group. Which member signed is not encoded."""

    group_id: str
    signature: bytes


@dataclass
class SigningGroup:
    """A signing group and its member secrets, as held by the group issuer."""

    group_id: str
    members: dict[str, KeyPair] = field(default_factory=dict)

    @classmethod
    def create(cls, group_id: str, member_ids: Iterable[str]) -> "SigningGroup":
        return cls(group_id=group_id, members={m: KeyPair.generate() for m in member_ids})

    def public_keys(self) -> list[bytes]:
        return [kp.public for kp in self.members.values()]

    def member_secret(self, member_id: str) -> bytes:
        if member_id not in self.members:
            raise CryptoError(f"unknown group member {member_id!r}")
        return self.members[member_id].secret


def group_sign(group: SigningGroup, member_id: str, message: bytes) -> GroupSignature:
    return GroupSignature(
        group_id=group.group_id,
        signature=sign(group.member_secret(member_id), message),
    )


def group_verify(public_keys: Iterable[bytes], message: bytes, gsig: GroupSignature) -> bool:
    """True if any listed member key validates the signature.

    Returns a bare bool on purpose: callers must not learn which member
    produced the signature, only that some current member did.
    """
    for pub in public_keys:
        try:
            if verify(pub, message, gsig.signature):
                return True
        except MalformedKeyError:
            continue
    return False


class SecurityVersionNumber(int):
    """Monotone firmware/runtime version used by attestation policy floors."""

    def __new__(cls, value: int) -> "SecurityVersionNumber":
        if int(value) < 0:
            raise ValueError("security version cannot be negative")
        return super().__new__(cls, int(value))


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def b64url_nopad(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii").rstrip("=")


def b64url_decode(text: str) -> bytes:
    pad = -len(text) % 4
    return base64.urlsafe_b64decode(text + "=" * pad)


def decimal_str(x: float) -> str:
    """Carry a non-integer as its shortest round-tripping decimal text."""
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def random_token(nbytes: int = 24) -> str:
    return secrets.token_urlsafe(nbytes)
