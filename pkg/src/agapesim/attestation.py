"""Attestation authority: quote verification and member revocation.

The authority knows each platform group's member public keys and which
members have been revoked, and enforces a minimum security version. Its
answers never identify the signing member. Revocations are timestamped
so downstream policy can compare a revocation against independently
anchored evidence that predates it.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Any

from . import crypto
from .httpkit import BadRequest, Forbidden, JsonHttpServer, NotFound, Router

REASON_VALID = "VALID"
REASON_MALFORMED = "MALFORMED"
REASON_UNKNOWN_GROUP = "UNKNOWN_GROUP"
REASON_BAD_SIGNATURE = "BAD_SIGNATURE"
REASON_SVN_TOO_LOW = "SVN_TOO_LOW"
REASON_REVOKED = "REVOKED_GROUP_KEY"


def _now_ms() -> int:
    return int(time.time() * 1000)


@dataclass
class _GroupState:
    group_id: str
    keys: dict[str, bytes]
    revoked_at: dict[str, int] = field(default_factory=dict)


@dataclass
class AttestationAuthority:
    min_svn: int = 0
    _groups: dict[str, _GroupState] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def register_group(self, group: crypto.SigningGroup) -> None:
        with self._lock:
            self._groups[group.group_id] = _GroupState(
                group_id=group.group_id,
                keys={m: kp.public for m, kp in group.members.items()},
            )

    def revoke(self, group_id: str, member_id: str) -> int:
        """Mark a member's key bad. Idempotent; returns the revocation time."""
        with self._lock:
            state = self._groups.get(group_id)
            if state is None or member_id not in state.keys:
                raise KeyError(f"{group_id}/{member_id}")
            if member_id not in state.revoked_at:
                state.revoked_at[member_id] = _now_ms()
            return state.revoked_at[member_id]

    def verify_quote(self, quote: dict[str, Any], min_svn: int | None = None) -> dict[str, Any]:
        floor = self.min_svn if min_svn is None else int(min_svn)
        verdict: dict[str, Any] = {
            "ok": False,
            "reason": REASON_MALFORMED,
            "measurement": None,
            "svn": None,
            "timestamp": _now_ms(),
        }
        if not isinstance(quote, dict):
            return verdict
        report = quote.get("report")
        sig_b64 = quote.get("signature")
        group_id = quote.get("group_id")
        if (
            not isinstance(report, dict)
            or not isinstance(sig_b64, str)
            or not isinstance(group_id, str)
            or not isinstance(report.get("measurement"), dict)
            or not isinstance(report.get("svn"), int)
        ):
            return verdict
        try:
            signature = crypto.b64decode(sig_b64)
        except Exception:
            return verdict
        with self._lock:
            state = self._groups.get(group_id)
            if state is None:
                verdict["reason"] = REASON_UNKNOWN_GROUP
                return verdict
            live_keys = [pub for m, pub in state.keys.items() if m not in state.revoked_at]
            dead = [(pub, state.revoked_at[m]) for m, pub in state.keys.items() if m in state.revoked_at]
        message = crypto.canonical_serialize(report)
        gsig = crypto.GroupSignature(group_id=group_id, signature=signature)
        verdict["measurement"] = report["measurement"]
        verdict["svn"] = report["svn"]
        if crypto.group_verify(live_keys, message, gsig):
            if report["svn"] < floor:
                verdict["reason"] = REASON_SVN_TOO_LOW
                return verdict
            verdict["ok"] = True
            verdict["reason"] = REASON_VALID
            return verdict
        for pub, revoked_at in dead:
            if crypto.verify(pub, message, signature):
                verdict["reason"] = REASON_REVOKED
                verdict["revoked_at"] = revoked_at
                return verdict
        verdict["reason"] = REASON_BAD_SIGNATURE
        return verdict


class AttestationService:
    """HTTP face: open verification, admin-gated revocation."""

    def __init__(
        self,
        authority: AttestationAuthority | None = None,
        admin_token: str | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.authority = authority or AttestationAuthority()
        self.admin_token = admin_token or crypto.random_token()
        self._http = JsonHttpServer(self._build_router(), host=host, port=port, name="attestation")

    @property
    def url(self) -> str:
        return self._http.url

    def start(self) -> "AttestationService":
        self._http.start()
        return self

    def stop(self) -> None:
        self._http.stop()

    def _build_router(self) -> Router:
        router = Router()
        authority = self.authority

        @router.route("POST", "/attest")
        def attest(req):
            body = req.body or {}
            if "quote" not in body:
                raise BadRequest("quote required")
            min_svn = body.get("min_svn")
            if min_svn is not None and not isinstance(min_svn, int):
                raise BadRequest("min_svn must be an integer")
            return authority.verify_quote(body["quote"], min_svn=min_svn)

        @router.route("POST", "/revoke")
        def revoke(req):
            if req.header("x-admin-token") != self.admin_token:
                raise Forbidden("admin token required")
            body = req.body or {}
            try:
                revoked_at = authority.revoke(str(body.get("group_id")), str(body.get("member_id")))
            except KeyError as exc:
                raise NotFound(f"unknown group member {exc}")
            return {"revoked": True, "revoked_at": revoked_at}

        return router


class AttestationClient:
    def __init__(self, base_url: str, admin_token: str | None = None, timeout: float = 30.0):
        import requests

        self.base_url = base_url.rstrip("/")
        self.admin_token = admin_token
        self.timeout = timeout
        self._session = requests.Session()

    def attest(self, quote: dict[str, Any], min_svn: int | None = None) -> dict[str, Any]:
        body: dict[str, Any] = {"quote": quote}
        if min_svn is not None:
            body["min_svn"] = min_svn
        resp = self._session.post(self.base_url + "/attest", json=body, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def revoke(self, group_id: str, member_id: str) -> dict[str, Any]:
        resp = self._session.post(
            self.base_url + "/revoke",
            json={"group_id": group_id, "member_id": member_id},
            headers={"X-Admin-Token": self.admin_token or ""},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()
