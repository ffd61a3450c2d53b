"""Owner-side service manager for contract channels.

The broker watches the channel tree, pre-authorizes contract
identities, challenges enclaves before handing out data access, mints
scoped data tokens, and serves the state document the dashboard polls.
Everything it needs to remember lives in the datastore under its own
subtree, so a restarted broker rebuilds its view by reading.
"""

from __future__ import annotations

import logging
import re
import secrets
import threading
import time
import uuid
from typing import Any

from . import contracts
from .attestation import AttestationClient
from .datastore import DatastoreClient
from .httpkit import BadRequest, JsonHttpServer, Router, Unauthorized
from .runtime import (
    CHANNEL_ROOT,
    PAC_ROOT,
    allowed_prefixes,
    attest_user_data,
    verify_osc_code,
)

log = logging.getLogger("broker")

BROKER_ROOT = "/bookmarks/broker"
REPORTS_ROOT = f"{BROKER_ROOT}/exception-reports"

MASKED = "(withheld)"
_TEMPLATE_KEYS = re.compile(r"\{(\w+)\}")


class BrokerRefused(Exception):
    def __init__(self, reason: str, message: str = "", status: int = 403):
        super().__init__(message or reason)
        self.reason = reason
        self.status = status


def _now_ms() -> int:
    return int(time.time() * 1000)


class Broker:
    def __init__(
        self,
        datastore_url: str,
        owner_token: str,
        attestation_url: str | None = None,
        gateway_url: str | None = None,
        trusted: dict[str, str] | None = None,
        min_svn: int | None = None,
        feed_addr: tuple[str, int] | None = None,
        attest_timeout: float = 10.0,
    ):
        self.owner_token = owner_token
        self._data = DatastoreClient(datastore_url, feed_addr=feed_addr, token=owner_token)
        if feed_addr is None:
            self._data.discover_feed()
        self.trusted = dict(trusted) if trusted is not None else contracts.trusted_hashes()
        self.attestation = AttestationClient(attestation_url) if attestation_url else None
        self.gateway_url = gateway_url
        self.min_svn = min_svn
        self.attest_timeout = attest_timeout
        self._known: set[str] = set()
        self._lock = threading.Lock()
        self._subscription = None
        self._feeder: threading.Thread | None = None
        self._stopping = False

    # ---- lifecycle ----

    def start(self) -> "Broker":
        # subscribe first so channels appearing mid-recovery are not lost
        self._subscription = self._data.watch(CHANNEL_ROOT)
        self._feeder = threading.Thread(target=self._pump_feed, name="broker-watch", daemon=True)
        self._feeder.start()
        for h_k in self._data.fetch_optional(f"{BROKER_ROOT}/channels") or {}:
            with self._lock:
                self._known.add(h_k)
        for h_k in self._data.fetch_optional(CHANNEL_ROOT) or {}:
            self._discover(h_k)
        return self

    def stop(self) -> None:
        self._stopping = True
        if self._subscription is not None:
            self._subscription.close()
        if self._feeder is not None:
            self._feeder.join(timeout=5)
            self._feeder = None

    def _pump_feed(self) -> None:
        try:
            for event in self._subscription.events():
                segments = [s for s in event["path"].split("/") if s]
                if len(segments) >= 3:
                    self._discover(segments[2])
        except Exception:
            if not self._stopping:
                log.exception("channel watch stopped")

    def _discover(self, h_k: str) -> None:
        with self._lock:
            if h_k in self._known:
                return
            self._known.add(h_k)
        record = self._data.fetch_optional(f"{BROKER_ROOT}/channels/{h_k}")
        if not record:
            self._data.put(f"{BROKER_ROOT}/channels/{h_k}", {"discovered_at": _now_ms()})

    # ---- operator actions ----

    def authorize_osc(self, jwk: dict[str, Any], name: str = "osc") -> dict[str, Any]:
        """Admit a contract identity: register it and grant channel access."""
        reg = self._data.register(jwk, name=name)
        client_id = reg["client_id"]
        self._data.authorize_client(
            client_id, [{"prefix": CHANNEL_ROOT, "read": True, "write": True}]
        )
        self._data.put(
            f"{BROKER_ROOT}/authorized/{client_id}",
            {"name": name, "authorized_at": _now_ms()},
        )
        return {"client_id": client_id}

    def _channel(self, h_k: str) -> dict[str, Any]:
        doc = self._data.fetch_optional(f"{CHANNEL_ROOT}/{h_k}")
        if not isinstance(doc, dict) or "osc_info" not in doc:
            raise BrokerRefused("UNKNOWN_CHANNEL", f"no channel at {h_k}", status=404)
        return doc

    def attest(self, h_k: str) -> dict[str, Any]:
        """Challenge the channel's enclave and record the verdict.

        Failure writes one exception report and blocks provisioning
        until a later attempt succeeds.
        """
        doc = self._channel(h_k)
        info = doc["osc_info"]
        if not verify_osc_code(info.get("name", ""), info.get("osc_hash", ""), self.trusted):
            return self._attest_failed(h_k, "UNTRUSTED_CODE", {"osc_hash": info.get("osc_hash")})
        if int(info.get("trust_level", 1)) < 2:
            summary = {"ok": True, "skipped": True, "reason": "TRUST_LEVEL_1", "verified_at": _now_ms()}
            self._data.put(f"{CHANNEL_ROOT}/{h_k}", {"attestation": summary})
            return summary
        if self.attestation is None:
            return self._attest_failed(h_k, "ATTESTATION_UNREACHABLE", {"detail": "no verifier configured"}, retryable=True)

        nonce = secrets.token_hex(32)
        self._data.put(f"{CHANNEL_ROOT}/{h_k}", {"attest_request": {"nonce": nonce, "requested_at": _now_ms()}})
        response = self._await_response(h_k, nonce)
        if response is None:
            return self._attest_failed(h_k, "CHALLENGE_TIMEOUT", {"nonce": nonce}, retryable=True)
        if "quote" not in response:
            return self._attest_failed(h_k, "NO_QUOTE", {"detail": response.get("error", ""), "nonce": nonce})

        quote = response["quote"]
        report = quote.get("report") or {}
        if report.get("user_data") != attest_user_data(nonce):
            return self._attest_failed(h_k, "NONCE_BINDING", {"nonce": nonce})
        if (report.get("measurement") or {}).get("osc_hash") != info.get("osc_hash"):
            return self._attest_failed(h_k, "MEASUREMENT_MISMATCH", {"nonce": nonce})
        try:
            verdict = self.attestation.attest(quote, min_svn=self.min_svn)
        except Exception as exc:
            return self._attest_failed(h_k, "ATTESTATION_UNREACHABLE", {"detail": str(exc)}, retryable=True)
        if not verdict.get("ok"):
            return self._attest_failed(h_k, verdict.get("reason", "INVALID"), {"verdict": verdict, "nonce": nonce})

        summary = {
            "ok": True,
            "reason": verdict["reason"],
            "svn": verdict.get("svn"),
            "nonce": nonce,
            "verified_at": _now_ms(),
        }
        self._data.put(f"{CHANNEL_ROOT}/{h_k}", {"attestation": summary, "status": "attested"})
        return summary

    def _await_response(self, h_k: str, nonce: str) -> dict[str, Any] | None:
        deadline = time.monotonic() + self.attest_timeout
        while time.monotonic() < deadline:
            doc = self._data.fetch_optional(f"{CHANNEL_ROOT}/{h_k}") or {}
            response = doc.get("attest_response") or {}
            if response.get("nonce") == nonce:
                return response
            time.sleep(0.05)
        return None

    def _attest_failed(
        self, h_k: str, reason: str, detail: dict[str, Any], retryable: bool = False
    ) -> dict[str, Any]:
        existing = self._data.fetch_optional(REPORTS_ROOT) or {}
        attempt = sum(1 for key in existing if key.startswith(f"{h_k}-")) + 1
        report_path = f"{REPORTS_ROOT}/{h_k}-{attempt}"
        self._data.put(
            report_path,
            {"channel": h_k, "reason": reason, "attempt": attempt, "at": _now_ms(), **detail},
        )
        summary = {"ok": False, "reason": reason, "report": report_path, "retryable": retryable}
        self._data.put(
            f"{CHANNEL_ROOT}/{h_k}",
            {"attestation": {"ok": False, "reason": reason, "report": report_path}, "status": "attest_failed"},
        )
        return summary

    def provision(self, h_k: str, filter: dict[str, Any]) -> dict[str, Any]:
        """Mint a scoped data token and hand the contract its work order."""
        doc = self._channel(h_k)
        info = doc["osc_info"]
        if not isinstance(filter, dict):
            raise BrokerRefused("BAD_FILTER", "filter must be an object", status=400)
        if not verify_osc_code(info.get("name", ""), info.get("osc_hash", ""), self.trusted):
            raise BrokerRefused("UNTRUSTED_CODE", "channel code is not in the trusted listing")
        if int(info.get("trust_level", 1)) >= 2:
            att = doc.get("attestation") or {}
            if not att.get("ok"):
                raise BrokerRefused("ATTESTATION_REQUIRED", "attest the enclave before provisioning")

        declared = list(info.get("declared_paths") or [])
        prefixes = allowed_prefixes(declared, filter)
        for template in declared:
            match = _TEMPLATE_KEYS.search(template)
            if match and match.group(1) in filter and not allowed_prefixes([template], filter):
                raise BrokerRefused(
                    "FILTER_OUT_OF_SCOPE",
                    f"filter value for {match.group(1)!r} escapes {template!r}",
                )

        scopes = [{"prefix": p, "read": True, "write": True} for p in prefixes]
        scopes.append({"prefix": PAC_ROOT, "read": True, "write": True})
        data_token = self._data.mint_token(scopes, subject=f"pac:{h_k}")
        pid = "prov-" + uuid.uuid4().hex[:12]
        provisioned: dict[str, Any] = {
            "provision_id": pid,
            "filter": filter,
            "data_token": data_token,
        }
        if int(info.get("trust_level", 1)) >= 3 and self.gateway_url:
            provisioned["gateway_url"] = self.gateway_url
        self._data.put(
            f"{CHANNEL_ROOT}/{h_k}", {"provisioned": provisioned, "status": "provisioned"}
        )
        self._data.put(
            f"{BROKER_ROOT}/channels/{h_k}/provisions/{pid}",
            {"filter": filter, "provisioned_at": _now_ms()},
        )
        return {"provision_id": pid, "scopes": prefixes}

    # ---- state for the dashboard ----

    def state(self) -> dict[str, Any]:
        channels_tree = self._data.fetch_optional(CHANNEL_ROOT) or {}
        broker_tree = self._data.fetch_optional(BROKER_ROOT) or {}
        notes = broker_tree.get("channels") or {}
        reports = broker_tree.get("exception-reports") or {}

        channels: dict[str, Any] = {}
        for h_k, doc in sorted(channels_tree.items()):
            if not isinstance(doc, dict):
                continue
            entry: dict[str, Any] = {
                "osc_info": doc.get("osc_info"),
                "status": doc.get("status"),
                "attestation": doc.get("attestation"),
                "pac_link": doc.get("pac_link"),
                "discovered_at": (notes.get(h_k) or {}).get("discovered_at"),
                "provisions": [
                    {"provision_id": pid, **record}
                    for pid, record in sorted(((notes.get(h_k) or {}).get("provisions") or {}).items())
                ],
                "exception_reports": [
                    f"{REPORTS_ROOT}/{key}" for key in sorted(reports) if key.startswith(f"{h_k}-")
                ],
            }
            provisioned = doc.get("provisioned")
            if isinstance(provisioned, dict):
                entry["provisioned"] = {**provisioned, "data_token": MASKED}
            if doc.get("pac_link"):
                entry["pac"] = self._data.fetch_optional(doc["pac_link"])
            channels[h_k] = entry

        return {
            "channels": channels,
            "trusted": dict(self.trusted),
            "authorized": broker_tree.get("authorized") or {},
            "exception_reports": dict(sorted(reports.items())),
            "policy": {"min_svn": self.min_svn, "gateway_url": self.gateway_url},
        }


class BrokerService:
    """HTTP face for the dashboard; every route needs the owner token."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0):
        self.broker = broker
        self._http = JsonHttpServer(self._build_router(), host=host, port=port, name="broker")

    @property
    def url(self) -> str:
        return self._http.url

    def start(self) -> "BrokerService":
        self.broker.start()
        self._http.start()
        return self

    def stop(self) -> None:
        self._http.stop()
        self.broker.stop()

    def _guard(self, req) -> None:
        if req.bearer_token() != self.broker.owner_token:
            raise Unauthorized("owner token required")

    def _build_router(self) -> Router:
        router = Router()
        broker = self.broker

        def run(action):
            try:
                return action()
            except BrokerRefused as refusal:
                return refusal.status, {"ok": False, "reason": refusal.reason, "message": str(refusal)}

        @router.route("GET", "/state")
        def state(req):
            self._guard(req)
            return broker.state()

        @router.route("POST", "/authorize")
        def authorize(req):
            self._guard(req)
            body = req.body or {}
            jwk = body.get("jwk")
            if not isinstance(jwk, dict):
                raise BadRequest("jwk object required")
            return run(lambda: broker.authorize_osc(jwk, name=str(body.get("name", "osc"))))

        @router.route("POST", "/channels/{h_k}/attest")
        def attest(req):
            self._guard(req)
            return run(lambda: broker.attest(req.params["h_k"]))

        @router.route("POST", "/channels/{h_k}/provision")
        def provision(req):
            self._guard(req)
            body = req.body or {}
            return run(lambda: broker.provision(req.params["h_k"], body.get("filter") or {}))

        return router
