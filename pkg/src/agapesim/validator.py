"""Offline artifact validation and audited replay.

Validation re-derives every binding an artifact claims, at the trust
level the caller demands: body hash, quote hashes, the quote's user
data committing to the body, group signature validity and security
version through an attestation verdict, and at the top level the
ledger anchor and chain integrity. An artifact whose platform key was
revoked after the artifact was anchored is reported as likely valid
rather than passed or failed, since the anchor proves it predates the
compromise.

Replay re-runs the contract against provided data and the recorded
ledger transcript and confirms both the result and the data hash fall
out unchanged.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from typing import Any, Callable

from . import contracts, crypto
from .attestation import (
    REASON_REVOKED,
    REASON_VALID,
    AttestationAuthority,
    AttestationClient,
)
from .gateway import GatewayClient, GatewayRejected
from .httpkit import BadRequest, JsonHttpServer, Router
from .runtime import DataHashAccumulator, compute_pac_hash

PASS = "PASS"
FAIL = "FAIL"
LIKELY_VALID = "LIKELY_VALID"

_REQUIRED_FIELDS = (
    "id",
    "osc_name",
    "osc_hash",
    "trust_level",
    "filter",
    "result",
    "data_hash",
    "pac_hash",
)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "ok": self.ok, "detail": self.detail}


Attestor = Callable[[dict[str, Any], int | None], dict[str, Any]]


def attestor_from_authority(authority: AttestationAuthority) -> Attestor:
    return lambda quote, min_svn: authority.verify_quote(quote, min_svn=min_svn)


def attestor_from_url(url: str) -> Attestor:
    client = AttestationClient(url)
    return lambda quote, min_svn: client.attest(quote, min_svn=min_svn)


def validate_pac(
    pac: Any,
    level: int,
    expected_osc_hash: str | None = None,
    attestor: Attestor | None = None,
    gateway: GatewayClient | None = None,
    min_svn: int | None = None,
) -> dict[str, Any]:
    """Check an artifact at the requested trust level.

    Returns a report with a verdict and the full check list. The
    verdict is PASS only if every check holds, and LIKELY_VALID when
    the one failure is a key revoked after the artifact was anchored.
    """
    checks: list[Check] = []
    revoked_after_anchor = False

    def check(name: str, ok: bool, detail: str = "") -> bool:
        checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    shaped = isinstance(pac, dict) and all(f in pac for f in _REQUIRED_FIELDS)
    check("artifact_shape", shaped, "required fields present")
    if shaped:
        check(
            "body_hash",
            compute_pac_hash(pac) == pac["pac_hash"],
            "artifact body matches its recorded hash",
        )
        check("trust_level", int(pac["trust_level"]) >= level, f"claims level {pac.get('trust_level')}, need {level}")
        if expected_osc_hash is not None:
            check("code_hash", pac["osc_hash"] == expected_osc_hash, "measured code is the expected code")

        if level >= 2:
            quote = pac.get("quote")
            quoted = check("quote_present", isinstance(quote, dict), "artifact carries a quote")
            if quoted:
                report = quote.get("report") or {}
                check(
                    "report_hash",
                    crypto.hash_value(report).hex == pac.get("report_hash"),
                    "report content matches its recorded hash",
                )
                check(
                    "quote_hash",
                    crypto.hash_value(quote).hex == pac.get("quote_hash"),
                    "quote content matches its recorded hash",
                )
                check(
                    "user_data_binding",
                    report.get("user_data") == pac["pac_hash"],
                    "quote commits to this artifact body",
                )
                check(
                    "measurement_binding",
                    (report.get("measurement") or {}).get("osc_hash") == pac["osc_hash"],
                    "quote measures the claimed code",
                )
                if attestor is None:
                    check("attestation", False, "no attestation authority reachable")
                else:
                    verdict = attestor(quote, min_svn)
                    ok = bool(verdict.get("ok")) and verdict.get("reason") == REASON_VALID
                    check("attestation", ok, f"authority says {verdict.get('reason')}")
                    if verdict.get("reason") == REASON_REVOKED and level >= 3:
                        anchor = pac.get("anchor") or {}
                        anchored_at = anchor.get("ts")
                        revoked_at = verdict.get("revoked_at")
                        if isinstance(anchored_at, int) and isinstance(revoked_at, int):
                            revoked_after_anchor = anchored_at < revoked_at

        if level >= 3:
            anchor = pac.get("anchor")
            anchored = check("anchor_present", isinstance(anchor, dict), "artifact records a ledger anchor")
            if gateway is None:
                check("ledger_reachable", False, "no ledger gateway reachable")
            elif anchored:
                try:
                    record = gateway.fetch_pac(pac["id"])
                    check("ledger_reachable", True)
                    found = check("ledger_record", record is not None, "anchor exists on the ledger")
                    if found:
                        check(
                            "ledger_quote_hash",
                            record["quoteHash"] == pac.get("quote_hash"),
                            "ledger record names this quote",
                        )
                        check(
                            "anchor_receipt",
                            record["ts"] == anchor.get("ts")
                            and record["OTK"] == anchor.get("OTK")
                            and record["block_height"] == anchor.get("block_height")
                            and record["block_hash"] == anchor.get("block_hash"),
                            "anchor receipt matches the ledger record",
                        )
                    check("chain_integrity", gateway.verify(), "hash chain verifies end to end")
                except GatewayRejected as rej:
                    check("ledger_reachable", False, str(rej))
                except Exception as exc:
                    check("ledger_reachable", False, f"gateway error: {exc}")

    failed = [c for c in checks if not c.ok]
    verdict = PASS if not failed else FAIL
    if (
        len(failed) == 1
        and failed[0].name == "attestation"
        and revoked_after_anchor
        and level >= 3
    ):
        verdict = LIKELY_VALID
    return {
        "verdict": verdict,
        "level": level,
        "pac_id": pac.get("id") if isinstance(pac, dict) else None,
        "checks": [c.to_json() for c in checks],
    }


# ---- audited replay ----


class TranscriptMismatch(Exception):
    pass


class ReplayContext:
    """Serves a contract from recorded evidence instead of live services.

    Data reads go to the supplied fetcher (a frozen snapshot or a live
    scoped client); ledger traffic is answered from the recorded
    transcript, which must match call for call.
    """

    def __init__(self, fetcher: Callable[[str], Any], transcript: list[dict[str, Any]]):
        self._fetch = fetcher
        self._script = list(transcript)
        self._cursor = 0
        self.accumulator = DataHashAccumulator()

    def fetch(self, path: str) -> Any:
        value = self.fetch_optional(path)
        if value is None:
            raise TranscriptMismatch(f"replay data missing at {path}")
        return value

    def fetch_optional(self, path: str) -> Any:
        value = self._fetch(path)
        self.accumulator.fold("GET", path, value)
        return value

    def put(self, path: str, delta: Any) -> dict[str, Any]:
        self.accumulator.fold("PUT", path, {"delta": delta})
        return {"ok": True}

    def _next(self, op: str, target: str, args: dict[str, Any] | None = None) -> dict[str, Any]:
        if self._cursor >= len(self._script):
            raise TranscriptMismatch(f"transcript exhausted before {op} {target}")
        entry = self._script[self._cursor]
        self._cursor += 1
        if entry.get("op") != op or entry.get("target") != target:
            raise TranscriptMismatch(
                f"transcript expected {entry.get('op')} {entry.get('target')}, contract did {op} {target}"
            )
        if args is not None and entry.get("args") != args:
            raise TranscriptMismatch(f"arguments diverged at {op} {target}")
        payload = entry.get("payload")
        self.accumulator.fold(op, target, payload)
        return entry

    def ledger_head(self) -> str:
        return self._next("HEAD", "-")["payload"]["head"]

    def get_otk(self, public_key: str) -> dict[str, Any] | None:
        return self._next("GETOTK", public_key)["payload"]

    def mark_used(self, public_key: str, proof: str, head: str) -> dict[str, Any]:
        return self._next("MARKUSED", public_key, args={"proof": proof, "head": head})["payload"]

    def register_otk(self, public_key: str, ledger_hash: str) -> dict[str, Any]:
        return self._next("REGOTK", public_key, args={"ledger_hash": ledger_hash})["payload"]

    def new_otk(self) -> str:
        return self._next("NEWOTK", "-")["payload"]["pub"]

    def exhausted(self) -> bool:
        return self._cursor == len(self._script)


def audit_replay(
    pac: dict[str, Any],
    audit: dict[str, Any],
    fetcher: Callable[[str], Any],
    code: bytes | None = None,
) -> dict[str, Any]:
    """Re-run the contract from evidence and compare against the artifact."""
    checks: list[Check] = []

    def check(name: str, ok: bool, detail: str = "") -> bool:
        checks.append(Check(name, bool(ok), detail))
        return bool(ok)

    source = code if code is not None else contracts.source_bytes(pac["osc_name"])
    check(
        "code_hash",
        crypto.sha256(source).hex == pac["osc_hash"],
        "replayed code is the measured code",
    )
    ctx = ReplayContext(fetcher, audit.get("gateway_transcript") or [])
    try:
        result = contracts.get(pac["osc_name"]).run(ctx, audit.get("filter") or pac["filter"])
        check("replay_ran", True)
        check("transcript_consumed", ctx.exhausted(), "every recorded ledger call was replayed")
        check("result_matches", result == pac["result"], "recomputed result equals the artifact result")
        check(
            "data_hash_matches",
            ctx.accumulator.digest_hex() == pac["data_hash"],
            "recomputed data hash equals the artifact data hash",
        )
    except TranscriptMismatch as exc:
        check("replay_ran", False, str(exc))
    except Exception as exc:
        check("replay_ran", False, f"contract error during replay: {exc}")

    return {
        "ok": all(c.ok for c in checks),
        "pac_id": pac.get("id"),
        "checks": [c.to_json() for c in checks],
    }


# ---- HTTP face (for dashboards and remote validation) ----


class ValidatorService:
    def __init__(
        self,
        attestor: Attestor | None = None,
        gateway: GatewayClient | None = None,
        expected_hashes: dict[str, str] | None = None,
        min_svn: int | None = None,
        host: str = "127.0.0.1",
        port: int = 0,
    ):
        self.attestor = attestor
        self.gateway = gateway
        self.expected_hashes = expected_hashes or contracts.trusted_hashes()
        self.min_svn = min_svn
        self._http = JsonHttpServer(self._build_router(), host=host, port=port, name="validator")

    @property
    def url(self) -> str:
        return self._http.url

    def start(self) -> "ValidatorService":
        self._http.start()
        return self

    def stop(self) -> None:
        self._http.stop()

    def _build_router(self) -> Router:
        router = Router()

        @router.route("POST", "/validate")
        def validate(req):
            body = req.body or {}
            pac = body.get("pac")
            if not isinstance(pac, dict):
                raise BadRequest("pac object required")
            level = body.get("level", pac.get("trust_level", 1))
            if not isinstance(level, int) or not 1 <= level <= 3:
                raise BadRequest("level must be 1, 2, or 3")
            expected = body.get("expected_osc_hash")
            if expected is None:
                expected = self.expected_hashes.get(str(pac.get("osc_name")))
            return validate_pac(
                pac,
                level,
                expected_osc_hash=expected,
                attestor=self.attestor,
                gateway=self.gateway,
                min_svn=body.get("min_svn", self.min_svn),
            )

        return router


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="validate", description="validate a certification artifact")
    parser.add_argument("--pac", required=True, help="path to the artifact JSON")
    parser.add_argument("--level", type=int, default=3, choices=(1, 2, 3))
    parser.add_argument("--expected-osc-hash", default=None)
    parser.add_argument("--gateway", default=None, help="ledger gateway URL")
    parser.add_argument("--attestation", default=None, help="attestation service URL")
    parser.add_argument("--min-svn", type=int, default=None)
    args = parser.parse_args(argv)

    with open(args.pac, "r", encoding="utf-8") as fh:
        pac = json.load(fh)

    expected = args.expected_osc_hash
    if expected is None and isinstance(pac, dict):
        expected = contracts.trusted_hashes().get(str(pac.get("osc_name")))

    report = validate_pac(
        pac,
        args.level,
        expected_osc_hash=expected,
        attestor=attestor_from_url(args.attestation) if args.attestation else None,
        gateway=GatewayClient(args.gateway) if args.gateway else None,
        min_svn=args.min_svn,
    )
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")
    if report["verdict"] == PASS:
        return 0
    if report["verdict"] == LIKELY_VALID:
        return 2
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
