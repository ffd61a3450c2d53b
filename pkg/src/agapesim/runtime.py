"""Contract runtime: channel watching, scoped data access, artifact assembly.

A runner hosts one pre-approved contract inside a simulated enclave. It
watches the channel region of the datastore for channels addressed to
its contract, answers attestation challenges, and on provisioning runs
one generation at a time: fetch data through a scope-checked context,
compute the result, and emit a certification artifact.

The artifact binds together everything a verifier needs: the code hash
measured at load, a running hash over every datum the contract saw (in
request-completion order), the result, and at trust level two and up a
quote whose user data commits to the artifact body. Trust level three
additionally anchors the artifact in the ordering ledger.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import queue
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable

from . import contracts, crypto, enclave
from .datastore.client import DatastoreClient, ResourceNotFound, public_jwk
from .gateway import GatewayClient, GatewayRejected

log = logging.getLogger(__name__)

CHANNEL_ROOT = "/bookmarks/OSC"
PAC_ROOT = "/bookmarks/PACs"

# artifact fields excluded from the body hash: they are derived from or
# layered on top of the body after it is hashed
PAC_HASH_EXCLUDED = ("pac_hash", "report_hash", "quote", "quote_hash", "anchor")


class RuntimeError_(Exception):
    pass


class ScopeViolation(RuntimeError_):
    def __init__(self, path: str):
        super().__init__(f"contract touched {path}, which is outside its declared scope")
        self.path = path


class DataUnavailable(RuntimeError_):
    def __init__(self, path: str):
        super().__init__(f"required data missing at {path}")
        self.path = path


# ---- manifest ----


@dataclass
class OscManifest:
    name: str
    trust_level: int
    svn: int = 1
    declared_paths: list[str] = field(default_factory=list)
    client_id: str | None = None
    client_secret: bytes | None = None
    platform: dict[str, Any] | None = None

    @classmethod
    def create(cls, name: str, trust_level: int, svn: int = 1,
               declared_paths: list[str] | None = None) -> "OscManifest":
        spec = contracts.get(name)
        kp = crypto.KeyPair.generate()
        return cls(
            name=name,
            trust_level=int(trust_level),
            svn=int(svn),
            declared_paths=list(declared_paths if declared_paths is not None else spec.default_paths),
            client_secret=kp.secret,
        )

    @property
    def jwk(self) -> dict[str, str]:
        if self.client_secret is None:
            raise RuntimeError_("manifest has no client key")
        return public_jwk(crypto.public_from_secret(self.client_secret))

    def osc_hash(self) -> str:
        return contracts.code_hash(self.name)

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "name": self.name,
            "trust_level": self.trust_level,
            "svn": self.svn,
            "declared_paths": self.declared_paths,
            "client_id": self.client_id,
        }
        if self.client_secret is not None:
            doc["client_secret"] = crypto.b64url_nopad(self.client_secret)
        if self.platform is not None:
            doc["platform"] = self.platform
        return doc

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "OscManifest":
        secret = doc.get("client_secret")
        return cls(
            name=doc["name"],
            trust_level=int(doc["trust_level"]),
            svn=int(doc.get("svn", 1)),
            declared_paths=list(doc.get("declared_paths", [])),
            client_id=doc.get("client_id"),
            client_secret=crypto.b64url_decode(secret) if secret else None,
            platform=doc.get("platform"),
        )

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> "OscManifest":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---- scope templates ----

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def allowed_prefixes(declared: list[str], filter: dict[str, Any]) -> list[str]:
    """Concrete path prefixes a generation may touch, per declared templates.

    A literal template allows itself. A template with one {param}
    placeholder allows the filter's value for that param, provided the
    value actually sits where the template says it must.
    """
    out: list[str] = []
    for template in declared:
        match = _PLACEHOLDER.search(template)
        if match is None:
            out.append(template)
            continue
        key = match.group(1)
        if key not in filter:
            continue
        value = str(filter[key])
        stem = template[: match.start()]
        tail = value[len(stem):]
        if value.startswith(stem) and tail and "/" not in tail:
            out.append(value)
    return out


def _under(prefix: str, path: str) -> bool:
    a = [s for s in prefix.split("/") if s]
    b = [s for s in path.split("/") if s]
    return b[: len(a)] == a


def path_allowed(prefixes: list[str], path: str) -> bool:
    return any(_under(p, path) for p in prefixes)


# ---- data hash accumulation ----


class DataHashAccumulator:
    """Running digest over every datum a generation consumes.

    Frames are folded in request-completion order as an op-and-path
    line followed by the canonical payload. A missing optional fetch
    folds a null payload, so absence is as binding as presence.
    """

    def __init__(self) -> None:
        self._hasher = hashlib.sha256()
        self.frames = 0

    def fold(self, op: str, target: str, payload: Any) -> None:
        self._hasher.update(f"{op} {target}\n".encode("utf-8"))
        self._hasher.update(crypto.canonical_serialize(payload))
        self._hasher.update(b"\n")
        self.frames += 1

    def digest_hex(self) -> str:
        return self._hasher.hexdigest()


def normalize_otk_record(record: dict[str, Any] | None) -> dict[str, Any] | None:
    if record is None:
        return None
    return {
        "public_key": record["public_key"],
        "ledger_hash": record["ledger_hash"],
        "used": bool(record["used"]),
    }


def _default_keygen() -> str:
    return crypto.b64url_nopad(crypto.KeyPair.generate().public)


class GenerationContext:
    """What a contract sees: scoped data access plus ledger operations.

    Every observation is folded into the data hash and ledger traffic
    is also transcribed, so an auditor can replay the run later.
    """

    def __init__(
        self,
        data: DatastoreClient,
        prefixes: list[str],
        gateway: GatewayClient | None = None,
        keygen: Callable[[], str] = _default_keygen,
    ):
        self._data = data
        self._prefixes = prefixes
        self._gateway = gateway
        self._keygen = keygen
        self.accumulator = DataHashAccumulator()
        self.transcript: list[dict[str, Any]] = []
        self.data_paths: list[str] = []

    def _check(self, path: str) -> None:
        if not path_allowed(self._prefixes, path):
            raise ScopeViolation(path)

    def fetch(self, path: str) -> Any:
        value = self.fetch_optional(path)
        if value is None:
            raise DataUnavailable(path)
        return value

    def fetch_optional(self, path: str) -> Any:
        self._check(path)
        value = self._data.fetch_optional(path)
        self.accumulator.fold("GET", path, value)
        self.data_paths.append(path)
        return value

    def put(self, path: str, delta: Any) -> dict[str, Any]:
        self._check(path)
        self._data.put(path, delta)
        self.accumulator.fold("PUT", path, {"delta": delta})
        self.data_paths.append(path)
        return {"ok": True}

    # ---- ledger operations ----

    def _need_gateway(self) -> GatewayClient:
        if self._gateway is None:
            raise RuntimeError_("no ledger access was provisioned for this run")
        return self._gateway

    def _record(self, op: str, target: str, payload: Any, args: dict[str, Any] | None = None) -> None:
        entry: dict[str, Any] = {"op": op, "target": target, "payload": payload}
        if args:
            entry["args"] = args
        self.transcript.append(entry)
        self.accumulator.fold(op, target, payload)

    def ledger_head(self) -> str:
        head = self._need_gateway().head()["head"]
        self._record("HEAD", "-", {"head": head})
        return head

    def get_otk(self, public_key: str) -> dict[str, Any] | None:
        gw = self._need_gateway()
        try:
            record = normalize_otk_record(gw.get_otk(public_key))
        except GatewayRejected as rej:
            if rej.status == 404:
                record = None
            else:
                raise
        self._record("GETOTK", public_key, record)
        return record

    def mark_used(self, public_key: str, proof: str, head: str) -> dict[str, Any]:
        gw = self._need_gateway()
        try:
            gw.mark_used(public_key, proof, head)
            outcome = {"ok": True}
        except GatewayRejected as rej:
            outcome = {"ok": False, "reason": rej.reason}
        self._record("MARKUSED", public_key, outcome, args={"proof": proof, "head": head})
        return outcome

    def register_otk(self, public_key: str, ledger_hash: str) -> dict[str, Any]:
        gw = self._need_gateway()
        try:
            gw.register_otk(public_key, ledger_hash)
            outcome = {"ok": True}
        except GatewayRejected as rej:
            outcome = {"ok": False, "reason": rej.reason}
        self._record("REGOTK", public_key, outcome, args={"ledger_hash": ledger_hash})
        return outcome

    def new_otk(self) -> str:
        pub = self._keygen()
        self._record("NEWOTK", "-", {"pub": pub})
        return pub


# ---- artifact assembly ----


def compute_pac_hash(pac: dict[str, Any]) -> str:
    body = {k: v for k, v in pac.items() if k not in PAC_HASH_EXCLUDED}
    return crypto.hash_value(body).hex


def attest_user_data(nonce: str) -> str:
    return crypto.sha256(bytes.fromhex(nonce)).hex


@dataclass
class GenerationOutcome:
    pac: dict[str, Any]
    audit: dict[str, Any]


def generate_pac(
    manifest: OscManifest,
    enclave_instance: enclave.EnclaveInstance,
    ctx: GenerationContext,
    filter: dict[str, Any],
    channel: str | None = None,
    provision_id: str | None = None,
    created_rev: int | None = None,
    quoting: enclave.QuotingEnclave | None = None,
    gateway: GatewayClient | None = None,
    anchor_retries: int = 3,
) -> GenerationOutcome:
    """Run the contract and assemble the artifact around its result."""
    spec = contracts.get(manifest.name)
    result = spec.run(ctx, filter)

    pac: dict[str, Any] = {
        "id": str(uuid.uuid4()),
        "osc_name": manifest.name,
        "osc_hash": enclave_instance.measurement["osc_hash"],
        "trust_level": manifest.trust_level,
        "channel": channel,
        "provision_id": provision_id,
        "filter": filter,
        "result": result,
        "data_hash": ctx.accumulator.digest_hex(),
        "created_rev": created_rev,
        "created_at": int(time.time() * 1000),
    }
    pac["pac_hash"] = compute_pac_hash(pac)

    if manifest.trust_level >= 2:
        if quoting is None:
            raise RuntimeError_("trust level 2 requires a quoting enclave")
        report = enclave_instance.create_report(user_data=pac["pac_hash"])
        quote = quoting.quote(report)
        pac["report_hash"] = report.report_hash()
        pac["quote"] = quote
        pac["quote_hash"] = enclave.quote_hash(quote)

    anchor_error = None
    if manifest.trust_level >= 3:
        if gateway is None:
            anchor_error = "no ledger gateway configured"
        else:
            otk_pub = crypto.KeyPair.generate().public
            record = {
                "id": pac["id"],
                "quoteHash": pac["quote_hash"],
                "OTK": crypto.b64(otk_pub),
            }
            for attempt in range(anchor_retries):
                try:
                    receipt = gateway.put_pac(record)
                    pac["anchor"] = {
                        "block_height": receipt["block_height"],
                        "block_hash": receipt["block_hash"],
                        "ts": receipt["ts"],
                        "OTK": record["OTK"],
                    }
                    break
                except GatewayRejected:
                    raise
                except Exception as exc:
                    anchor_error = f"ledger unreachable: {exc}"
                    if attempt + 1 < anchor_retries:
                        time.sleep(0.2 * (attempt + 1))
        if "anchor" not in pac:
            pac["anchor"] = None

    audit = {
        "filter": filter,
        "data_paths": ctx.data_paths,
        "gateway_transcript": ctx.transcript,
        "frames": ctx.accumulator.frames,
    }
    if anchor_error:
        audit["anchor_error"] = anchor_error
    return GenerationOutcome(pac=pac, audit=audit)


# ---- channel runner ----


def verify_osc_code(name: str, osc_hash: str, trusted_repo: dict[str, str]) -> bool:
    """True iff the trusted code listing names this exact code."""
    return trusted_repo.get(name) == osc_hash


class OscRunner:
    """Hosts one contract instance: opens a channel and serves it until stopped."""

    def __init__(
        self,
        manifest: OscManifest,
        datastore_url: str,
        gateway_url: str | None = None,
        feed_addr: tuple[str, int] | None = None,
        platform_id: str | None = None,
    ):
        self.manifest = manifest
        self.datastore_url = datastore_url
        self.gateway_url = gateway_url
        self.h_k: str | None = None
        self._feed_addr = feed_addr
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self._wake: queue.Queue = queue.Queue()
        self._processed: set[str] = set()
        self._subscription = None
        self._channels: DatastoreClient | None = None
        self.enclave = enclave.load_enclave(
            contracts.source_bytes(manifest.name),
            svn=manifest.svn,
            platform_id=platform_id or (manifest.platform or {}).get("platform_id", "platform-0"),
        )
        self.quoting = self._build_quoting()

    def _build_quoting(self) -> enclave.QuotingEnclave | None:
        creds = self.manifest.platform
        if not creds:
            return None
        secret = crypto.b64url_decode(creds["member_secret"])
        member = crypto.KeyPair(public=crypto.public_from_secret(secret), secret=secret)
        group = crypto.SigningGroup(group_id=creds["group_id"], members={creds["member_id"]: member})
        return enclave.QuotingEnclave(
            platform_id=creds["platform_id"], group=group, member_id=creds["member_id"]
        )

    @property
    def channel_path(self) -> str:
        if self.h_k is None:
            raise RuntimeError_("runner has not started")
        return f"{CHANNEL_ROOT}/{self.h_k}"

    # the runner's own channel-plane client, scoped to the channel tree
    def _channel_client(self) -> DatastoreClient:
        client = DatastoreClient(self.datastore_url, feed_addr=self._feed_addr)
        if self._feed_addr is None:
            client.discover_feed()
            self._feed_addr = client.feed_addr
        if self.manifest.client_secret is None:
            raise RuntimeError_("manifest carries no client key")
        if self.manifest.client_id is None:
            reg = client.register(self.manifest.jwk, name=f"osc-{self.manifest.name}")
            self.manifest.client_id = reg["client_id"]
        client.obtain_token(self.manifest.client_id, self.manifest.client_secret)
        return client

    def start(self) -> dict[str, Any]:
        """Register, open this instance's channel, and begin serving it.

        Raises AccessDenied when the identity was never pre-authorized;
        in that case no channel document is created.
        """
        if self._thread is not None:
            return {"h_k": self.h_k}
        channels = self._channel_client()
        self.h_k = "ch-" + uuid.uuid4().hex
        # watch the channel before announcing it, so no merge is missed
        self._subscription = channels.watch(self.channel_path)
        doc = {
            "osc_info": {
                "name": self.manifest.name,
                "osc_hash": self.enclave.measurement["osc_hash"],
                "trust_level": self.manifest.trust_level,
                "svn": self.manifest.svn,
                "declared_paths": self.manifest.declared_paths,
            },
            "status": "started",
        }
        channels.put(self.channel_path, doc)
        self._channels = channels
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name=f"osc-{self.manifest.name}", daemon=True)
        self._thread.start()
        return {"h_k": self.h_k, **doc}

    def stop(self) -> None:
        self._stop.set()
        self._wake.put(None)
        if self._subscription is not None:
            self._subscription.close()
        if self._thread is not None:
            self._thread.join(timeout=10)
            self._thread = None

    def _run(self) -> None:
        try:
            feeder = threading.Thread(target=self._pump_feed, daemon=True)
            feeder.start()
            self._wake.put("initial")
            while not self._stop.is_set():
                item = self._wake.get()
                if item is None:
                    continue
                try:
                    self._consider(self._channels)
                except Exception:
                    log.exception("channel %s handling failed", self.h_k)
        except Exception:
            if not self._stop.is_set():
                log.exception("runner for %s stopped unexpectedly", self.manifest.name)

    def _pump_feed(self) -> None:
        try:
            for event in self._subscription.events():
                self._wake.put(event["path"])
        except Exception:
            pass
        self._wake.put(None)

    def _consider(self, channels: DatastoreClient) -> None:
        doc = channels.fetch_optional(self.channel_path)
        if not isinstance(doc, dict):
            return

        request = doc.get("attest_request")
        response = doc.get("attest_response") or {}
        if isinstance(request, dict) and request.get("nonce") and response.get("nonce") != request["nonce"]:
            self._answer_challenge(channels, request["nonce"])

        provisioned = doc.get("provisioned")
        if isinstance(provisioned, dict) and provisioned.get("provision_id"):
            pid = provisioned["provision_id"]
            done = set(self._processed) | set((doc.get("audit") or {}).keys())
            if pid not in done:
                self._processed.add(pid)
                self._generate(channels, provisioned)

    def _answer_challenge(self, channels: DatastoreClient, nonce: str) -> None:
        if self.quoting is None:
            channels.put(
                self.channel_path,
                {"attest_response": {"nonce": nonce, "error": "no platform membership"}},
            )
            return
        report = self.enclave.create_report(user_data=attest_user_data(nonce), nonce=nonce)
        quote = self.quoting.quote(report)
        channels.put(self.channel_path, {"attest_response": {"nonce": nonce, "quote": quote}})

    def _generate(self, channels: DatastoreClient, provisioned: dict[str, Any]) -> None:
        pid = provisioned["provision_id"]
        h_k = self.h_k
        channel_path = self.channel_path
        channels.put(channel_path, {"status": "generating"})
        _, created_rev = channels.get_with_rev(channel_path)

        filter = provisioned.get("filter") or {}
        data = DatastoreClient(
            self.datastore_url, feed_addr=self._feed_addr, token=provisioned.get("data_token")
        )
        gateway_url = provisioned.get("gateway_url") or self.gateway_url
        gateway = GatewayClient(gateway_url) if gateway_url else None
        prefixes = allowed_prefixes(self.manifest.declared_paths, filter)
        ctx = GenerationContext(data, prefixes, gateway=gateway)

        try:
            outcome = generate_pac(
                self.manifest,
                self.enclave,
                ctx,
                filter,
                channel=h_k,
                provision_id=pid,
                created_rev=created_rev,
                quoting=self.quoting,
                gateway=gateway,
            )
        except ScopeViolation as exc:
            channels.put(
                channel_path,
                {
                    "status": "failed",
                    "audit": {pid: {"error": str(exc), "scope_violation": exc.path, "filter": filter}},
                },
            )
            return
        except (DataUnavailable, RuntimeError_) as exc:
            channels.put(
                channel_path,
                {"status": "failed", "audit": {pid: {"error": str(exc), "filter": filter}}},
            )
            return
        except Exception as exc:
            log.exception("generation failed on channel %s", h_k)
            channels.put(
                channel_path,
                {"status": "failed", "audit": {pid: {"error": f"contract error: {exc}", "filter": filter}}},
            )
            return

        pac = outcome.pac
        pac_path = f"{PAC_ROOT}/{pac['id']}"
        data.put(pac_path, pac)
        status = "complete"
        if self.manifest.trust_level >= 3 and pac.get("anchor") is None:
            status = "unanchored"
        channels.put(
            channel_path,
            {"status": status, "pac_link": pac_path, "audit": {pid: outcome.audit}},
        )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="osc", description="run an installed contract")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="host a contract against a datastore")
    run_p.add_argument("--manifest", required=True)
    run_p.add_argument("--datastore", required=True)
    run_p.add_argument("--gateway", default=None)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    manifest = OscManifest.load(args.manifest)
    runner = OscRunner(manifest, args.datastore, gateway_url=args.gateway)
    runner.start()
    print(f"hosting {manifest.name} (trust level {manifest.trust_level}) on {args.datastore}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        runner.stop()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
