"""Single-process launcher for the whole certification stack.

Boots every service on loopback ports, seeds scenario data, drives the
complete owner-to-validator workflow for the demo scenarios, times the
hot paths for the bench suites, and keeps a stack alive for the
dashboard (`up`/`down`).
"""

import argparse
import csv
import io
import json
import os
import random
import signal
import statistics
import sys
import tempfile
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import requests

from . import contracts, crypto, enclave
from .attestation import AttestationAuthority, AttestationClient, AttestationService
from .broker import Broker, BrokerService
from .contracts import catch_area, mass_balance
from .datastore import AccessDenied, DatastoreClient, DatastoreService
from .gateway import GatewayClient, GatewayService, HashChainLedger
from .runtime import (
    PAC_ROOT,
    GenerationContext,
    OscManifest,
    OscRunner,
    allowed_prefixes,
    compute_pac_hash,
    path_allowed,
)
from .validator import PASS, ValidatorService, attestor_from_url

GROUP_ID = "qe-group-1"
PLATFORM_ID = "platform-1"
MEMBERS = ("qe-1", "qe-2", "qe-3")

WORKFLOW_STEPS = 15
BENCH_GRID = tuple(1000 * 2**i for i in range(6))
BENCH_PHASES = ("enclave_setup", "data_fetch", "compute", "store", "anchor", "total")


class Topology:
    """Every service of one deployment, wired together on loopback."""

    def __init__(
        self,
        workdir: Path,
        min_svn: int = 1,
        batch_size: int = 64,
        batch_wait: float = 0.05,
        ports: dict[str, int] | None = None,
    ):
        ports = ports or {}
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.min_svn = min_svn
        self.datastore = DatastoreService(
            log_path=str(self.workdir / "store.jsonl"),
            http_port=ports.get("datastore", 0),
            feed_port=ports.get("feed", 0),
        )
        self.ledger = HashChainLedger(
            path=str(self.workdir / "chain.jsonl"),
            batch_size=batch_size,
            batch_wait=batch_wait,
        )
        self.gateway = GatewayService(self.ledger, port=ports.get("gateway", 0))
        self.authority = AttestationAuthority(min_svn=min_svn)
        self.group = crypto.SigningGroup.create(GROUP_ID, MEMBERS)
        self.authority.register_group(self.group)
        self.attestation = AttestationService(
            self.authority, admin_token=crypto.random_token(), port=ports.get("attestation", 0)
        )
        self._broker_port = ports.get("broker", 0)
        self._validator_port = ports.get("validator", 0)
        self.broker: Broker | None = None
        self.broker_service: BrokerService | None = None
        self.validator: ValidatorService | None = None
        self._started = False

    def start(self) -> "Topology":
        if self._started:
            return self
        self.datastore.start()
        self.gateway.start()
        self.attestation.start()
        self.broker = Broker(
            self.datastore.url,
            self.datastore.owner_token,
            attestation_url=self.attestation.url,
            gateway_url=self.gateway.url,
            min_svn=self.min_svn,
            feed_addr=self.datastore.feed_addr,
        )
        self.broker_service = BrokerService(self.broker, port=self._broker_port).start()
        self.validator = ValidatorService(
            attestor=attestor_from_url(self.attestation.url),
            gateway=GatewayClient(self.gateway.url),
            min_svn=self.min_svn,
            port=self._validator_port,
        ).start()
        self._started = True
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        if self.validator is not None:
            self.validator.stop()
        if self.broker_service is not None:
            self.broker_service.stop()
        self.attestation.stop()
        self.gateway.stop()
        self.datastore.stop()

    def owner(self) -> DatastoreClient:
        return DatastoreClient(
            self.datastore.url,
            feed_addr=self.datastore.feed_addr,
            token=self.datastore.owner_token,
        )

    def platform_creds(self, member_id: str = "qe-1") -> dict[str, Any]:
        return {
            "platform_id": PLATFORM_ID,
            "group_id": self.group.group_id,
            "member_id": member_id,
            "member_secret": crypto.b64url_nopad(self.group.member_secret(member_id)),
        }

    def urls(self) -> dict[str, Any]:
        return {
            "datastore": self.datastore.url,
            "feed": list(self.datastore.feed_addr),
            "gateway": self.gateway.url,
            "attestation": self.attestation.url,
            "broker": self.broker_service.url if self.broker_service else None,
            "validator": self.validator.url if self.validator else None,
        }


class StepFailed(Exception):
    pass


class WorkflowLog:
    """Numbered progress lines, one per workflow step, plus a JSON trail."""

    def __init__(self, stream: Any = None):
        self.steps: list[dict[str, Any]] = []
        self.stream = stream if stream is not None else sys.stdout

    def step(self, label: str, ok: bool = True, note: str = "") -> None:
        n = len(self.steps) + 1
        self.steps.append({"n": n, "label": label, "ok": bool(ok), "note": note})
        mark = "ok" if ok else "FAILED"
        suffix = f"  ({note})" if note else ""
        # steps past the workflow proper are variant bookkeeping
        prefix = f"[{n:2d}/{WORKFLOW_STEPS}]" if n <= WORKFLOW_STEPS else f"[ +{n - WORKFLOW_STEPS:2d} ]"
        print(f"{prefix} {mark:6s} {label}{suffix}", file=self.stream)
        if not ok:
            raise StepFailed(label)

    def skip(self, label: str, note: str) -> None:
        self.step(label, ok=True, note=note)


class BrokerHttp:
    """Owner-side client for the broker API, used by the demos.

    The demos go through HTTP on purpose: they exercise the same
    surface the dashboard uses rather than the in-process objects.
    """

    def __init__(self, base_url: str, owner_token: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self._headers = {"Authorization": f"Bearer {owner_token}"}
        self.timeout = timeout
        self._session = requests.Session()

    def _call(self, method: str, path: str, body: dict[str, Any] | None = None) -> dict[str, Any]:
        resp = self._session.request(
            method, self.base_url + path, json=body, headers=self._headers, timeout=self.timeout
        )
        doc = resp.json()
        if not resp.ok and not (isinstance(doc, dict) and "reason" in doc):
            resp.raise_for_status()
        return doc

    def state(self) -> dict[str, Any]:
        return self._call("GET", "/state")

    def authorize(self, jwk: dict[str, Any], name: str) -> dict[str, Any]:
        return self._call("POST", "/authorize", {"jwk": jwk, "name": name})

    def attest(self, h_k: str) -> dict[str, Any]:
        return self._call("POST", f"/channels/{h_k}/attest")

    def provision(self, h_k: str, filter: dict[str, Any]) -> dict[str, Any]:
        return self._call("POST", f"/channels/{h_k}/provision", {"filter": filter})


def validate_over_http(validator_url: str, pac: dict[str, Any], level: int) -> dict[str, Any]:
    resp = requests.post(
        validator_url.rstrip("/") + "/validate", json={"pac": pac, "level": level}, timeout=30
    )
    resp.raise_for_status()
    return resp.json()


# ---- scenario data ----


@dataclass
class Scenario:
    name: str
    osc_name: str
    trust_level: int
    seed_fn: Callable[[DatastoreClient, random.Random], dict[str, Any]] | None
    filter_fn: Callable[[dict[str, Any]], dict[str, Any]]
    expect_fn: Callable[[dict[str, Any], dict[str, Any]], str | None]


def seed_sustainability(owner: DatastoreClient, rng: random.Random) -> dict[str, Any]:
    site = "/bookmarks/sites/plant-7"
    bills = {f"2025-{month:02d}": {"kwh": rng.randint(800, 1600)} for month in range(1, 13)}
    owner.put(site + "/bills", bills)
    return {"site": site, "annual_kwh": sum(b["kwh"] for b in bills.values())}


def _sustainability_expect(result: dict[str, Any], seeded: dict[str, Any]) -> str | None:
    want = {
        "certified": True,
        "source": "bills",
        "annual_kwh": seeded["annual_kwh"],
        "months": 12,
    }
    if result != want:
        return f"expected {want}, got {result}"
    return None


def seed_catch(owner: DatastoreClient, rng: random.Random) -> dict[str, Any]:
    maker = crypto.KeyPair.from_secret(rng.randbytes(32))
    device = crypto.KeyPair.from_secret(rng.randbytes(32))
    endorsement = crypto.sign(maker.secret, device.public)
    # a rectangle of open water; all seeded pings fall inside it
    ring = [["-130.0", "50.0"], ["-125.0", "50.0"], ["-125.0", "54.0"], ["-130.0", "54.0"]]
    owner.put(
        catch_area.INDUSTRY_DOC,
        {
            "areas": {"zone-a": {"ring": ring}},
            "audited_manufacturers": {
                "acme-marine": {"public_key": crypto.b64url_nopad(maker.public)}
            },
        },
    )
    trip = "/bookmarks/trips/trip-7c2"
    points = []
    for i in range(24):
        point = {
            "lat": repr(round(rng.uniform(50.2, 53.8), 6)),
            "lon": repr(round(rng.uniform(-129.5, -125.5), 6)),
            "ts": 1755400000 + 600 * i,
        }
        point["sig"] = catch_area.sign_point(device.secret, point)
        points.append(point)
    owner.put(
        trip,
        {
            "device": {
                "manufacturer": "acme-marine",
                "public_key": crypto.b64url_nopad(device.public),
                "endorsement": crypto.b64url_nopad(endorsement),
            },
            "points": points,
        },
    )
    return {"trip": trip, "points": len(points)}


def _catch_expect(result: dict[str, Any], seeded: dict[str, Any]) -> str | None:
    want = {
        "certified": True,
        "area": "zone-a",
        "points_checked": seeded["points"],
        "points_inside": seeded["points"],
    }
    if result != want:
        return f"expected {want}, got {result}"
    return None


def seed_massbalance(owner: DatastoreClient, rng: random.Random, gateway_url: str) -> dict[str, Any]:
    lot = "/bookmarks/trades/lot-9f"
    genesis = crypto.b64url_nopad(crypto.KeyPair.from_secret(rng.randbytes(32)).public)
    entries = [{"kind": "attest", "qty": 10, "otk_pub": genesis}]
    GatewayClient(gateway_url).register_otk(genesis, mass_balance.state_hash(entries))
    owner.put(lot, {"entries": entries})
    return {"lot": lot, "attested": 10, "entries": entries}


def _massbalance_expect(result: dict[str, Any], seeded: dict[str, Any]) -> str | None:
    checks = [
        result.get("certified") is True,
        result.get("lot") == seeded["lot"],
        result.get("attested_total") == seeded["attested"],
        result.get("qty") == 4,
        result.get("remaining") == seeded["attested"] - 4,
    ]
    if not all(checks):
        return f"unexpected sale outcome {result}"
    return None


SCENARIOS: dict[str, Scenario] = {
    "tl1_sustainability": Scenario(
        name="tl1_sustainability",
        osc_name="sustainability",
        trust_level=1,
        seed_fn=seed_sustainability,
        filter_fn=lambda seeded: {"site": seeded["site"]},
        expect_fn=_sustainability_expect,
    ),
    "tl2_catch": Scenario(
        name="tl2_catch",
        osc_name="catch_area",
        trust_level=2,
        seed_fn=seed_catch,
        filter_fn=lambda seeded: {"trip": seeded["trip"], "area": "zone-a"},
        expect_fn=_catch_expect,
    ),
    "tl3_massbalance": Scenario(
        name="tl3_massbalance",
        osc_name="mass_balance",
        trust_level=3,
        seed_fn=None,  # needs the gateway url; handled in the driver
        filter_fn=lambda seeded: {"lot": seeded["lot"], "sale": {"buyer": "buyer-1", "qty": 4}},
        expect_fn=_massbalance_expect,
    ),
}


# ---- demo driver ----


def _wait_provision(owner: DatastoreClient, h_k: str, pid: str, timeout: float = 30.0) -> dict[str, Any]:
    """Block until a specific provision shows up in the channel audit."""
    deadline = time.monotonic() + timeout
    path = f"/bookmarks/OSC/{h_k}"
    while time.monotonic() < deadline:
        doc = owner.fetch_optional(path)
        if isinstance(doc, dict) and pid in (doc.get("audit") or {}):
            return doc
        time.sleep(0.05)
    raise StepFailed(f"provision {pid} did not finish within {timeout}s")


def _wait_discovery(broker_http: BrokerHttp, h_k: str, timeout: float = 10.0) -> dict[str, Any]:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        entry = broker_http.state()["channels"].get(h_k)
        if entry and entry.get("discovered_at"):
            return entry
        time.sleep(0.05)
    raise StepFailed(f"broker never discovered channel {h_k}")


def _write_json(path: Path, doc: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class DemoRun:
    scenario: str
    seed: int
    out_dir: Path
    ok: bool = False
    pac: dict[str, Any] | None = None
    validation: dict[str, Any] | None = None
    extras: dict[str, Any] = field(default_factory=dict)


def run_demo(
    scenario_name: str,
    out_dir: Path,
    seed: int = 42,
    double_spend: bool = False,
    revoked: bool = False,
    log: WorkflowLog | None = None,
    ports: dict[str, int] | None = None,
) -> DemoRun:
    scenario = SCENARIOS[scenario_name]
    log = log or WorkflowLog()
    rng = random.Random(seed)
    run = DemoRun(scenario=scenario_name, seed=seed, out_dir=Path(out_dir))

    topo = Topology(Path(out_dir) / "stack", ports=ports)
    try:
        topo.start()
        log.step(
            "core services listening",
            note=f"datastore {topo.datastore.url}, gateway {topo.gateway.url}",
        )

        owner = topo.owner()
        owner.fetch_optional("/bookmarks")  # an unauthorized token would be rejected here
        log.step("owner session opened", note="operator token accepted")

        broker_http = BrokerHttp(topo.broker_service.url, topo.datastore.owner_token)
        state = broker_http.state()
        log.step(
            "broker watching the channel tree",
            ok=isinstance(state.get("channels"), dict),
            note=f"broker {topo.broker_service.url}",
        )

        if scenario.seed_fn is not None:
            seeded = scenario.seed_fn(owner, rng)
        else:
            seeded = seed_massbalance(owner, rng, topo.gateway.url)
        filter = scenario.filter_fn(seeded)

        manifest = OscManifest.create(scenario.osc_name, scenario.trust_level)
        if scenario.trust_level >= 2:
            manifest.platform = topo.platform_creds()
        granted = broker_http.authorize(manifest.jwk, f"osc-{scenario.osc_name}")
        manifest.client_id = granted["client_id"]
        log.step("contract identity authorized", note=f"client {granted['client_id']}")

        runner = OscRunner(
            manifest,
            topo.datastore.url,
            gateway_url=topo.gateway.url if scenario.trust_level >= 3 else None,
            feed_addr=topo.datastore.feed_addr,
            platform_id=PLATFORM_ID,
        )
        announced = runner.start()
        h_k = announced["h_k"]
        log.step("contract announced its channel", note=f"channel {h_k}")

        try:
            _wait_discovery(broker_http, h_k)
            log.step("broker discovered the channel")

            if revoked:
                return _blocked_variant(run, topo, broker_http, owner, h_k, log)

            verdict = broker_http.attest(h_k)
            if scenario.trust_level >= 2:
                log.step(
                    "enclave attested",
                    ok=verdict.get("ok") is True and not verdict.get("skipped"),
                    note=f"group verdict {verdict.get('reason')}, svn {verdict.get('svn')}",
                )
            else:
                log.step(
                    "enclave attestation skipped by policy",
                    ok=verdict.get("ok") is True and verdict.get("skipped") is True,
                    note="level 1 carries no quote",
                )

            ticket = broker_http.provision(h_k, filter)
            granted_scopes = "provision_id" in ticket
            log.step(
                "data access provisioned",
                ok=granted_scopes,
                note=f"scopes {ticket['scopes']}" if granted_scopes else str(ticket),
            )

            doc = _wait_provision(owner, h_k, ticket["provision_id"])
            audit = doc["audit"][ticket["provision_id"]]
            log.step(
                "generation finished",
                ok=doc.get("status") == "complete",
                note=f"status {doc.get('status')}",
            )

            prefixes = allowed_prefixes(manifest.declared_paths, filter)
            touched = audit.get("data_paths") or []
            in_scope = bool(touched) and all(path_allowed(prefixes, p) for p in touched)
            log.step(
                "private reads stayed in scope",
                ok=in_scope,
                note=f"{len(touched)} paths under {prefixes}",
            )

            pac = owner.get(doc["pac_link"])
            run.pac = pac
            digest = pac.get("data_hash", "")
            log.step(
                "consumption digest sealed",
                ok=isinstance(digest, str) and len(digest) == 64,
                note=f"data_hash {digest[:16]}..",
            )

            expect_err = scenario.expect_fn(pac.get("result") or {}, seeded)
            body_ok = compute_pac_hash(pac) == pac.get("pac_hash")
            log.step(
                "artifact stored with matching body hash",
                ok=body_ok and expect_err is None,
                note=expect_err or f"pac {pac['id']}",
            )

            if scenario.trust_level >= 2:
                quote = pac.get("quote") or {}
                bound = (quote.get("report") or {}).get("user_data") == pac.get("pac_hash")
                log.step(
                    "platform quote bound to the artifact",
                    ok=bound,
                    note=f"quote_hash {pac.get('quote_hash', '')[:16]}..",
                )
            else:
                log.skip("platform quote not required", "level 1")

            chain_ok = GatewayClient(topo.gateway.url).verify()
            if scenario.trust_level >= 3:
                anchor = pac.get("anchor") or {}
                anchored = bool(anchor.get("block_hash")) and chain_ok
                log.step(
                    "anchored on the event ledger",
                    ok=anchored,
                    note=f"block {anchor.get('block_height')}, chain verified {chain_ok}",
                )
            else:
                log.step(
                    "ledger anchor not required",
                    ok=chain_ok,
                    note=f"chain verified {chain_ok}",
                )

            report = validate_over_http(topo.validator.url, pac, scenario.trust_level)
            run.validation = report
            log.step(
                f"independent validation at level {scenario.trust_level}",
                ok=report.get("verdict") == PASS,
                note=f"verdict {report.get('verdict')}",
            )

            if double_spend:
                _double_spend_variant(run, topo, broker_http, owner, h_k, seeded, log)

            run.extras["channel"] = owner.get(f"/bookmarks/OSC/{h_k}")
            run.ok = True
            return run
        finally:
            runner.stop()
    finally:
        _write_artifacts(run, log, topo)
        topo.stop()


def _blocked_variant(
    run: DemoRun,
    topo: Topology,
    broker_http: BrokerHttp,
    owner: DatastoreClient,
    h_k: str,
    log: WorkflowLog,
) -> DemoRun:
    """Revoked-platform path: attestation must fail and block provisioning."""
    admin = AttestationClient(topo.attestation.url, admin_token=topo.attestation.admin_token)
    for member in MEMBERS:
        admin.revoke(GROUP_ID, member)

    verdict = broker_http.attest(h_k)
    log.step(
        "enclave attestation rejected",
        ok=verdict.get("ok") is False and verdict.get("reason") == "REVOKED_GROUP_KEY",
        note=f"reason {verdict.get('reason')}",
    )

    refusal = broker_http.provision(h_k, {"trip": "/bookmarks/trips/trip-7c2", "area": "zone-a"})
    log.step(
        "provisioning refused",
        ok=refusal.get("reason") == "ATTESTATION_REQUIRED",
        note=f"reason {refusal.get('reason')}",
    )

    for label in (
        "no data token minted",
        "no generation started",
        "no digest produced",
        "no artifact stored",
        "no quote issued",
    ):
        log.skip(label, "channel blocked upstream")

    chain_ok = GatewayClient(topo.gateway.url).verify()
    log.step("ledger untouched", ok=chain_ok, note=f"chain verified {chain_ok}")

    reports = broker_http.state()["channels"][h_k].get("exception_reports") or []
    report_doc = owner.fetch_optional(reports[0]) if reports else None
    run.extras["exception_report"] = report_doc
    log.step(
        "exception report recorded",
        ok=bool(reports) and isinstance(report_doc, dict) and report_doc.get("reason") == "REVOKED_GROUP_KEY",
        note=reports[0] if reports else "missing",
    )
    run.ok = True
    return run


def _double_spend_variant(
    run: DemoRun,
    topo: Topology,
    broker_http: BrokerHttp,
    owner: DatastoreClient,
    h_k: str,
    seeded: dict[str, Any],
    log: WorkflowLog,
) -> None:
    """Replay a stale fork of the lot; the sale must be refused on-ledger.

    Steps beyond the fifteenth are attack bookkeeping; they extend the
    numbered trail rather than replacing it.
    """
    lot = seeded["lot"]
    # the attacker presents the pre-sale document state
    owner.put(lot, {"entries": seeded["entries"]})
    ticket = broker_http.provision(
        h_k, {"lot": lot, "sale": {"buyer": "attacker", "qty": 5}}
    )
    doc = _wait_provision(owner, h_k, ticket["provision_id"])
    pac = owner.get(doc["pac_link"]) if doc.get("pac_link") else None
    result = (pac or {}).get("result") or {}
    log.step(
        "stale fork sale refused",
        ok=result.get("certified") is False and result.get("reason") == mass_balance.R_SPENT,
        note=f"reason {result.get('reason')}",
    )

    report = validate_over_http(topo.validator.url, pac, 3)
    log.step(
        "refusal artifact still validates",
        ok=report.get("verdict") == PASS,
        note=f"verdict {report.get('verdict')}",
    )
    run.extras["attack_pac"] = pac
    run.extras["attack_validation"] = report


def _write_artifacts(run: DemoRun, log: WorkflowLog, topo: Topology) -> None:
    out = run.out_dir
    _write_json(
        out / "run.json",
        {
            "scenario": run.scenario,
            "seed": run.seed,
            "ok": run.ok,
            "steps": log.steps,
            "urls": topo.urls() if topo._started else None,
        },
    )
    if run.pac is not None:
        _write_json(out / "pac.json", run.pac)
    if run.validation is not None:
        _write_json(out / "validation.json", run.validation)
    for name, doc in run.extras.items():
        _write_json(out / f"{name}.json", doc)


# ---- bench suites ----


class _MemoryCtx:
    """In-memory stand-in for the data plane, used to time pure compute."""

    def __init__(self, docs: dict[str, Any]):
        self.docs = docs

    def fetch(self, path: str) -> Any:
        return self.docs[path]

    def fetch_optional(self, path: str) -> Any:
        return self.docs.get(path)

    def put(self, path: str, delta: Any) -> None:
        self.docs[path] = delta


def _timed(fn: Callable[[], Any]) -> tuple[float, Any]:
    started = time.perf_counter()
    value = fn()
    return (time.perf_counter() - started) * 1000.0, value


def bench_pac_generation(
    reps: int = 100, seed: int = 42, grid: tuple[int, ...] = BENCH_GRID
) -> list[dict[str, Any]]:
    """Time one certification per dataset size, phase by phase.

    Phases are sequential and add up to the reported total; every rep
    runs the full pipeline against live services.
    """
    rng = random.Random(seed)
    rows: list[dict[str, Any]] = []
    # single-entry batches so the anchor phase measures ledger work, not the timer
    with _bench_topology(batch_size=1, batch_wait=0.02) as topo:
        owner = topo.owner()
        source = contracts.source_bytes("kmeans")
        creds = topo.platform_creds()
        member_secret = crypto.b64url_decode(creds["member_secret"])
        group = crypto.SigningGroup(
            group_id=creds["group_id"],
            members={creds["member_id"]: crypto.KeyPair.from_secret(member_secret)},
        )
        gateway = GatewayClient(topo.gateway.url)

        for n in grid:
            k = n // 250
            dataset = f"/bookmarks/datasets/bench-{n}"
            points = [
                [repr(round(rng.uniform(-100.0, 100.0), 6)) for _ in range(2)] for _ in range(n)
            ]
            owner.put(dataset, {"points": points, "k": k})
            token = owner.mint_token(
                [
                    {"prefix": dataset, "read": True, "write": True},
                    {"prefix": PAC_ROOT, "read": True, "write": True},
                ],
                subject=f"bench-{n}",
            )
            samples: dict[str, list[float]] = {phase: [] for phase in BENCH_PHASES}

            for rep in range(reps):
                t_setup, built = _timed(
                    lambda: (
                        enclave.load_enclave(source, platform_id=PLATFORM_ID),
                        enclave.QuotingEnclave(
                            platform_id=PLATFORM_ID, group=group, member_id=creds["member_id"]
                        ),
                    )
                )
                encl, quoting = built

                data = DatastoreClient(
                    topo.datastore.url, feed_addr=topo.datastore.feed_addr, token=token
                )
                ctx = GenerationContext(data, [dataset, PAC_ROOT])
                t_fetch, doc = _timed(lambda: ctx.fetch(dataset))

                local = _MemoryCtx({dataset: doc})
                t_compute, result = _timed(
                    lambda: contracts.get("kmeans").run(local, {"dataset": dataset, "k": k})
                )

                pac: dict[str, Any] = {
                    "id": f"bench-{n}-{rep}",
                    "osc_name": "kmeans",
                    "osc_hash": encl.measurement["osc_hash"],
                    "trust_level": 3,
                    "filter": {"dataset": dataset, "k": k},
                    "result": result,
                    "data_hash": ctx.accumulator.digest_hex(),
                }
                pac["pac_hash"] = compute_pac_hash(pac)
                report = encl.create_report(user_data=pac["pac_hash"])
                quote = quoting.quote(report)
                pac["quote_hash"] = enclave.quote_hash(quote)

                t_store, _ = _timed(lambda: data.put(f"{PAC_ROOT}/{pac['id']}", pac))
                record = {
                    "id": pac["id"],
                    "quoteHash": pac["quote_hash"],
                    "OTK": crypto.b64(crypto.KeyPair.generate().public),
                }
                t_anchor, _ = _timed(lambda: gateway.put_pac(record))

                samples["enclave_setup"].append(t_setup)
                samples["data_fetch"].append(t_fetch)
                samples["compute"].append(t_compute)
                samples["store"].append(t_store)
                samples["anchor"].append(t_anchor)
                samples["total"].append(t_setup + t_fetch + t_compute + t_store + t_anchor)

            for phase in BENCH_PHASES:
                rows.append(_bench_row("pac_generation", "kmeans", n, k, phase, samples[phase]))
    return rows


def bench_gateway(
    reps: int = 100, seed: int = 42, batch_wait: float = 0.5
) -> list[dict[str, Any]]:
    """Time ledger writes against reads, cold and warm connections.

    Writes run against the default batching window: a put blocks until
    its batch seals, which is where the write cost of this design
    actually lives. Reads are answered from the gateway's index.
    """
    rng = random.Random(seed)
    rows: list[dict[str, Any]] = []
    with _bench_topology(batch_size=64, batch_wait=batch_wait) as topo:
        base = topo.gateway.url.rstrip("/")
        client = GatewayClient(base)
        ids: list[str] = []
        puts: list[float] = []
        for i in range(reps):
            record = {
                "id": f"gwbench-{i}",
                "quoteHash": crypto.sha256(rng.randbytes(32)).hex,
                "OTK": crypto.b64(rng.randbytes(32)),
            }
            elapsed, _ = _timed(lambda: client.put_pac(record))
            puts.append(elapsed)
            ids.append(record["id"])

        cold: list[float] = []
        for pac_id in ids:
            elapsed, resp = _timed(
                lambda: requests.get(f"{base}/pac/{pac_id}", timeout=30)
            )
            resp.raise_for_status()
            cold.append(elapsed)

        warm: list[float] = []
        session = requests.Session()
        session.get(f"{base}/pac/{ids[0]}", timeout=30)  # open the connection
        for pac_id in ids:
            elapsed, resp = _timed(lambda: session.get(f"{base}/pac/{pac_id}", timeout=30))
            resp.raise_for_status()
            warm.append(elapsed)

        rows.append(_bench_row("gateway", "put_pac", reps, None, "-", puts))
        rows.append(_bench_row("gateway", "get_pac", reps, None, "-", cold))
        rows.append(_bench_row("gateway", "get_pac_cached", reps, None, "-", warm))
    return rows


@contextmanager
def _bench_topology(batch_size: int = 1, batch_wait: float = 0.02) -> Any:
    tmp = Path(tempfile.mkdtemp(prefix="agapesim-bench-"))
    topo = Topology(tmp, batch_size=batch_size, batch_wait=batch_wait)
    try:
        yield topo.start()
    finally:
        topo.stop()


def _bench_row(
    suite: str, case: str, n: int, k: int | None, phase: str, samples: list[float]
) -> dict[str, Any]:
    return {
        "suite": suite,
        "case": case,
        "n": n,
        "k": "" if k is None else k,
        "phase": phase,
        "reps": len(samples),
        "mean_ms": round(statistics.fmean(samples), 3),
        "stddev_ms": round(statistics.stdev(samples), 3) if len(samples) > 1 else 0.0,
    }


BENCH_COLUMNS = ("suite", "case", "n", "k", "phase", "reps", "mean_ms", "stddev_ms")


def write_bench_csv(rows: list[dict[str, Any]], out: Any) -> None:
    writer = csv.DictWriter(out, fieldnames=BENCH_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


# ---- long-running stack for the dashboard ----


def _serve_stack(args: argparse.Namespace) -> int:
    workdir = Path(args.workdir) if args.workdir else Path.cwd() / ".agapesim-stack"
    ports = _load_config(args.config).get("ports", {}) if args.config else {}
    topo = Topology(workdir, ports=ports)
    topo.start()

    # demo data plus one contract waiting for its authorization, so the
    # dashboard can walk authorize, attest, provision, inspect end to end
    rng = random.Random(args.seed)
    owner = topo.owner()
    seeded = seed_catch(owner, rng)
    manifest = OscManifest.create("catch_area", 2)
    manifest.platform = topo.platform_creds()
    runner = OscRunner(
        manifest, topo.datastore.url, feed_addr=topo.datastore.feed_addr, platform_id=PLATFORM_ID
    )
    stop = threading.Event()

    def bring_up_when_authorized() -> None:
        while not stop.is_set():
            try:
                runner.start()
                print(f"contract on channel {runner.h_k}", flush=True)
                return
            except AccessDenied:
                stop.wait(0.5)

    waiter = threading.Thread(target=bring_up_when_authorized, daemon=True)
    waiter.start()

    state = {
        "pid": os.getpid(),
        "urls": topo.urls(),
        "owner_token": topo.datastore.owner_token,
        "admin_token": topo.attestation.admin_token,
        "osc": {
            "name": manifest.name,
            "trust_level": manifest.trust_level,
            "jwk": manifest.jwk,
            "filter": {"trip": seeded["trip"], "area": "zone-a"},
        },
    }
    state_file = Path(args.state_file)
    _write_json(state_file, state)
    print(f"stack up; state in {state_file}", flush=True)
    print(json.dumps(topo.urls(), indent=2), flush=True)

    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    try:
        done.wait()
    finally:
        stop.set()
        runner.stop()
        topo.stop()
        state_file.unlink(missing_ok=True)
    print("stack down", flush=True)
    return 0


def _stop_stack(args: argparse.Namespace) -> int:
    state_file = Path(args.state_file)
    try:
        with open(state_file, "r", encoding="utf-8") as fh:
            state = json.load(fh)
    except FileNotFoundError:
        print(f"no stack state at {state_file}", file=sys.stderr)
        return 1
    pid = int(state["pid"])
    try:
        os.kill(pid, signal.SIGTERM)
    except ProcessLookupError:
        state_file.unlink(missing_ok=True)
        print(f"stale state file removed (pid {pid} gone)")
        return 0
    for _ in range(100):
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            break
        time.sleep(0.05)
    print(f"stopped stack pid {pid}")
    return 0


def _load_config(path: str | None) -> dict[str, Any]:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---- CLI ----


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="agapesim", description="boot the certification stack and drive it"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    demo_p = sub.add_parser("demo", help="run one end-to-end certification scenario")
    demo_p.add_argument("scenario", choices=sorted(SCENARIOS))
    demo_p.add_argument("--out", default=None, help="artifacts directory")
    demo_p.add_argument("--seed", type=int, default=42)
    demo_p.add_argument("--config", default=None, help="JSON file with ports and seed")
    demo_p.add_argument(
        "--double-spend",
        action="store_true",
        help="after the honest sale, replay a stale fork (tl3_massbalance only)",
    )
    demo_p.add_argument(
        "--revoked",
        action="store_true",
        help="revoke the platform first; the run must be blocked at attestation",
    )

    bench_p = sub.add_parser("bench", help="time the generation and ledger hot paths")
    bench_p.add_argument("suite", choices=("pac_generation", "gateway"))
    bench_p.add_argument("--reps", type=int, default=100)
    bench_p.add_argument("--seed", type=int, default=42)
    bench_p.add_argument("--out", default=None, help="CSV path (stdout when absent)")

    up_p = sub.add_parser("up", help="keep a seeded stack running for the dashboard")
    up_p.add_argument("--workdir", default=None)
    up_p.add_argument("--state-file", default=".agapesim-stack.json")
    up_p.add_argument("--seed", type=int, default=42)
    up_p.add_argument("--config", default=None, help="JSON file with ports")

    down_p = sub.add_parser("down", help="stop a stack started with up")
    down_p.add_argument("--state-file", default=".agapesim-stack.json")

    args = parser.parse_args(argv)

    if args.command == "demo":
        config = _load_config(args.config)
        seed = args.seed if args.seed != demo_p.get_default("seed") else config.get("seed", args.seed)
        if args.double_spend and args.scenario != "tl3_massbalance":
            parser.error("--double-spend applies to tl3_massbalance only")
        if args.revoked and args.scenario != "tl2_catch":
            parser.error("--revoked applies to tl2_catch only")
        out_dir = Path(args.out) if args.out else Path.cwd() / "artifacts" / args.scenario
        try:
            run = run_demo(
                args.scenario,
                out_dir,
                seed=seed,
                double_spend=args.double_spend,
                revoked=args.revoked,
                ports=config.get("ports", {}),
            )
        except StepFailed as failure:
            print(f"workflow failed: {failure}", file=sys.stderr)
            return 1
        print(f"artifacts in {out_dir}")
        return 0 if run.ok else 1

    if args.command == "bench":
        if args.suite == "pac_generation":
            rows = bench_pac_generation(reps=args.reps, seed=args.seed)
        else:
            rows = bench_gateway(reps=args.reps, seed=args.seed)
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="") as fh:
                write_bench_csv(rows, fh)
            print(f"wrote {len(rows)} rows to {args.out}")
        else:
            buf = io.StringIO()
            write_bench_csv(rows, buf)
            sys.stdout.write(buf.getvalue())
        return 0

    if args.command == "up":
        return _serve_stack(args)
    return _stop_stack(args)


if __name__ == "__main__":
    raise SystemExit(main())
