"""Append-only hash-chain ledger behind a small HTTP gateway.

All writes flow through one sequencer thread, which batches pending
transactions, validates them in arrival order against ledger state, and
commits the accepted ones as a block. Each block hashes its predecessor,
so the whole history is tamper-evident, and the single sequencer makes
one-time-key consumption genuinely one-time: of N racing attempts to
use the same key, exactly one can win.

One-time keys are registered together with the hash of the document
state they attest, and both the key and that hash must be globally
fresh. Consuming a key requires a proof bound to the chain head the
caller observed, so a proof cannot be minted ahead of time and replayed
after the chain has moved.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from concurrent.futures import Future
from typing import Any

import requests

from . import crypto
from .httpkit import JsonHttpServer, NotFound, Router

GENESIS_HASH = "0" * 64

REASON_MALFORMED = "MALFORMED"
REASON_DUPLICATE_ID = "DUPLICATE_ID"
REASON_DUPLICATE_KEY = "DUPLICATE_KEY"
REASON_HASH_COLLISION = "LEDGER_HASH_COLLISION"
REASON_UNKNOWN_KEY = "UNKNOWN_KEY"
REASON_ALREADY_USED = "ALREADY_USED"
REASON_BAD_PROOF = "BAD_PROOF"

_STOP = object()


class LedgerRejection(Exception):
    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


def use_proof(public_key: str, head: str) -> str:
    """Proof of key possession at a given chain head."""
    raw = crypto.b64url_decode(public_key)
    return crypto.sha256(raw + head.encode("ascii")).hex


def _is_hex_digest(value: Any) -> bool:
    if not isinstance(value, str) or len(value) != 64:
        return False
    try:
        bytes.fromhex(value)
        return True
    except ValueError:
        return False


class HashChainLedger:
    def __init__(
        self,
        path: str | os.PathLike[str] | None = None,
        batch_size: int = 64,
        batch_wait: float = 0.5,
    ):
        self.path = os.fspath(path) if path is not None else None
        self.batch_size = max(1, int(batch_size))
        self.batch_wait = float(batch_wait)
        self._blocks: list[dict[str, Any]] = []
        self._pacs: dict[str, dict[str, Any]] = {}
        self._otks: dict[str, dict[str, Any]] = {}
        self._ledger_hashes: set[str] = set()
        self._state_lock = threading.Lock()
        self._queue: queue.Queue = queue.Queue()
        self._thread: threading.Thread | None = None
        if self.path is not None and os.path.exists(self.path):
            self._load()

    # ---- lifecycle ----

    def start(self) -> "HashChainLedger":
        if self._thread is None:
            self._thread = threading.Thread(target=self._run, name="ledger-seq", daemon=True)
            self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self._queue.put(_STOP)
            self._thread.join(timeout=5)
            self._thread = None

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                stored = json.loads(line)
                block = {k: stored[k] for k in ("height", "prev_hash", "payload")}
                self._blocks.append({**block, "hash": stored["hash"]})
                self._absorb(block["payload"], stored["height"], stored["hash"])

    def _absorb(self, payload: list[dict[str, Any]], height: int, block_hash: str) -> None:
        for tx in payload:
            if tx["type"] == "put_pac":
                self._pacs[tx["id"]] = {**tx, "block_height": height, "block_hash": block_hash}
            elif tx["type"] == "register_otk":
                self._otks[tx["public_key"]] = {
                    "public_key": tx["public_key"],
                    "ledger_hash": tx["ledger_hash"],
                    "used": False,
                }
                self._ledger_hashes.add(tx["ledger_hash"])
            elif tx["type"] == "mark_used":
                self._otks[tx["public_key"]]["used"] = True

    # ---- reads ----

    def head(self) -> str:
        with self._state_lock:
            return self._blocks[-1]["hash"] if self._blocks else GENESIS_HASH

    def height(self) -> int:
        with self._state_lock:
            return len(self._blocks)

    def get_pac(self, pac_id: str) -> dict[str, Any] | None:
        with self._state_lock:
            record = self._pacs.get(pac_id)
            return dict(record) if record else None

    def get_otk(self, public_key: str) -> dict[str, Any] | None:
        with self._state_lock:
            record = self._otks.get(public_key)
            return dict(record) if record else None

    def blocks(self) -> list[dict[str, Any]]:
        with self._state_lock:
            return [dict(b) for b in self._blocks]

    # ---- writes ----

    def submit(self, tx: dict[str, Any], timeout: float | None = 30.0) -> dict[str, Any]:
        """Queue a transaction and wait for its sequencing outcome."""
        if self._thread is None:
            raise RuntimeError("ledger sequencer is not running")
        fut: Future = Future()
        self._queue.put((dict(tx), fut))
        outcome = fut.result(timeout=timeout)
        if isinstance(outcome, LedgerRejection):
            raise outcome
        return outcome

    def _run(self) -> None:
        while True:
            item = self._queue.get()
            if item is _STOP:
                return
            batch = [item]
            deadline = time.monotonic() + self.batch_wait
            while len(batch) < self.batch_size:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    nxt = self._queue.get(timeout=remaining)
                except queue.Empty:
                    break
                if nxt is _STOP:
                    self._commit(batch)
                    return
                batch.append(nxt)
            self._commit(batch)

    def _commit(self, batch: list[tuple[dict[str, Any], Future]]) -> None:
        accepted: list[tuple[dict[str, Any], Future]] = []
        with self._state_lock:
            staged_otks = {k: dict(v) for k, v in self._otks.items()}
            staged_pac_ids = set(self._pacs)
            staged_hashes = set(self._ledger_hashes)
            prev_hash = self._blocks[-1]["hash"] if self._blocks else GENESIS_HASH
            height = len(self._blocks)
            for tx, fut in batch:
                try:
                    self._validate(tx, staged_pac_ids, staged_otks, staged_hashes, prev_hash)
                except LedgerRejection as rej:
                    fut.set_result(rej)
                    continue
                tx["ts"] = int(time.time() * 1000)
                accepted.append((tx, fut))
                # stage effects so later txs in this batch see them
                if tx["type"] == "put_pac":
                    staged_pac_ids.add(tx["id"])
                elif tx["type"] == "register_otk":
                    staged_otks[tx["public_key"]] = {
                        "public_key": tx["public_key"],
                        "ledger_hash": tx["ledger_hash"],
                        "used": False,
                    }
                    staged_hashes.add(tx["ledger_hash"])
                elif tx["type"] == "mark_used":
                    staged_otks[tx["public_key"]]["used"] = True
            if not accepted:
                return
            payload = [tx for tx, _ in accepted]
            block = {"height": height, "prev_hash": prev_hash, "payload": payload}
            block_hash = crypto.hash_value(block).hex
            stored = {**block, "hash": block_hash}
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(stored, ensure_ascii=False) + "\n")
            self._blocks.append(stored)
            self._absorb(payload, height, block_hash)
        for index, (tx, fut) in enumerate(accepted):
            fut.set_result(
                {
                    "ok": True,
                    "block_height": height,
                    "block_hash": block_hash,
                    "tx_index": index,
                    "ts": tx["ts"],
                }
            )

    def _validate(
        self,
        tx: dict[str, Any],
        pac_ids: set[str],
        otks: dict[str, dict[str, Any]],
        hashes: set[str],
        prev_hash: str,
    ) -> None:
        kind = tx.get("type")
        if kind == "put_pac":
            if not isinstance(tx.get("id"), str) or not tx["id"]:
                raise LedgerRejection(REASON_MALFORMED, "record needs a string id")
            if not _is_hex_digest(tx.get("quoteHash")):
                raise LedgerRejection(REASON_MALFORMED, "quoteHash must be a hex digest")
            if not isinstance(tx.get("OTK"), str):
                raise LedgerRejection(REASON_MALFORMED, "OTK must be a base64 string")
            if tx["id"] in pac_ids:
                raise LedgerRejection(REASON_DUPLICATE_ID, f"id {tx['id']} already anchored")
        elif kind == "register_otk":
            key = tx.get("public_key")
            if not isinstance(key, str) or not key:
                raise LedgerRejection(REASON_MALFORMED, "public_key required")
            try:
                if len(crypto.b64url_decode(key)) != 32:
                    raise ValueError
            except Exception:
                raise LedgerRejection(REASON_MALFORMED, "public_key must be 32 bytes base64url")
            if not _is_hex_digest(tx.get("ledger_hash")):
                raise LedgerRejection(REASON_MALFORMED, "ledger_hash must be a hex digest")
            if key in otks:
                raise LedgerRejection(REASON_DUPLICATE_KEY, "key already registered")
            if tx["ledger_hash"] in hashes:
                raise LedgerRejection(
                    REASON_HASH_COLLISION, "that document state is already claimed"
                )
        elif kind == "mark_used":
            key = tx.get("public_key")
            record = otks.get(key) if isinstance(key, str) else None
            if record is None:
                raise LedgerRejection(REASON_UNKNOWN_KEY, "no such key")
            if record["used"]:
                raise LedgerRejection(REASON_ALREADY_USED, "key already consumed")
            if tx.get("head") != prev_hash:
                raise LedgerRejection(REASON_BAD_PROOF, "proof is stale, chain head moved")
            if tx.get("proof") != use_proof(key, prev_hash):
                raise LedgerRejection(REASON_BAD_PROOF, "proof does not match key and head")
        else:
            raise LedgerRejection(REASON_MALFORMED, f"unknown transaction type {kind!r}")

    # ---- verification ----

    def verify_chain(self) -> bool:
        """Recheck every link. Reads the persisted file when one exists."""
        if self.path is not None:
            if not os.path.exists(self.path):
                return len(self._blocks) == 0
            return verify_chain_file(self.path)
        return verify_blocks(self.blocks())


def verify_blocks(blocks: list[dict[str, Any]]) -> bool:
    try:
        prev = GENESIS_HASH
        for i, stored in enumerate(blocks):
            block = {
                "height": stored["height"],
                "prev_hash": stored["prev_hash"],
                "payload": stored["payload"],
            }
            if stored["height"] != i or stored["prev_hash"] != prev:
                return False
            if crypto.hash_value(block).hex != stored["hash"]:
                return False
            prev = stored["hash"]
        return True
    except Exception:
        return False


def verify_chain_file(path: str | os.PathLike[str]) -> bool:
    try:
        blocks = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    blocks.append(json.loads(line))
        return verify_blocks(blocks)
    except Exception:
        return False


class GatewayService:
    def __init__(self, ledger: HashChainLedger | None = None, host: str = "127.0.0.1", port: int = 0):
        self.ledger = ledger or HashChainLedger()
        self._http = JsonHttpServer(self._build_router(), host=host, port=port, name="gateway")

    @property
    def url(self) -> str:
        return self._http.url

    def start(self) -> "GatewayService":
        self.ledger.start()
        self._http.start()
        return self

    def stop(self) -> None:
        self._http.stop()
        self.ledger.stop()

    def _build_router(self) -> Router:
        router = Router()
        ledger = self.ledger

        def run(tx: dict[str, Any]):
            try:
                return ledger.submit(tx)
            except LedgerRejection as rej:
                body = {"ok": False, "reason": rej.reason, "message": str(rej)}
                if rej.reason in (REASON_MALFORMED, REASON_BAD_PROOF):
                    return 400, body
                if rej.reason == REASON_UNKNOWN_KEY:
                    return 404, body
                return 409, body

        @router.route("POST", "/pac")
        def put_pac(req):
            body = req.body or {}
            return run(
                {
                    "type": "put_pac",
                    "id": body.get("id"),
                    "quoteHash": body.get("quoteHash"),
                    "OTK": body.get("OTK"),
                }
            )

        @router.route("GET", "/pac/{pac_id}")
        def get_pac(req):
            record = ledger.get_pac(req.params["pac_id"])
            if record is None:
                raise NotFound("no anchored record with that id")
            return {
                "id": record["id"],
                "quoteHash": record["quoteHash"],
                "OTK": record["OTK"],
                "ts": record["ts"],
                "block_height": record["block_height"],
                "block_hash": record["block_hash"],
            }

        @router.route("POST", "/otk")
        def register_otk(req):
            body = req.body or {}
            return run(
                {
                    "type": "register_otk",
                    "public_key": body.get("public_key"),
                    "ledger_hash": body.get("ledger_hash"),
                }
            )

        @router.route("POST", "/otk/{key}/use")
        def mark_used(req):
            body = req.body or {}
            return run(
                {
                    "type": "mark_used",
                    "public_key": req.params["key"],
                    "proof": body.get("proof"),
                    "head": body.get("head"),
                }
            )

        @router.route("GET", "/otk/{key}")
        def get_otk(req):
            record = ledger.get_otk(req.params["key"])
            if record is None:
                raise NotFound("no such key")
            return record

        @router.route("GET", "/head")
        def head(req):
            return {"head": ledger.head(), "height": ledger.height()}

        @router.route("GET", "/verify")
        def verify(req):
            return {"ok": ledger.verify_chain()}

        return router


class GatewayError(Exception):
    pass


class GatewayRejected(GatewayError):
    def __init__(self, reason: str, message: str = "", status: int = 0):
        super().__init__(message or reason)
        self.reason = reason
        self.status = status


class GatewayClient:
    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self._session = requests.Session()

    def _call(self, method: str, path: str, body: dict[str, Any] | None = None) -> dict[str, Any]:
        resp = self._session.request(
            method, self.base_url + path, json=body, timeout=self.timeout
        )
        try:
            doc = resp.json()
        except ValueError:
            resp.raise_for_status()
            raise GatewayError(f"non-JSON response from {path}")
        if resp.ok and (not isinstance(doc, dict) or doc.get("ok") is not False):
            return doc
        if isinstance(doc, dict) and "reason" in doc:
            raise GatewayRejected(doc["reason"], doc.get("message", ""), resp.status_code)
        err = doc.get("error", {}) if isinstance(doc, dict) else {}
        raise GatewayRejected(
            err.get("code", "error").upper(), err.get("message", ""), resp.status_code
        )

    def put_pac(self, record: dict[str, Any]) -> dict[str, Any]:
        return self._call("POST", "/pac", record)

    def get_pac(self, pac_id: str) -> dict[str, Any]:
        return self._call("GET", f"/pac/{pac_id}")

    def fetch_pac(self, pac_id: str) -> dict[str, Any] | None:
        try:
            return self.get_pac(pac_id)
        except GatewayRejected as rej:
            if rej.status == 404:
                return None
            raise

    def register_otk(self, public_key: str, ledger_hash: str) -> dict[str, Any]:
        return self._call("POST", "/otk", {"public_key": public_key, "ledger_hash": ledger_hash})

    def get_otk(self, public_key: str) -> dict[str, Any]:
        return self._call("GET", f"/otk/{public_key}")

    def mark_used(self, public_key: str, proof: str, head: str) -> dict[str, Any]:
        return self._call("POST", f"/otk/{public_key}/use", {"proof": proof, "head": head})

    def head(self) -> dict[str, Any]:
        return self._call("GET", "/head")

    def verify(self) -> bool:
        return bool(self._call("GET", "/verify")["ok"])
