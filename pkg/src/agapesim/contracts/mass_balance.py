"""Mass-balance sale certification with one-time ledger keys.

A lot document carries an attested quantity and a chain of entries,
each entry naming the one-time key that was registered against the
document state ending at that entry. Certifying a sale means proving
the whole history is anchored, consuming the live key, and registering
a fresh key against the new state, in that order. Because the ledger
accepts each key and each state hash exactly once, two sellers working
from the same document state cannot both succeed, no matter how their
requests interleave: the second one dies at the key or at the state
hash.

A sale that fails still produces an artifact, with certified false and
the reason, so a buyer can see exactly why the lot would not sell.
"""

from __future__ import annotations

import base64
import hashlib
from typing import Any

from agapesim import crypto

MARK_USED_ATTEMPTS = 3

R_MALFORMED = "MALFORMED_DOC"
R_UNREGISTERED = "UNREGISTERED_HISTORY"
R_HISTORY_HASH = "HISTORY_HASH_MISMATCH"
R_HISTORY_UNUSED = "HISTORY_KEY_UNUSED"
R_SPENT = "KEY_ALREADY_SPENT"
R_OVERSOLD = "OVERSOLD"
R_CLAIMED = "STATE_ALREADY_CLAIMED"
R_CONTENTION = "LEDGER_CONTENTION"


def state_hash(entries: list[dict[str, Any]]) -> str:
    return crypto.hash_value({"entries": entries}).hex


def key_proof(public_key: str, head: str) -> str:
    pad = -len(public_key) % 4
    raw = base64.urlsafe_b64decode(public_key + "=" * pad)
    return hashlib.sha256(raw + head.encode("ascii")).hexdigest()


def _well_formed(doc: Any, sale: Any) -> bool:
    if not isinstance(doc, dict) or not isinstance(sale, dict):
        return False
    entries = doc.get("entries")
    if not isinstance(entries, list) or not entries:
        return False
    first = entries[0]
    if first.get("kind") != "attest" or not isinstance(first.get("qty"), int) or first["qty"] <= 0:
        return False
    for entry in entries:
        if not isinstance(entry, dict) or not isinstance(entry.get("otk_pub"), str):
            return False
        if entry is not first:
            if entry.get("kind") != "sale" or not isinstance(entry.get("qty"), int):
                return False
            if entry["qty"] <= 0:
                return False
    return isinstance(sale.get("qty"), int) and sale["qty"] > 0 and isinstance(sale.get("buyer"), str)


def run(ctx: Any, filter: dict[str, Any]) -> dict[str, Any]:
    lot_path = str(filter["lot"])
    sale = filter.get("sale")

    doc = ctx.fetch(lot_path)
    if not _well_formed(doc, sale):
        return _fail(lot_path, sale, R_MALFORMED)
    entries = doc["entries"]

    # every historic state must be anchored: key registered against the
    # exact document prefix, and consumed for all but the live tail
    last_index = len(entries) - 1
    live_record = None
    for i, entry in enumerate(entries):
        record = ctx.get_otk(entry["otk_pub"])
        if record is None:
            return _fail(lot_path, sale, R_UNREGISTERED, entry_index=i)
        if record["ledger_hash"] != state_hash(entries[: i + 1]):
            return _fail(lot_path, sale, R_HISTORY_HASH, entry_index=i)
        if i < last_index and not record["used"]:
            return _fail(lot_path, sale, R_HISTORY_UNUSED, entry_index=i)
        if i == last_index:
            live_record = record
    if live_record["used"]:
        return _fail(lot_path, sale, R_SPENT)

    attested = entries[0]["qty"]
    sold = sum(e["qty"] for e in entries[1:])
    if sold + sale["qty"] > attested:
        return _fail(lot_path, sale, R_OVERSOLD, attested_total=attested, sold_total=sold)

    live_key = entries[last_index]["otk_pub"]
    consumed = False
    for _attempt in range(MARK_USED_ATTEMPTS):
        head = ctx.ledger_head()
        outcome = ctx.mark_used(live_key, key_proof(live_key, head), head)
        if outcome.get("ok"):
            consumed = True
            break
        if outcome.get("reason") == "ALREADY_USED":
            return _fail(lot_path, sale, R_SPENT)
        if outcome.get("reason") != "BAD_PROOF":
            return _fail(lot_path, sale, R_CONTENTION, detail=outcome.get("reason"))
    if not consumed:
        return _fail(lot_path, sale, R_CONTENTION)

    new_key = ctx.new_otk()
    new_entries = entries + [
        {"kind": "sale", "buyer": sale["buyer"], "qty": sale["qty"], "otk_pub": new_key}
    ]
    new_hash = state_hash(new_entries)
    outcome = ctx.register_otk(new_key, new_hash)
    if not outcome.get("ok"):
        if outcome.get("reason") in ("LEDGER_HASH_COLLISION", "DUPLICATE_KEY"):
            return _fail(lot_path, sale, R_CLAIMED)
        return _fail(lot_path, sale, R_CONTENTION, detail=outcome.get("reason"))

    ctx.put(lot_path, {"entries": new_entries})

    return {
        "certified": True,
        "lot": lot_path,
        "buyer": sale["buyer"],
        "qty": sale["qty"],
        "attested_total": attested,
        "sold_total": sold + sale["qty"],
        "remaining": attested - sold - sale["qty"],
        "otk_pub": new_key,
        "ledger_hash": new_hash,
    }


def _fail(lot_path: str, sale: Any, reason: str, **detail: Any) -> dict[str, Any]:
    result = {"certified": False, "lot": lot_path, "reason": reason, **detail}
    if isinstance(sale, dict):
        result["buyer"] = sale.get("buyer")
        result["qty"] = sale.get("qty")
    return result
