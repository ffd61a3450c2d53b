import hashlib
import json

import pytest

from agapesim import contracts, crypto, runtime
from agapesim.attestation import REASON_VALID
from agapesim.contracts import mass_balance
from agapesim.datastore import DatastoreClient
from agapesim.gateway import GatewayClient
from agapesim.runtime import (
    CHANNEL_ROOT,
    PAC_ROOT,
    DataHashAccumulator,
    DataUnavailable,
    GenerationContext,
    OscManifest,
    OscRunner,
    RuntimeError_,
    ScopeViolation,
    allowed_prefixes,
    attest_user_data,
    compute_pac_hash,
    generate_pac,
    normalize_otk_record,
    path_allowed,
)
from livestack import (
    install_manifest,
    provision_channel,
    wait_attest_response,
    wait_channel,
)
from oracles import canonical_oracle

# ---- data hash accumulator ----


def _fold_oracle(frames):
    h = hashlib.sha256()
    for op, target, payload in frames:
        h.update(f"{op} {target}\n".encode("utf-8"))
        h.update(canonical_oracle(payload))
        h.update(b"\n")
    return h.hexdigest()


def test_accumulator_matches_byte_oracle():
    frames = [
        ("GET", "/bookmarks/a", {"v": 1}),
        ("GET", "/bookmarks/b", None),
        ("PUT", "/bookmarks/a", {"delta": {"v": 2}}),
        ("HEAD", "-", {"head": "00ff"}),
    ]
    acc = DataHashAccumulator()
    for op, target, payload in frames:
        acc.fold(op, target, payload)
    assert acc.digest_hex() == _fold_oracle(frames)
    assert acc.frames == 4


def test_accumulator_order_and_absence_matter():
    a, b, c = DataHashAccumulator(), DataHashAccumulator(), DataHashAccumulator()
    a.fold("GET", "/x", 1)
    a.fold("GET", "/y", 2)
    b.fold("GET", "/y", 2)
    b.fold("GET", "/x", 1)
    c.fold("GET", "/x", 1)
    c.fold("GET", "/y", None)
    digests = {a.digest_hex(), b.digest_hex(), c.digest_hex()}
    assert len(digests) == 3


# ---- scope templates ----


def test_allowed_prefixes_resolution():
    declared = ["/bookmarks/trips/{trip}", "/bookmarks/industry/fishing"]
    got = allowed_prefixes(declared, {"trip": "/bookmarks/trips/t-9"})
    assert got == ["/bookmarks/trips/t-9", "/bookmarks/industry/fishing"]


def test_allowed_prefixes_rejects_escapes():
    declared = ["/bookmarks/sites/{site}"]
    # value outside the template's stem
    assert allowed_prefixes(declared, {"site": "/bookmarks/other/x"}) == []
    # value spanning extra segments
    assert allowed_prefixes(declared, {"site": "/bookmarks/sites/a/b"}) == []
    # empty tail
    assert allowed_prefixes(declared, {"site": "/bookmarks/sites/"}) == []
    # missing filter key
    assert allowed_prefixes(declared, {}) == []


def test_path_allowed_respects_segment_boundaries():
    prefixes = ["/bookmarks/sites/acme"]
    assert path_allowed(prefixes, "/bookmarks/sites/acme")
    assert path_allowed(prefixes, "/bookmarks/sites/acme/report")
    assert not path_allowed(prefixes, "/bookmarks/sites/acme2")
    assert not path_allowed(prefixes, "/bookmarks/sites")


# ---- manifest ----


def test_manifest_round_trip(tmp_path):
    manifest = OscManifest.create("sustainability", trust_level=2, svn=3)
    manifest.client_id = "c-abc"
    manifest.platform = {
        "platform_id": "p-1",
        "group_id": "g-1",
        "member_id": "m-1",
        "member_secret": crypto.b64url_nopad(b"\x01" * 32),
    }
    path = tmp_path / "manifest.json"
    manifest.save(path)
    loaded = OscManifest.load(path)
    assert loaded == manifest
    assert loaded.osc_hash() == contracts.code_hash("sustainability")
    assert loaded.jwk["kty"] == "OKP"


def test_manifest_defaults_declared_paths():
    manifest = OscManifest.create("catch_area", trust_level=2)
    assert manifest.declared_paths == list(contracts.get("catch_area").default_paths)


# ---- small helpers ----


def test_attest_user_data_is_hash_of_nonce_bytes():
    nonce = "00ff" * 8
    assert attest_user_data(nonce) == hashlib.sha256(bytes.fromhex(nonce)).hexdigest()


def test_pac_hash_skips_attestation_and_anchor_fields():
    pac = {
        "id": "x",
        "result": {"certified": True},
        "pac_hash": "ignored",
        "quote": {"a": 1},
        "quote_hash": "q",
        "report_hash": "r",
        "anchor": {"block_height": 1},
    }
    base = compute_pac_hash(pac)
    pac["quote"] = {"a": 2}
    pac["anchor"] = None
    assert compute_pac_hash(pac) == base
    pac["result"] = {"certified": False}
    assert compute_pac_hash(pac) != base


def test_normalize_otk_record():
    assert normalize_otk_record(None) is None
    rec = {"public_key": "k", "ledger_hash": "h", "used": 1, "extra": "dropped"}
    assert normalize_otk_record(rec) == {"public_key": "k", "ledger_hash": "h", "used": True}


# ---- generation context against live services ----


def _data_client(stack, prefixes):
    owner = stack.owner()
    scopes = [{"prefix": p, "read": True, "write": True} for p in prefixes]
    scopes.append({"prefix": PAC_ROOT, "read": True, "write": True})
    token = owner.mint_token(scopes)
    return DatastoreClient(stack.datastore.url, feed_addr=stack.datastore.feed_addr, token=token)


def test_context_blocks_out_of_scope_paths(stack):
    prefixes = ["/bookmarks/sites/acme"]
    ctx = GenerationContext(_data_client(stack, prefixes), prefixes)
    with pytest.raises(ScopeViolation) as err:
        ctx.fetch_optional("/bookmarks/sites/rival")
    assert err.value.path == "/bookmarks/sites/rival"
    with pytest.raises(ScopeViolation):
        ctx.put("/bookmarks/sites/rival/report", {"x": 1})
    # nothing leaked into the digest
    assert ctx.accumulator.frames == 0


def test_context_folds_misses_and_puts(stack):
    prefixes = ["/bookmarks/sites/acme"]
    stack.owner().put("/bookmarks/sites/acme/report", {"annual_kwh": 5, "year": 2025})
    ctx = GenerationContext(_data_client(stack, prefixes), prefixes)
    assert ctx.fetch("/bookmarks/sites/acme/report")["annual_kwh"] == 5
    assert ctx.fetch_optional("/bookmarks/sites/acme/nothing") is None
    ctx.put("/bookmarks/sites/acme/note", {"seen": True})
    expected = _fold_oracle(
        [
            ("GET", "/bookmarks/sites/acme/report", {"annual_kwh": 5, "year": 2025}),
            ("GET", "/bookmarks/sites/acme/nothing", None),
            ("PUT", "/bookmarks/sites/acme/note", {"delta": {"seen": True}}),
        ]
    )
    assert ctx.accumulator.digest_hex() == expected
    assert ctx.data_paths == [
        "/bookmarks/sites/acme/report",
        "/bookmarks/sites/acme/nothing",
        "/bookmarks/sites/acme/note",
    ]


def test_context_fetch_raises_on_missing(stack):
    prefixes = ["/bookmarks/sites/acme"]
    ctx = GenerationContext(_data_client(stack, prefixes), prefixes)
    with pytest.raises(DataUnavailable):
        ctx.fetch("/bookmarks/sites/acme/report")


def test_context_transcribes_ledger_traffic(stack):
    gw = GatewayClient(stack.gateway.url)
    ctx = GenerationContext(_data_client(stack, []), [], gateway=gw)
    head = ctx.ledger_head()
    key = ctx.new_otk()
    entries = [{"kind": "attest", "qty": 3, "otk_pub": key}]
    anchor = mass_balance.state_hash(entries)
    assert ctx.register_otk(key, anchor) == {"ok": True}
    record = ctx.get_otk(key)
    assert record == {"public_key": key, "ledger_hash": anchor, "used": False}
    fresh_head = gw.head()["head"]
    outcome = ctx.mark_used(key, mass_balance.key_proof(key, fresh_head), fresh_head)
    assert outcome == {"ok": True}

    ops = [(e["op"], e["target"]) for e in ctx.transcript]
    assert ops == [
        ("HEAD", "-"),
        ("NEWOTK", "-"),
        ("REGOTK", key),
        ("GETOTK", key),
        ("MARKUSED", key),
    ]
    assert ctx.transcript[2]["args"] == {"ledger_hash": anchor}
    assert ctx.transcript[4]["args"]["head"] == fresh_head
    assert ctx.transcript[0]["payload"] == {"head": head}
    assert ctx.accumulator.frames == 5


def test_context_without_gateway_refuses_ledger_ops(stack):
    ctx = GenerationContext(_data_client(stack, []), [])
    with pytest.raises(RuntimeError_):
        ctx.ledger_head()


# ---- generate_pac ----


def _seed_site(stack, site="/bookmarks/sites/acme"):
    stack.owner().put(f"{site}/report", {"annual_kwh": 321000, "year": 2025})
    return site


def _ctx_for(stack, manifest, filter, gateway=None):
    prefixes = allowed_prefixes(manifest.declared_paths, filter)
    return GenerationContext(_data_client(stack, prefixes), prefixes, gateway=gateway)


def _enclave_for(manifest, stack):
    from agapesim import enclave

    return enclave.load_enclave(
        contracts.source_bytes(manifest.name), svn=manifest.svn, platform_id=stack.platform_id
    )


def _quoting_for(stack, member_id="qe-1"):
    from agapesim import enclave

    secret = stack.group.member_secret(member_id)
    member = crypto.KeyPair(public=crypto.public_from_secret(secret), secret=secret)
    group = crypto.SigningGroup(group_id=stack.group.group_id, members={member_id: member})
    return enclave.QuotingEnclave(platform_id=stack.platform_id, group=group, member_id=member_id)


def test_generate_pac_trust_level_1_is_deterministic(stack):
    site = _seed_site(stack)
    manifest = OscManifest.create("sustainability", trust_level=1)
    filter = {"site": site}
    enc = _enclave_for(manifest, stack)
    runs = [
        generate_pac(manifest, enc, _ctx_for(stack, manifest, filter), filter, channel="ch-1")
        for _ in range(2)
    ]
    first, second = (r.pac for r in runs)
    assert first["result"] == second["result"] == {
        "certified": True,
        "source": "report",
        "annual_kwh": 321000,
        "year": 2025,
    }
    assert first["data_hash"] == second["data_hash"]
    assert first["id"] != second["id"]
    assert "quote" not in first and "anchor" not in first
    assert first["pac_hash"] == compute_pac_hash(first)
    assert first["osc_hash"] == contracts.code_hash("sustainability")
    audit = runs[0].audit
    assert audit["frames"] == len(audit["gateway_transcript"]) + len(audit["data_paths"])


def test_generate_pac_trust_level_2_binds_quote(stack):
    site = _seed_site(stack)
    manifest = OscManifest.create("sustainability", trust_level=2, svn=2)
    filter = {"site": site}
    enc = _enclave_for(manifest, stack)
    outcome = generate_pac(
        manifest, enc, _ctx_for(stack, manifest, filter), filter, quoting=_quoting_for(stack)
    )
    pac = outcome.pac
    quote = pac["quote"]
    assert quote["report"]["user_data"] == pac["pac_hash"]
    assert quote["report"]["measurement"]["osc_hash"] == pac["osc_hash"]
    assert pac["report_hash"] == crypto.hash_value(quote["report"]).hex
    from agapesim.enclave import quote_hash

    assert pac["quote_hash"] == quote_hash(quote)
    verdict = stack.attestation.authority.verify_quote(quote)
    assert verdict["ok"] is True and verdict["reason"] == REASON_VALID
    assert verdict["svn"] == 2


def test_generate_pac_trust_level_2_needs_quoting(stack):
    site = _seed_site(stack)
    manifest = OscManifest.create("sustainability", trust_level=2)
    with pytest.raises(RuntimeError_):
        generate_pac(
            manifest,
            _enclave_for(manifest, stack),
            _ctx_for(stack, manifest, {"site": site}),
            {"site": site},
        )


def test_generate_pac_trust_level_3_anchors(stack):
    site = _seed_site(stack)
    manifest = OscManifest.create("sustainability", trust_level=3)
    filter = {"site": site}
    gw = GatewayClient(stack.gateway.url)
    outcome = generate_pac(
        manifest,
        _enclave_for(manifest, stack),
        _ctx_for(stack, manifest, filter),
        filter,
        quoting=_quoting_for(stack),
        gateway=gw,
    )
    pac = outcome.pac
    anchor = pac["anchor"]
    assert anchor is not None
    record = gw.get_pac(pac["id"])
    assert record["quoteHash"] == pac["quote_hash"]
    assert record["OTK"] == anchor["OTK"]
    assert record["block_height"] == anchor["block_height"]
    assert record["block_hash"] == anchor["block_hash"]
    assert record["ts"] == anchor["ts"]
    assert gw.verify() is True
    # anchor arrives after the body hash is sealed, so it cannot affect it
    assert pac["pac_hash"] == compute_pac_hash(pac)


def test_generate_pac_trust_level_3_survives_missing_gateway(stack):
    site = _seed_site(stack)
    manifest = OscManifest.create("sustainability", trust_level=3)
    filter = {"site": site}
    outcome = generate_pac(
        manifest,
        _enclave_for(manifest, stack),
        _ctx_for(stack, manifest, filter),
        filter,
        quoting=_quoting_for(stack),
        gateway=None,
    )
    assert outcome.pac["anchor"] is None
    assert "gateway" in outcome.audit["anchor_error"]


# ---- channel runner end to end ----


def _start_runner(stack, manifest):
    runner = OscRunner(
        manifest,
        stack.datastore.url,
        gateway_url=None,
        feed_addr=stack.datastore.feed_addr,
        platform_id=stack.platform_id,
    )
    doc = runner.start()
    assert doc["h_k"] == runner.h_k
    return runner


def test_start_announces_channel(stack):
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        doc = stack.owner().fetch_optional(runner.channel_path)
        assert doc["status"] == "started"
        info = doc["osc_info"]
        assert info["name"] == "sustainability"
        assert info["osc_hash"] == manifest.osc_hash()
        assert info["trust_level"] == 1
        assert info["declared_paths"] == manifest.declared_paths
    finally:
        runner.stop()


def test_start_without_authorization_creates_nothing(stack):
    from agapesim.datastore import AccessDenied

    manifest = OscManifest.create("sustainability", trust_level=1)  # never authorized
    runner = OscRunner(manifest, stack.datastore.url, feed_addr=stack.datastore.feed_addr)
    with pytest.raises(AccessDenied):
        runner.start()
    assert runner.h_k is None
    assert stack.owner().fetch_optional(CHANNEL_ROOT) is None


def test_two_starts_get_distinct_channels(stack):
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    first = _start_runner(stack, manifest)
    second = _start_runner(stack, manifest)
    try:
        assert first.h_k != second.h_k
        tree = stack.owner().fetch_optional(CHANNEL_ROOT)
        assert set(tree) == {first.h_k, second.h_k}
    finally:
        first.stop()
        second.stop()


def test_runner_serves_a_sustainability_channel(stack):
    site = _seed_site(stack)
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        pid = provision_channel(stack, h_k, manifest, {"site": site})
        doc = wait_channel(stack, h_k)
        assert doc["status"] == "complete"
        pac = stack.owner().fetch_optional(doc["pac_link"])
        assert pac["result"]["certified"] is True
        assert pac["channel"] == h_k
        assert pac["provision_id"] == pid
        assert pac["trust_level"] == 1
        assert isinstance(pac["created_rev"], int)
        assert doc["audit"][pid]["frames"] > 0
    finally:
        runner.stop()


def test_runner_ignores_duplicate_provision_events(stack):
    site = _seed_site(stack)
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        pid = provision_channel(stack, h_k, manifest, {"site": site})
        doc = wait_channel(stack, h_k)
        first_link = doc["pac_link"]
        # poke the channel again with the same provision payload
        owner = stack.owner()
        owner.put(f"{CHANNEL_ROOT}/{h_k}", {"provisioned": {"provision_id": pid}})
        import time as _time

        _time.sleep(0.5)
        after = owner.fetch_optional(f"{CHANNEL_ROOT}/{h_k}")
        assert after["pac_link"] == first_link
        assert list((after["audit"] or {}).keys()) == [pid]
        pacs = owner.fetch_optional(PAC_ROOT)
        assert len(pacs) == 1
    finally:
        runner.stop()


def test_runner_answers_attestation_challenge(stack):
    manifest = install_manifest(stack, "catch_area", trust_level=2)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        nonce = crypto.sha256(b"challenge-1").hex
        stack.owner().put(f"{CHANNEL_ROOT}/{h_k}", {"attest_request": {"nonce": nonce}})
        response = wait_attest_response(stack, h_k, nonce)
        quote = response["quote"]
        assert quote["report"]["user_data"] == attest_user_data(nonce)
        assert quote["report"]["nonce"] == nonce
        verdict = stack.attestation.authority.verify_quote(quote)
        assert verdict["ok"] is True
        assert verdict["measurement"]["osc_hash"] == manifest.osc_hash()
    finally:
        runner.stop()


def test_runner_without_platform_reports_challenge_error(stack):
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        nonce = crypto.sha256(b"challenge-2").hex
        stack.owner().put(f"{CHANNEL_ROOT}/{h_k}", {"attest_request": {"nonce": nonce}})
        response = wait_attest_response(stack, h_k, nonce)
        assert "error" in response and "quote" not in response
    finally:
        runner.stop()


def test_runner_marks_scope_escape_failed(stack):
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        pid = provision_channel(stack, h_k, manifest, {"site": "/bookmarks/elsewhere/x"})
        doc = wait_channel(stack, h_k)
        assert doc["status"] == "failed"
        entry = doc["audit"][pid]
        assert entry["scope_violation"].startswith("/bookmarks/elsewhere/x")
        assert "pac_link" not in doc
    finally:
        runner.stop()


def test_runner_marks_missing_data_failed(stack):
    manifest = install_manifest(stack, "kmeans", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        pid = provision_channel(stack, h_k, manifest, {"dataset": "/bookmarks/datasets/ghost"})
        doc = wait_channel(stack, h_k)
        assert doc["status"] == "failed"
        assert "/bookmarks/datasets/ghost" in doc["audit"][pid]["error"]
    finally:
        runner.stop()


def test_runner_leaves_foreign_channels_alone(stack):
    site = _seed_site(stack)
    manifest = install_manifest(stack, "sustainability", trust_level=1)
    runner = _start_runner(stack, manifest)
    try:
        h_k = "ch-foreign"
        stack.owner().put(
            f"{CHANNEL_ROOT}/{h_k}",
            {
                "osc_info": {"name": "sustainability", "osc_hash": manifest.osc_hash(), "trust_level": 1},
                "status": "started",
                "provisioned": {"provision_id": "p-x", "filter": {"site": site}},
            },
        )
        import time as _time

        _time.sleep(0.5)
        doc = stack.owner().fetch_optional(f"{CHANNEL_ROOT}/{h_k}")
        assert doc["status"] == "started"
        assert "pac_link" not in doc
    finally:
        runner.stop()


def test_runner_full_mass_balance_round(stack):
    owner = stack.owner()
    gw = GatewayClient(stack.gateway.url)
    k0 = crypto.b64url_nopad(crypto.KeyPair.generate().public)
    entries = [{"kind": "attest", "qty": 10, "otk_pub": k0}]
    gw.register_otk(k0, mass_balance.state_hash(entries))
    lot = "/bookmarks/trades/lot-e2e"
    owner.put(lot, {"entries": entries})

    manifest = install_manifest(stack, "mass_balance", trust_level=3)
    runner = _start_runner(stack, manifest)
    try:
        h_k = runner.h_k
        pid = provision_channel(
            stack, h_k, manifest, {"lot": lot, "sale": {"buyer": "acme", "qty": 4}}
        )
        doc = wait_channel(stack, h_k)
        assert doc["status"] == "complete", json.dumps(doc.get("audit", {}))
        pac = owner.fetch_optional(doc["pac_link"])
        assert pac["result"]["certified"] is True
        assert pac["result"]["remaining"] == 6
        assert pac["anchor"] is not None
        assert gw.get_pac(pac["id"])["quoteHash"] == pac["quote_hash"]
        advanced = owner.fetch_optional(lot)
        assert len(advanced["entries"]) == 2
        assert doc["audit"][pid]["gateway_transcript"]
    finally:
        runner.stop()
