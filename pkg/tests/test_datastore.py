import random

import pytest
import requests
from hypothesis import given, settings, strategies as st

from agapesim import crypto
from agapesim.datastore import (
    AuthzDenied,
    DatastoreClient,
    DatastoreService,
    GraphStore,
    InvalidDelta,
    ResourceNotFound,
    ScopeEntry,
    deep_merge,
    scope_covers,
)
from agapesim.datastore.client import AccessDenied, public_jwk
from oracles import deep_merge_oracle, fold_events_oracle
from treegen import random_tree

json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(max_size=6),
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=4), children, max_size=4),
    max_leaves=12,
)

_SEGMENTS = ["bookmarks", "trellis", "certs", "a", "b", "c", "deep"]


def _random_path(rng: random.Random) -> str:
    depth = rng.randint(1, 4)
    return "/" + "/".join(rng.choice(_SEGMENTS) for _ in range(depth))


@settings(max_examples=200)
@given(json_values, json_values)
def test_deep_merge_matches_oracle(base, delta):
    assert deep_merge(base, delta) == deep_merge_oracle(base, delta)


@settings(max_examples=100)
@given(json_values, json_values)
def test_deep_merge_idempotent(base, delta):
    once = deep_merge(base, delta)
    assert deep_merge(once, delta) == once


def test_merge_semantics_basics():
    store = GraphStore()
    store.merge("/doc", {"a": {"x": 1}, "arr": [1, 2], "keep": "old"})
    store.merge("/doc", {"a": {"y": 2}, "arr": [9], "n": None})
    assert store.get("/doc") == {"a": {"x": 1, "y": 2}, "arr": [9], "keep": "old", "n": None}


def test_merge_is_idempotent_with_rev_still_advancing():
    store = GraphStore()
    first = store.merge("/doc", {"a": 1})
    again = store.merge("/doc", {"a": 1})
    assert store.get("/doc") == {"a": 1}
    assert first["changed"] is True
    assert again["changed"] is False
    assert again["rev"] == first["rev"] + 1
    assert again["resource_id"] == first["resource_id"]


def test_merge_at_subpath_maps_to_owning_resource():
    store = GraphStore()
    top = store.merge("/bookmarks/orders", {"o1": {"qty": 1}})
    sub = store.merge("/bookmarks/orders/o1", {"qty": 2})
    other = store.merge("/bookmarks/other", {"x": 1})
    assert sub["resource_id"] == top["resource_id"]
    assert other["resource_id"] != top["resource_id"]
    assert store.get("/bookmarks/orders/o1") == {"qty": 2}


def test_rejected_merge_consumes_no_seq():
    store = GraphStore()
    r1 = store.merge("/doc", {"a": 1})
    with pytest.raises(InvalidDelta):
        store.merge("/doc", {"bad": 1.5})
    r2 = store.merge("/doc", {"b": 2})
    assert r2["seq"] == r1["seq"] + 1
    assert r2["rev"] == r1["rev"] + 1


def test_get_missing_path_raises():
    store = GraphStore()
    store.merge("/doc", {"a": 1})
    from agapesim.datastore import MissingPath

    with pytest.raises(MissingPath):
        store.get("/doc/missing")
    with pytest.raises(MissingPath):
        store.get("/other")


def test_feed_replay_reconstructs_state():
    rng = random.Random(2024)
    store = GraphStore()
    events = []
    store.subscribe("/", lambda ev: events.append(ev.to_json()))
    for _ in range(300):
        delta = random_tree(rng)
        store.merge(_random_path(rng), delta)
    assert fold_events_oracle(events) == store.get("/")
    assert [e["seq"] for e in events] == list(range(1, len(events) + 1))


def test_subscription_prefix_filter():
    store = GraphStore()
    seen = []
    store.subscribe("/a/b", lambda ev: seen.append(ev.path))
    store.merge("/a/b/c", {"x": 1})
    store.merge("/a", {"y": 2})
    store.merge("/a/z", {"q": 3})
    assert seen == ["/a/b/c", "/a"]


def test_unsubscribe_stops_delivery():
    store = GraphStore()
    seen = []
    cancel = store.subscribe("/", lambda ev: seen.append(ev.seq))
    store.merge("/doc", {"a": 1})
    cancel()
    store.merge("/doc", {"b": 2})
    assert seen == [1]


def test_log_replay_restores_state_and_counters(tmp_path):
    log = tmp_path / "merges.jsonl"
    store = GraphStore(log_path=log)
    rng = random.Random(5)
    for _ in range(40):
        store.merge(_random_path(rng), random_tree(rng))
    snapshot = store.get("/")
    last = store.merge("/doc", {"done": True})
    store.close()

    revived = GraphStore(log_path=log)
    assert revived.get("/doc") == {"done": True}
    state = revived.get("/")
    state.pop("doc")
    assert state == snapshot
    nxt = revived.merge("/doc", {"done": False})
    assert nxt["seq"] == last["seq"] + 1
    assert nxt["rev"] == last["rev"] + 1
    assert nxt["resource_id"] == last["resource_id"]
    revived.close()


def test_scope_covers_against_plain_prefix_check():
    rng = random.Random(99)
    for _ in range(2000):
        prefix = _random_path(rng)
        path = _random_path(rng)
        granted = ScopeEntry(prefix, read=True, write=rng.random() < 0.5)
        wanted = ScopeEntry(path, read=True)
        ps = [s for s in prefix.split("/") if s]
        xs = [s for s in path.split("/") if s]
        assert scope_covers(granted, wanted) == (xs[: len(ps)] == ps)


def test_scope_flags_enforced():
    ro = ScopeEntry("/a", read=True, write=False)
    assert scope_covers(ro, ScopeEntry("/a/b", read=True))
    assert not scope_covers(ro, ScopeEntry("/a/b", write=True))
    assert not scope_covers(ScopeEntry("/a/bc", read=True), ScopeEntry("/a/b", read=True))


@pytest.fixture()
def service():
    svc = DatastoreService().start()
    yield svc
    svc.stop()


def _registered_client(svc, scopes, name="test-client"):
    kp = crypto.KeyPair.generate()
    anon = DatastoreClient(svc.url, feed_addr=svc.feed_addr)
    client_id = anon.register(public_jwk(kp.public), name)["client_id"]
    owner = DatastoreClient(svc.url, token=svc.owner_token)
    owner.authorize_client(client_id, scopes)
    anon.obtain_token(client_id, kp.secret)
    return anon, client_id, kp


def test_http_round_trip_with_scoped_client(service):
    owner = DatastoreClient(service.url, token=service.owner_token)
    owner.put("/bookmarks/data/orders", {"o1": {"qty": 3}})

    client, _cid, _kp = _registered_client(
        service, [{"prefix": "/bookmarks/data", "read": True, "write": True}]
    )
    assert client.get("/bookmarks/data/orders") == {"o1": {"qty": 3}}
    receipt = client.put("/bookmarks/data/orders/o1", {"qty": 4})
    assert receipt["changed"] is True
    assert client.get("/bookmarks/data/orders/o1/qty") == 4


def test_http_scope_denials(service):
    client, _cid, _kp = _registered_client(
        service, [{"prefix": "/bookmarks/data", "read": True, "write": False}]
    )
    owner = DatastoreClient(service.url, token=service.owner_token)
    owner.put("/bookmarks/data/x", {"v": 1})
    owner.put("/private/y", {"v": 2})

    assert client.get("/bookmarks/data/x") == {"v": 1}
    with pytest.raises(AccessDenied):
        client.put("/bookmarks/data/x", {"v": 9})
    with pytest.raises(AccessDenied):
        client.get("/private/y")
    with pytest.raises(AccessDenied):
        DatastoreClient(service.url, token="bogus").get("/bookmarks/data/x")


def test_http_missing_resource_404(service):
    owner = DatastoreClient(service.url, token=service.owner_token)
    with pytest.raises(ResourceNotFound):
        owner.get("/bookmarks/nothing")


def test_http_float_delta_rejected(service):
    owner = DatastoreClient(service.url, token=service.owner_token)
    resp = requests.put(
        service.url + "/resources/bookmarks/x",
        json={"bad": 0.5},
        headers={"Authorization": f"Bearer {service.owner_token}"},
    )
    assert resp.status_code == 400


def test_registration_is_idempotent(service):
    kp = crypto.KeyPair.generate()
    anon = DatastoreClient(service.url)
    first = anon.register(public_jwk(kp.public), "dup")
    second = anon.register(public_jwk(kp.public), "dup-again")
    assert first["client_id"] == second["client_id"]


def test_token_requires_authorization_first(service):
    kp = crypto.KeyPair.generate()
    anon = DatastoreClient(service.url)
    client_id = anon.register(public_jwk(kp.public), "pending")["client_id"]
    with pytest.raises(AccessDenied):
        anon.obtain_token(client_id, kp.secret)


def test_token_rejects_wrong_key(service):
    kp = crypto.KeyPair.generate()
    imposter = crypto.KeyPair.generate()
    anon = DatastoreClient(service.url)
    client_id = anon.register(public_jwk(kp.public), "victim")["client_id"]
    DatastoreClient(service.url, token=service.owner_token).authorize_client(
        client_id, [{"prefix": "/bookmarks", "read": True, "write": False}]
    )
    with pytest.raises(AccessDenied):
        anon.obtain_token(client_id, imposter.secret)


def test_token_scope_narrowing_is_intersection(service):
    client, client_id, kp = _registered_client(
        service, [{"prefix": "/bookmarks/data", "read": True, "write": True}]
    )
    # asking for a broader prefix than authorized yields nothing
    with pytest.raises(AccessDenied):
        client.obtain_token(client_id, kp.secret, scopes=[{"prefix": "/", "read": True}])
    client.obtain_token(
        client_id, kp.secret, scopes=[{"prefix": "/bookmarks/data/sub", "read": True}]
    )
    owner = DatastoreClient(service.url, token=service.owner_token)
    owner.put("/bookmarks/data/sub", {"ok": 1})
    owner.put("/bookmarks/data/top", {"no": 1})
    assert client.get("/bookmarks/data/sub") == {"ok": 1}
    with pytest.raises(AccessDenied):
        client.get("/bookmarks/data/top")


def test_owner_can_mint_delegated_token(service):
    owner = DatastoreClient(service.url, token=service.owner_token)
    owner.put("/bookmarks/data/x", {"v": 1})
    token = owner.mint_token([{"prefix": "/bookmarks/data", "read": True, "write": False}])
    delegate = DatastoreClient(service.url, token=token)
    assert delegate.get("/bookmarks/data/x") == {"v": 1}
    with pytest.raises(AccessDenied):
        delegate.put("/bookmarks/data/x", {"v": 2})
    with pytest.raises(AccessDenied):
        DatastoreClient(service.url, token="nope").mint_token([{"prefix": "/", "read": True}])


def test_feed_delivers_matching_events(service):
    owner = DatastoreClient(service.url, feed_addr=service.feed_addr, token=service.owner_token)
    sub = owner.watch("/bookmarks/watched")
    try:
        owner.put("/bookmarks/other", {"skip": True})
        owner.put("/bookmarks/watched/item", {"x": 1})
        event = sub.next_event(timeout=5)
        assert event is not None
        assert event["path"] == "/bookmarks/watched/item"
        assert event["delta"] == {"x": 1}
        assert event["rev"] == 1
    finally:
        sub.close()


def test_feed_requires_read_scope(service):
    client, _cid, _kp = _registered_client(
        service, [{"prefix": "/bookmarks/data", "read": True, "write": False}]
    )
    client.feed_addr = service.feed_addr
    with pytest.raises(AccessDenied):
        client.watch("/private")
    sub = client.watch("/bookmarks/data")
    sub.close()


def test_feed_then_snapshot_sees_everything(service):
    owner = DatastoreClient(service.url, feed_addr=service.feed_addr, token=service.owner_token)
    owner.put("/bookmarks/log/a", {"n": 1})
    sub = owner.watch("/bookmarks/log")
    try:
        snapshot = owner.get("/bookmarks/log")
        owner.put("/bookmarks/log/b", {"n": 2})
        event = sub.next_event(timeout=5)
        state = dict(snapshot)
        seg = [s for s in event["path"].split("/") if s][-1]
        state[seg] = event["delta"]
        assert state == {"a": {"n": 1}, "b": {"n": 2}}
    finally:
        sub.close()


def test_authz_denied_maps_to_forbidden_for_known_token(service):
    record = service.auth.mint_token("x", [{"prefix": "/somewhere", "read": True}])
    with pytest.raises(AuthzDenied):
        service.auth.check(record.token, "/elsewhere", write=False)
