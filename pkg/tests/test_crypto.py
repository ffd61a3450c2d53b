import json
import random

import pytest
from hypothesis import given, strategies as st

from agapesim import crypto
from oracles import canonical_oracle, sha256_hex_oracle
from treegen import random_tree, shuffled_clone

json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.text(),
    lambda children: st.lists(children, max_size=5)
    | st.dictionaries(st.text(max_size=8), children, max_size=5),
    max_leaves=20,
)


# published SHA-256 test vectors
def test_sha256_known_vectors():
    assert crypto.sha256(b"").hex == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )
    assert crypto.sha256(b"abc").hex == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


@given(json_values)
def test_canonical_matches_independent_writer(value):
    assert crypto.canonical_serialize(value) == canonical_oracle(value)


@given(json_values)
def test_canonical_round_trips(value):
    assert json.loads(crypto.canonical_serialize(value).decode("utf-8")) == value


def test_canonical_insensitive_to_key_order_bulk():
    rng = random.Random(1311)
    for _ in range(2000):
        tree = random_tree(rng)
        clone = shuffled_clone(rng, tree)
        assert crypto.canonical_serialize(tree) == crypto.canonical_serialize(clone)
        assert crypto.canonical_serialize(tree) == canonical_oracle(tree)


def test_canonical_no_whitespace_sorted_keys():
    out = crypto.canonical_serialize({"b": 1, "a": [True, None, "x"]}).decode()
    assert out == '{"a":[true,null,"x"],"b":1}'


def test_canonical_keeps_unicode_literal():
    assert crypto.canonical_serialize({"k": "中🙂"}) == '{"k":"中🙂"}'.encode("utf-8")


@pytest.mark.parametrize("bad", [1.5, float("nan"), float("inf"), {"x": 0.1}, [2.0]])
def test_canonical_rejects_floats(bad):
    with pytest.raises(crypto.CanonicalizationError):
        crypto.canonical_serialize(bad)


def test_canonical_rejects_non_string_keys_and_objects():
    with pytest.raises(crypto.CanonicalizationError):
        crypto.canonical_serialize({1: "x"})
    with pytest.raises(crypto.CanonicalizationError):
        crypto.canonical_serialize({"x": object()})


def test_hash_value_tracks_oracle():
    rng = random.Random(77)
    for _ in range(200):
        tree = random_tree(rng)
        assert crypto.hash_value(tree).hex == sha256_hex_oracle(canonical_oracle(tree))


def test_digest_shape():
    d = crypto.sha256(b"xyz")
    assert len(d.raw) == 32
    assert crypto.Digest.from_hex(d.hex) == d
    with pytest.raises(crypto.CryptoError):
        crypto.Digest(b"short")
    with pytest.raises(crypto.CryptoError):
        crypto.Digest.from_hex("zz")


def test_sign_verify_roundtrip():
    kp = crypto.KeyPair.generate()
    msg = b"certify me"
    sig = crypto.sign(kp.secret, msg)
    assert crypto.verify(kp.public, msg, sig)
    assert not crypto.verify(kp.public, b"other message", sig)
    assert not crypto.verify(crypto.KeyPair.generate().public, msg, sig)
    assert not crypto.verify(kp.public, msg, b"\x00" * 64)
    assert not crypto.verify(kp.public, msg, b"garbage")


def test_sign_is_deterministic():
    kp = crypto.KeyPair.generate()
    assert crypto.sign(kp.secret, b"m") == crypto.sign(kp.secret, b"m")


def test_malformed_keys_raise():
    with pytest.raises(crypto.MalformedKeyError):
        crypto.sign(b"tiny", b"m")
    with pytest.raises(crypto.MalformedKeyError):
        crypto.verify(b"tiny", b"m", b"s" * 64)


def test_group_sign_verifies_against_member_set():
    group = crypto.SigningGroup.create("platform-a", ["e1", "e2", "e3"])
    gsig = crypto.group_sign(group, "e2", b"quote body")
    assert crypto.group_verify(group.public_keys(), b"quote body", gsig) is True
    assert crypto.group_verify(group.public_keys(), b"tampered", gsig) is False


def test_group_signature_carries_no_member_identity():
    group = crypto.SigningGroup.create("platform-a", ["e1", "e2"])
    gsig = crypto.group_sign(group, "e1", b"m")
    assert set(vars(gsig)) == {"group_id", "signature"}


def test_group_verify_excluding_signer_key_fails():
    # verifier-side revocation: drop a member key and its signatures die
    group = crypto.SigningGroup.create("g", ["good", "leaked"])
    gsig = crypto.group_sign(group, "leaked", b"m")
    remaining = [group.members["good"].public]
    assert crypto.group_verify(remaining, b"m", gsig) is False
    assert crypto.group_verify(group.public_keys(), b"m", gsig) is True


def test_group_verify_skips_malformed_keys():
    group = crypto.SigningGroup.create("g", ["e1"])
    gsig = crypto.group_sign(group, "e1", b"m")
    assert crypto.group_verify([b"junk", group.members["e1"].public], b"m", gsig)


def test_unknown_member_rejected():
    group = crypto.SigningGroup.create("g", ["e1"])
    with pytest.raises(crypto.CryptoError):
        crypto.group_sign(group, "nope", b"m")


def test_security_version_number():
    assert crypto.SecurityVersionNumber(3) == 3
    assert crypto.SecurityVersionNumber(4) >= crypto.SecurityVersionNumber(2)
    with pytest.raises(ValueError):
        crypto.SecurityVersionNumber(-1)


def test_b64_helpers_roundtrip():
    blob = bytes(range(64))
    assert crypto.b64decode(crypto.b64(blob)) == blob
    assert crypto.b64url_decode(crypto.b64url_nopad(blob)) == blob
    assert "=" not in crypto.b64url_nopad(b"\xff\xfe")


def test_decimal_str_round_trips():
    for x in [0.1, 3.141592653589793, -2.5e-8, 1e300]:
        assert float(crypto.decimal_str(x)) == x
    assert crypto.decimal_str(7) == "7"
