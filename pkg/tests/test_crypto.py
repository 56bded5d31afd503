"""Symmetric primitives and the canonical wire encoding."""

from __future__ import annotations

import pytest

from kasauth.crypto import (
    AuthenticationFailure,
    Ciphertext,
    CommittingAesGcm,
    CryptoError,
    Nonce,
    NonceLedger,
    NonceReuseError,
    Rng,
    StreamHmacAead,
    SymmetricKey,
    Timestamp,
    derive_session_key,
    fresh_nonce,
    keyed_digest,
    make_scheme,
)
from kasauth.kas import kas_setup
from kasauth.poset import Label, build_intervals
from kasauth import wire
from kasauth.wire import (
    ProtocolMessage,
    decode_fields,
    encode_fields,
    f_ct,
    f_digest,
    f_id,
    f_key,
    f_label,
    f_nonce,
    f_seq,
    f_text,
    f_tick,
    field_values,
    message_context,
)

SCHEMES = [StreamHmacAead(), CommittingAesGcm()]


def scheme_id(s):
    return s.name


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

class TestValues:
    def test_key_length_enforced(self):
        with pytest.raises(CryptoError):
            SymmetricKey(b"short")

    def test_key_equality_ignores_origin(self):
        raw = bytes(32)
        assert SymmetricKey(raw, "kas-node") == SymmetricKey(raw, "session")
        assert SymmetricKey(raw) != SymmetricKey(b"\x01" * 32)

    def test_nonce_length_enforced(self):
        with pytest.raises(CryptoError):
            Nonce(b"short")

    def test_timestamp_non_negative(self):
        with pytest.raises(CryptoError):
            Timestamp(-1)

    def test_rng_reproducible(self):
        assert Rng(5).bytes(16) == Rng(5).bytes(16)
        assert Rng(5).bytes(16) != Rng(6).bytes(16)

    def test_fresh_nonces_distinct_and_ledgered(self):
        rng = Rng(0)
        ledger = NonceLedger()
        a = fresh_nonce(rng, ledger)
        b = fresh_nonce(rng, ledger)
        assert a.data != b.data
        assert a in ledger and b in ledger

    def test_ledger_rejects_reuse(self):
        ledger = NonceLedger()
        nonce = Rng(1).nonce()
        ledger.record(nonce)
        with pytest.raises(NonceReuseError):
            ledger.record(nonce)


# ---------------------------------------------------------------------------
# Authenticated encryption (both instantiations)
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", SCHEMES, ids=scheme_id)
class TestAead:
    def test_round_trip(self, scheme):
        rng = Rng(2)
        key = rng.key()
        ct = scheme.encrypt(key, b"payload", b"ctx", rng)
        assert scheme.decrypt(key, ct, b"ctx") == b"payload"

    def test_context_binding(self, scheme):
        rng = Rng(2)
        key = rng.key()
        ct = scheme.encrypt(key, b"m", b"prot6/msg3", rng)
        with pytest.raises(AuthenticationFailure):
            scheme.decrypt(key, ct, b"prot8/msg3")

    def test_randomized(self, scheme):
        rng = Rng(2)
        key = rng.key()
        first = scheme.encrypt(key, b"m", b"ctx", rng)
        second = scheme.encrypt(key, b"m", b"ctx", rng)
        assert first.body != second.body

    def test_bit_flip_detected(self, scheme):
        rng = Rng(2)
        key = rng.key()
        ct = scheme.encrypt(key, b"m", b"ctx", rng)
        for position in (0, len(ct.body) // 2, len(ct.body) - 1):
            damaged = bytearray(ct.body)
            damaged[position] ^= 0x01
            with pytest.raises(AuthenticationFailure):
                scheme.decrypt(key, Ciphertext(bytes(damaged)), b"ctx")

    def test_wrong_key_detected(self, scheme):
        rng = Rng(2)
        ct = scheme.encrypt(rng.key(), b"m", b"ctx", rng)
        with pytest.raises(AuthenticationFailure):
            scheme.decrypt(rng.key(), ct, b"ctx")

    def test_truncated_body_detected(self, scheme):
        with pytest.raises(AuthenticationFailure):
            scheme.decrypt(Rng(2).key(), Ciphertext(b"tiny"), b"ctx")

    def test_sibling_kas_keys_rejected(self, scheme):
        # Key-commitment across every node key of a small KAS.
        rng = Rng(3)
        poset = build_intervals(4)
        center, _ = kas_setup(poset, rng, scheme)
        keys = [center.node_keys[label] for label in poset.labels]
        ct = scheme.encrypt(keys[0], b"challenge", b"ctx", rng)
        assert scheme.decrypt(keys[0], ct, b"ctx") == b"challenge"
        for other in keys[1:]:
            with pytest.raises(AuthenticationFailure):
                scheme.decrypt(other, ct, b"ctx")


def test_make_scheme():
    assert make_scheme("hmac").name == "hmac"
    assert make_scheme("aes").name == "aes"
    with pytest.raises(CryptoError):
        make_scheme("rot13")


# ---------------------------------------------------------------------------
# Digest and session-key derivation
# ---------------------------------------------------------------------------

class TestDerivations:
    def test_keyed_digest_deterministic(self):
        key = Rng(4).key()
        assert keyed_digest(key, b"x") == keyed_digest(key, b"x")
        assert keyed_digest(key, b"x") != keyed_digest(key, b"y")
        assert len(keyed_digest(key, b"x")) == 32

    def test_digest_depends_on_key(self):
        rng = Rng(4)
        assert keyed_digest(rng.key(), b"x") != keyed_digest(rng.key(), b"x")

    def test_session_key_deterministic(self):
        key = derive_session_key(b"secret", b"ctx")
        assert key == derive_session_key(b"secret", b"ctx")
        assert key.origin == "session"

    def test_session_key_context_separation(self):
        assert derive_session_key(b"s", b"a") != derive_session_key(b"s", b"b")
        assert derive_session_key(b"s", b"a") != derive_session_key(b"t", b"a")

    def test_session_key_rejects_empty_secret(self):
        with pytest.raises(CryptoError):
            derive_session_key(b"", b"ctx")


# ---------------------------------------------------------------------------
# Wire encoding
# ---------------------------------------------------------------------------

class TestWire:
    def test_round_trip_all_kinds(self):
        rng = Rng(6)
        fields = (
            f_id("bob"), f_text("Hi"), f_label(Label.interval(2, 4)),
            f_nonce(rng.nonce()), f_tick(7), f_seq(9), f_key(rng.key()),
            f_digest(bytes(32)), f_ct(Ciphertext(b"\x00\x01\x02")),
        )
        decoded = decode_fields(encode_fields(fields))
        assert [f.kind for f in decoded] == [f.kind for f in fields]
        assert decoded[0].value == "bob"
        assert decoded[2].value == Label.interval(2, 4)
        assert decoded[3].value.data == fields[3].value.data
        assert decoded[4].value == 7 and decoded[5].value == 9
        assert decoded[8].value.body == b"\x00\x01\x02"

    def test_field_order_is_significant(self):
        a = encode_fields([f_id("x"), f_text("y")])
        b = encode_fields([f_text("y"), f_id("x")])
        assert a != b

    def test_truncation_rejected(self):
        data = encode_fields([f_id("bob")])
        with pytest.raises(wire.WireError):
            decode_fields(data[:-1])

    def test_unknown_tag_rejected(self):
        with pytest.raises(wire.WireError):
            decode_fields(b"\xff\x00\x00\x00\x00")

    def test_field_values_shape_check(self):
        fields = (f_id("bob"), f_tick(3))
        assert field_values(fields, wire.ID, wire.TICK) == ("bob", 3)
        assert field_values(fields, wire.TICK, wire.ID) is None
        assert field_values(fields, wire.ID) is None

    def test_message_context_distinguishes_positions(self):
        contexts = {
            message_context(p, i, s, r)
            for p in (6, 8) for i in (2, 3)
            for s, r in (("claimant", "verifier"), ("verifier", "claimant"))
        }
        assert len(contexts) == 8

    def test_payload_stream_stable(self):
        message = ProtocolMessage(
            protocol=6, index=1, sender="a", receiver="b", session="s1",
            fields=(f_label(Label.interval(1, 2)),))
        assert message.payload_bytes() == message.payload_bytes()
        assert "label=[1,2]" in message.summary()
