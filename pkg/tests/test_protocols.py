"""Protocol state machines: honest completeness, rejections, properties."""

from __future__ import annotations

import pytest

from conftest import Env, t4_policy

from kasauth.crypto import CommittingAesGcm, StreamHmacAead, keyed_digest
from kasauth.poset import AuthenticationPolicy, Label, Poset, build_powerset, product, \
    build_intervals, parse_policy
from kasauth.protocols import (
    SessionConfig,
    SessionState,
    baseline_session,
    csl_unilateral_session,
    mutual_session,
    negotiation_session,
    protected_nonce_session,
    run_session,
    step,
    timestamp_session,
    ttp_ake_session,
    ttp_identity_session,
    vsl_unilateral_session,
)
from kasauth.wire import ACCEPT, CLAIMANT, REJECT, ProtocolMessage, f_text

IV = Label.interval


def accepted(transcript, actor):
    return transcript.verdict_of(actor).state == ACCEPT


def rejected(transcript, actor, reason=None):
    verdict = transcript.verdict_of(actor)
    return verdict.state == REJECT and (reason is None or verdict.reason == reason)


# ---------------------------------------------------------------------------
# Baselines 1-5
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("scheme", [StreamHmacAead(), CommittingAesGcm()],
                         ids=["hmac", "aes"])
@pytest.mark.parametrize("variant", [1, 2, 3, 4, 5])
def test_baseline_honest_accept(variant, scheme):
    env = Env(t4_policy(), scheme=scheme)
    alice, bob = env.party("alice"), env.party("bob")
    env.share_pair_key(alice, bob)
    transcript = baseline_session(variant, alice, bob)
    assert accepted(transcript, "bob")
    if variant in (2, 3, 5):
        assert accepted(transcript, "alice")


def test_baseline_requires_shared_key():
    env = Env(t4_policy())
    transcript = baseline_session(1, env.party("alice"), env.party("bob"))
    assert rejected(transcript, "alice", "no-shared-key")


def test_akep_session_key_shared():
    env = Env(t4_policy())
    alice, bob = env.party("alice"), env.party("bob")
    env.share_pair_key(alice, bob)
    transcript = baseline_session(3, alice, bob)
    assert transcript.session_keys["alice"] == transcript.session_keys["bob"]
    assert transcript.session_keys["alice"].origin == "session"


def test_akep_kas_sourced_key_must_be_leaf():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    env.share_pair_key(alice, bob)
    bad = baseline_session(3, alice, bob, session_key_label=IV(2, 3))
    assert rejected(bad, "bob", "non-leaf-session-key")
    good = baseline_session(3, alice, bob, session_key_label=IV(2, 2))
    assert accepted(good, "bob")
    assert good.session_keys["alice"] == good.session_keys["bob"]


def test_timestamp_baseline_window():
    env = Env(t4_policy(), window=2)
    bob = env.party("bob")
    for skew, expected in [(0, ACCEPT), (2, ACCEPT), (-2, ACCEPT)]:
        sender = env.party(f"alice{skew}", skew=skew)
        env.share_pair_key(sender, bob)
        transcript = baseline_session(4, sender, bob)
        assert transcript.verdict_of("bob").state == expected
    early = env.party("early", skew=-3)
    env.share_pair_key(early, bob)
    assert rejected(baseline_session(4, early, bob), "bob", "stale-timestamp")
    late = env.party("late", skew=3)
    env.share_pair_key(late, bob)
    assert rejected(baseline_session(4, late, bob), "bob", "future-timestamp")


def test_replayed_baseline_message_hits_uniqueness_log():
    env = Env(t4_policy())
    alice, bob = env.party("alice"), env.party("bob")
    env.share_pair_key(alice, bob)
    first = baseline_session(4, alice, bob, session="s1")
    replayed = first.messages[0]
    state = SessionState(SessionConfig(protocol=4, session="s2", claimant="alice",
                                       verifier="bob"), role="verifier")
    step(state, bob, ProtocolMessage(4, 1, "alice", "bob", "s2", replayed.fields))
    assert state.verdict.reason == "replayed-timestamp"


# ---------------------------------------------------------------------------
# Protocols 6-7
# ---------------------------------------------------------------------------

def test_p6_honest_and_derivability_table():
    policy = t4_policy(alice="[1,4]", bob="[1,4]", dave="[1,2]")
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    transcript = csl_unilateral_session(alice, bob, IV(2, 3))
    assert accepted(transcript, "bob")
    assert transcript.clearances["bob"] == IV(2, 3)

    dave = env.party("dave", user="dave")
    failed = csl_unilateral_session(dave, bob, IV(2, 3), session="s2")
    assert rejected(failed, "dave", "cannot-derive")
    assert rejected(failed, "bob", "incomplete")


def test_p6_verifier_under_cleared_aborts_before_challenge():
    policy = t4_policy(alice="[1,4]", dave="[1,2]")
    env = Env(policy)
    alice = env.party("alice", user="alice")
    dave = env.party("dave", user="dave")
    transcript = csl_unilateral_session(alice, dave, IV(1, 3))
    assert rejected(transcript, "dave", "verifier-under-cleared")
    assert len(transcript.messages) == 1  # label only, no nonce issued


def test_p6_service_policy_checked():
    poset = build_intervals(4)
    policy = AuthenticationPolicy(
        poset=poset,
        users={"alice": IV(1, 4), "bob": IV(1, 4)},
        services={"db": poset.get("[2,3]")})
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    below = csl_unilateral_session(alice, bob, IV(2, 2), service="db")
    assert rejected(below, "bob", "policy-unsatisfied")
    at_level = csl_unilateral_session(alice, bob, IV(2, 3), service="db",
                                      session="s2")
    assert accepted(at_level, "bob")


def test_p6_derived_only_blocks_issued_labels():
    policy = parse_policy(
        "poset intervals 4\nuser alice [1,4]\nuser bob [1,4]\noption derived_only\n")
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    transcript = csl_unilateral_session(alice, bob, IV(1, 4))
    assert rejected(transcript, "bob", "policy-unsatisfied")
    fine = csl_unilateral_session(alice, bob, IV(1, 3), session="s2")
    assert accepted(fine, "bob")


def test_p6_reckless_claimant_never_accepted():
    policy = t4_policy(dave="[1,2]", bob="[1,4]")
    env = Env(policy)
    dave = env.party("dave", user="dave")
    bob = env.party("bob", user="bob")
    transcript = csl_unilateral_session(dave, bob, IV(2, 3), reckless=True)
    assert rejected(transcript, "bob", "bad-response")


def test_p7_vsl_from_service_map():
    poset = build_intervals(4)
    policy = AuthenticationPolicy(
        poset=poset,
        users={"alice": IV(1, 4), "bob": IV(1, 4)},
        services={"db": poset.get("[2,3]")})
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    transcript = vsl_unilateral_session(alice, bob, service="db")
    assert accepted(transcript, "bob")
    assert transcript.clearances["alice"] == IV(2, 3)


def test_p7_product_poset_time_challenge():
    # Clearance and era proved together over T_4 x T_4.
    t4 = build_intervals(4)
    prod = product(t4, t4)
    policy = AuthenticationPolicy(
        poset=prod,
        users={"alice": prod.get("([1,4],[1,4])"), "late": prod.get("([1,4],[3,4])"),
               "bob": prod.get("([1,4],[1,4])")},
        services={})
    env = Env(policy)
    bob = env.party("bob", user="bob")
    challenge = prod.get("([2,3],[2,2])")
    ok = vsl_unilateral_session(env.party("alice", user="alice"), bob, v=challenge)
    assert accepted(ok, "bob")
    bad = vsl_unilateral_session(env.party("late", user="late"), bob, v=challenge,
                                 session="s2")
    assert rejected(bad, "late", "cannot-derive")
    assert rejected(bad, "bob", "incomplete")


# ---------------------------------------------------------------------------
# Protocol 8
# ---------------------------------------------------------------------------

def test_p8_mutual_equal_labels():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = mutual_session(env.party("alice", user="alice"),
                                env.party("bob", user="bob"),
                                IV(2, 3), IV(2, 3))
    assert accepted(transcript, "alice") and accepted(transcript, "bob")


def test_p8_asymmetric_labels():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = mutual_session(env.party("alice", user="alice"),
                                env.party("bob", user="bob"),
                                IV(2, 2), IV(1, 3))
    assert accepted(transcript, "alice") and accepted(transcript, "bob")
    assert transcript.clearances["bob"] == IV(1, 3)


def test_p8_under_cleared_verifier_never_accepts():
    policy = t4_policy(alice="[1,4]", dave="[1,2]")
    env = Env(policy)
    transcript = mutual_session(env.party("alice", user="alice"),
                                env.party("dave", user="dave"),
                                IV(1, 3), IV(1, 2))
    assert rejected(transcript, "dave", "cannot-derive")
    assert rejected(transcript, "alice", "incomplete")


# ---------------------------------------------------------------------------
# Protocols 9-10
# ---------------------------------------------------------------------------

def test_p9_nonce_travels_encrypted():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = protected_nonce_session(env.party("alice", user="alice"),
                                         env.party("bob", user="bob"), IV(2, 3))
    assert accepted(transcript, "bob")
    challenge = transcript.messages[1]
    assert [f.kind for f in challenge.fields] == ["ct"]


def test_p10_session_key_agreement():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = protected_nonce_session(env.party("alice", user="alice"),
                                         env.party("bob", user="bob"),
                                         IV(2, 3), with_session_key=True)
    assert accepted(transcript, "bob")
    assert transcript.session_keys["alice"] == transcript.session_keys["bob"]
    # The key is not derivable from public transcript material alone: it
    # needs the challenge plaintext, which never appears on the wire.
    bodies = b"".join(m.payload_bytes() for m in transcript.messages)
    assert transcript.session_keys["alice"].data not in bodies


def test_p10_third_party_without_key_cannot_answer():
    policy = t4_policy(alice="[1,4]", bob="[1,4]", dave="[1,2]")
    env = Env(policy)
    transcript = protected_nonce_session(env.party("dave", user="dave"),
                                         env.party("bob", user="bob"),
                                         IV(2, 3), reckless=True)
    assert rejected(transcript, "bob", "bad-response")


# ---------------------------------------------------------------------------
# Protocol 11
# ---------------------------------------------------------------------------

def chain_policy():
    x, y, z = Label.point("x"), Label.point("y"), Label.point("z")
    poset = Poset([x, y, z], [(z, y), (y, x)])
    return AuthenticationPolicy(
        poset=poset,
        users={"amy": y, "victor": x},
        services={"gate": x, "gate2": y})


def test_p11_footnote_chain_negotiates_down():
    # Request z with clearance y against a verifier holding x: settle on x,
    # and record clearance x, never z.
    policy = chain_policy()
    env = Env(policy)
    transcript = negotiation_session(env.party("amy", user="amy"),
                                     env.party("victor", user="victor"),
                                     Label.point("z"))
    assert accepted(transcript, "victor")
    assert transcript.clearances["victor"] == Label.point("x")
    assert transcript.clearances["amy"] == Label.point("x")


def test_p11_no_negotiation_when_verifiable():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = negotiation_session(env.party("alice", user="alice"),
                                     env.party("bob", user="bob"), IV(1, 3))
    assert accepted(transcript, "bob")
    assert transcript.clearances["bob"] == IV(1, 3)


def test_p11_service_minimum_terminates():
    # 2^[2]: request {1} against clearance {2}; only common label is {};
    # a service minimum of {1} then kills the run.
    poset = build_powerset(2)
    policy = AuthenticationPolicy(
        poset=poset,
        users={"a": poset.get("{1}"), "b": poset.get("{2}")},
        services={"svc": poset.get("{1}")})
    env = Env(policy)
    transcript = negotiation_session(env.party("a", user="a"),
                                     env.party("b", user="b"),
                                     poset.get("{1}"), service="svc")
    assert rejected(transcript, "a", "below-service-minimum")
    assert rejected(transcript, "b", "incomplete")


def test_p11_no_common_descendant_terminates():
    a, b = Label.point("a"), Label.point("b")
    poset = Poset([a, b], [])
    policy = AuthenticationPolicy(poset=poset, users={"u": a, "v": b}, services={})
    env = Env(policy)
    transcript = negotiation_session(env.party("u", user="u"),
                                     env.party("v", user="v"), a)
    assert rejected(transcript, "u", "no-common-descendant")


def test_p11_negotiated_matches_brute_force_on_t4():
    t4 = build_intervals(4)
    users = {"top": t4.get("[1,4]")}
    for label in t4:
        users[f"b_{label.id}"] = label
    policy = AuthenticationPolicy(poset=t4, users=users, services={})
    for v in t4:
        for verifier_label in t4:
            env = Env(policy, seed=11)
            claimant = env.party("top", user="top")
            verifier = env.party("peer", user=f"b_{verifier_label.id}")
            transcript = negotiation_session(claimant, verifier, v)
            # Oracle: lexicographically least maximal common lower bound.
            common = sorted(t4.down_set(v) & t4.down_set(verifier_label))
            maxima = [z for z in common
                      if not any(z != up and t4.leq(z, up) for up in common)]
            if not maxima:
                assert rejected(transcript, "top", "no-common-descendant")
            else:
                expected = min(maxima)
                assert accepted(transcript, "peer")
                assert transcript.clearances["peer"] == expected
                assert transcript.clearances["top"] == expected


# ---------------------------------------------------------------------------
# Protocols 12-13
# ---------------------------------------------------------------------------

def test_p12_timestamp_window():
    policy = t4_policy(alice="[1,4]", bob="[1,4]", hasty="[1,4]")
    env = Env(policy, window=2)
    bob = env.party("bob", user="bob")
    ok = timestamp_session(env.party("alice", user="alice"), bob, IV(2, 2))
    assert accepted(ok, "bob")
    stale = timestamp_session(env.party("hasty", user="hasty", skew=-3), bob,
                              IV(2, 2), session="s2")
    assert rejected(stale, "bob", "stale-timestamp")


def test_p12_sequence_mode_strictly_increasing():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    first = timestamp_session(alice, bob, IV(2, 2), freshness="sequence")
    assert accepted(first, "bob")
    second = timestamp_session(alice, bob, IV(2, 2), freshness="sequence",
                               session="s2")
    assert accepted(second, "bob")
    # Replaying the first message now fails the counter check.
    state = SessionState(SessionConfig(protocol=12, session="s3", claimant="alice",
                                       verifier="bob", v=IV(2, 2),
                                       freshness="sequence"), role="verifier")
    replay = first.messages[0]
    step(state, bob, ProtocolMessage(12, 1, "alice", "bob", "s3", replay.fields))
    assert state.verdict.reason == "sequence-replay"


def test_p13_mutual_timestamps():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = timestamp_session(env.party("alice", user="alice"),
                                   env.party("bob", user="bob"),
                                   IV(2, 3), w=IV(1, 3), mutual=True)
    assert accepted(transcript, "alice") and accepted(transcript, "bob")
    assert len(transcript.messages) == 2


# ---------------------------------------------------------------------------
# Protocols 16-17
# ---------------------------------------------------------------------------

def ttp_env():
    policy = t4_policy(alice="[1,4]", bob="[1,4]", eve="[1,4]")
    env = Env(policy)
    alice = env.party("alice", user="alice", with_ttp_key=True)
    bob = env.party("bob", user="bob", with_ttp_key=True)
    eve = env.party("eve", user="eve", with_ttp_key=True)
    trent = env.ttp_party()
    return env, alice, bob, eve, trent


def test_p16_honest_identity_binding():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_identity_session(alice, bob, trent, IV(2, 4))
    assert accepted(transcript, "bob")
    digest_msg = transcript.messages[2]  # TTP -> B package
    assert [f.kind for f in digest_msg.fields] == ["ct"]


def test_p16_same_group_impersonation_rejected():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_identity_session(eve, bob, trent, IV(2, 4),
                                      claim_as="alice")
    assert rejected(transcript, "bob", "digest-mismatch")


def test_p16_ttp_digest_matches_claimant_side():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_identity_session(alice, bob, trent, IV(2, 4))
    nonce = next(f.value for f in transcript.messages[3].fields
                 if f.kind == "nonce")
    assert keyed_digest(alice.ttp_key, nonce.data) == \
        keyed_digest(trent.ttp_user_keys["alice"], nonce.data)


def test_p16_unknown_claimed_identity_stalls():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_identity_session(eve, bob, trent, IV(2, 4),
                                      claim_as="nobody")
    assert rejected(transcript, "trent", "unknown-user")
    assert rejected(transcript, "bob", "incomplete")


def test_p17_key_confirmation():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_ake_session(alice, bob, trent, IV(2, 4))
    assert accepted(transcript, "bob") and accepted(transcript, "alice")
    assert transcript.session_keys["alice"] == transcript.session_keys["bob"]


def test_p17_same_group_adversary_cannot_confirm():
    env, alice, bob, eve, trent = ttp_env()
    transcript = ttp_ake_session(eve, bob, trent, IV(2, 4), claim_as="alice")
    assert rejected(transcript, "bob", "bad-ciphertext")


def test_p16_without_ttp_rejects():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    transcript = run_session(16, env.party("alice", user="alice"),
                             env.party("bob", user="bob"), v=IV(2, 4))
    assert rejected(transcript, "bob", "ttp-unavailable")


# ---------------------------------------------------------------------------
# Cross-cutting properties
# ---------------------------------------------------------------------------

def test_antichain_reproduces_shared_key_behavior():
    # Degenerate KAS: an unordered label per group makes protocol 6 behave
    # like the baseline: holders accept, outsiders cannot respond.
    ab, cd = Label.point("ab"), Label.point("cd")
    poset = Poset([ab, cd], [])
    policy = AuthenticationPolicy(
        poset=poset, users={"alice": ab, "bob": ab, "carol": cd}, services={})
    env = Env(policy)
    alice = env.party("alice", user="alice")
    bob = env.party("bob", user="bob")
    carol = env.party("carol", user="carol")
    honest = csl_unilateral_session(alice, bob, ab)
    assert accepted(honest, "bob")
    outsider = csl_unilateral_session(carol, bob, ab, session="s2")
    assert rejected(outsider, "carol", "cannot-derive")
    assert rejected(outsider, "bob", "incomplete")
    mismatch = csl_unilateral_session(carol, bob, cd, session="s3")
    assert rejected(mismatch, "bob", "verifier-under-cleared")


@pytest.mark.parametrize("protocol,kwargs", [
    (6, {"v": IV(2, 4)}),
    (7, {"v": IV(2, 4)}),
    (9, {"v": IV(2, 4)}),
    (12, {"v": IV(2, 4)}),
])
def test_claimant_anonymity_within_equivalence_class(protocol, kwargs):
    # Same label, same seed: byte-identical payload streams, and no field
    # names the claimant.
    streams = []
    for claimant_name in ("carol", "carla"):
        policy = t4_policy(**{claimant_name: "[2,4]", "bob": "[1,4]"})
        env = Env(policy, seed=77)
        claimant = env.party(claimant_name, user=claimant_name)
        bob = env.party("bob", user="bob")
        transcript = run_session(protocol, claimant, bob, **kwargs)
        assert accepted(transcript, "bob")
        streams.append(transcript.payload_stream())
        for message in transcript.messages:
            for field in message.fields:
                if field.kind == "id":
                    assert field.value != claimant_name
    assert streams[0] == streams[1]


def test_unexpected_message_rejected():
    policy = t4_policy(alice="[1,4]", bob="[1,4]")
    env = Env(policy)
    bob = env.party("bob", user="bob")
    state = SessionState(SessionConfig(protocol=6, session="s", claimant="alice",
                                       verifier="bob", v=IV(2, 3)), role="verifier")
    wrong = ProtocolMessage(6, 3, "alice", "bob", "s", (f_text("Hi"),))
    step(state, bob, wrong)
    assert state.verdict.reason == "unexpected-message"
