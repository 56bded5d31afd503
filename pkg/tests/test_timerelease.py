"""Time-release construction: mirrored poset, TIKC schedule, tokens."""

from __future__ import annotations

import itertools

import pytest

from kasauth.crypto import Rng, StreamHmacAead, fresh_nonce
from kasauth.kas import issue_credential
from kasauth.poset import Label, build_intervals, build_powerset
from kasauth.timerelease import (
    TimeReleaseError,
    auto_edges,
    build_lower,
    build_time_release,
    mint_token,
    point_label,
    redeem_token,
    tts_broadcast,
    verify_redemption,
    window_label,
)
from kasauth.wire import ACCEPT, REJECT

SCHEME = StreamHmacAead()


def fig7_system(seed=1):
    upper = build_intervals(4)
    rng = Rng(seed)
    sys_ = build_time_release(upper, 4, auto_edges(upper, 4), rng, SCHEME)
    return sys_, rng


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------

class TestBuild:
    def test_mirrored_t4_shape(self):
        sys_, _ = fig7_system()
        assert len(sys_.combined) == 20
        assert len(sys_.temporal_edges) == 4
        assert len(sys_.full_pub) - len(sys_.released) == 4
        assert sys_.combined.validate().ok

    def test_lower_points_derive_containing_windows(self):
        lower = build_lower(4)
        for t in range(1, 5):
            for t0 in range(1, 5):
                for t1 in range(t0, 5):
                    assert lower.leq(window_label(t0, t1), point_label(t)) == (
                        t0 <= t <= t1)

    def test_generalized_upper(self):
        upper = build_powerset(2)
        edges = [(Label.subset([1]), point_label(1)),
                 (Label.subset([2]), point_label(2))]
        sys_ = build_time_release(upper, 2, edges, Rng(2), SCHEME)
        assert len(sys_.combined) == len(upper) + 3
        assert sys_.combined.validate().ok

    def test_empty_temporal_edges(self):
        sys_ = build_time_release(build_intervals(2), 2, [], Rng(2), SCHEME)
        assert sys_.temporal_edges == ()
        assert len(sys_.orphan_points) == 2

    def test_dangling_upper_endpoint(self):
        with pytest.raises(TimeReleaseError) as err:
            build_time_release(build_intervals(2), 2,
                               [(Label.interval(3, 3), point_label(1))],
                               Rng(2), SCHEME)
        assert err.value.reason == "dangling-edge"

    def test_dangling_lower_endpoint(self):
        with pytest.raises(TimeReleaseError) as err:
            build_time_release(build_intervals(2), 2,
                               [(Label.interval(1, 1), point_label(7))],
                               Rng(2), SCHEME)
        assert err.value.reason == "dangling-edge"

    def test_redundant_temporal_edge_rejected(self):
        upper = build_powerset(2)
        edges = [(Label.subset([1, 2]), point_label(1)),
                 (Label.subset([1]), point_label(1))]
        with pytest.raises(TimeReleaseError) as err:
            build_time_release(upper, 2, edges, Rng(2), SCHEME)
        assert err.value.reason == "invalid-structure"

    def test_orphans_flagged(self):
        upper = build_intervals(3)
        sys_ = build_time_release(
            upper, 3, [(Label.interval(1, 1), point_label(1))], Rng(2), SCHEME)
        assert sys_.orphan_points == (point_label(2), point_label(3))


# ---------------------------------------------------------------------------
# Broadcast schedule
# ---------------------------------------------------------------------------

class TestBroadcast:
    def test_single_edge_tikc(self):
        sys_, _ = fig7_system()
        tikc = tts_broadcast(sys_, 2)
        assert tikc.time == 2
        assert list(tikc.tokens) == [(Label.interval(2, 2), point_label(2))]
        assert (Label.interval(2, 2), point_label(2)) in sys_.released

    def test_tikc_size_follows_edge_multiplicity(self):
        upper = build_powerset(2)
        edges = [(Label.subset([1]), point_label(1)),
                 (Label.subset([2]), point_label(1)),
                 (Label.subset([1, 2]), point_label(2))]
        sys_ = build_time_release(upper, 2, edges, Rng(2), SCHEME)
        assert len(tts_broadcast(sys_, 1).tokens) == 2
        assert len(tts_broadcast(sys_, 2).tokens) == 1

    def test_duplicate_tick_rejected(self):
        sys_, _ = fig7_system()
        tts_broadcast(sys_, 3)
        with pytest.raises(TimeReleaseError) as err:
            tts_broadcast(sys_, 3)
        assert err.value.reason == "duplicate-broadcast"

    def test_out_of_range_tick(self):
        sys_, _ = fig7_system()
        with pytest.raises(TimeReleaseError):
            tts_broadcast(sys_, 9)


# ---------------------------------------------------------------------------
# Minting
# ---------------------------------------------------------------------------

class TestMint:
    def test_mint_protocol_14(self):
        sys_, rng = fig7_system()
        token = mint_token(sys_, "bob", 1, 4, rng, SCHEME, token_id="t")
        assert token.protocol == 14
        assert token.window == window_label(1, 4)
        assert sys_.repository == [token]
        assert sys_.ledger.get("t").end_tick == 4

    def test_mint_protocol_15(self):
        sys_, rng = fig7_system()
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME,
                           challenge_label=Label.interval(2, 3))
        assert token.protocol == 15

    def test_invalid_window(self):
        sys_, rng = fig7_system()
        with pytest.raises(TimeReleaseError):
            mint_token(sys_, "bob", 3, 2, rng, SCHEME)
        with pytest.raises(TimeReleaseError):
            mint_token(sys_, "bob", 1, 9, rng, SCHEME)

    def test_underivable_window_needs_provisioning(self):
        sys_, rng = fig7_system()
        cred = issue_credential(sys_.center, "bob", Label.interval(1, 4))
        with pytest.raises(TimeReleaseError) as err:
            mint_token(sys_, "bob", 1, 2, rng, SCHEME,
                       verifier_credential=cred, allow_provision=False)
        assert err.value.reason == "window-not-derivable"
        token = mint_token(sys_, "bob", 1, 2, rng, SCHEME,
                           verifier_credential=cred)
        assert token.window == window_label(1, 2)

    def test_derived_window_after_broadcast(self):
        sys_, rng = fig7_system()
        cred = issue_credential(sys_.center, "bob", Label.interval(1, 4))
        tts_broadcast(sys_, 1)
        token = mint_token(sys_, "bob", 1, 2, rng, SCHEME,
                           verifier_credential=cred, allow_provision=False)
        assert token.window == window_label(1, 2)


# ---------------------------------------------------------------------------
# Redemption
# ---------------------------------------------------------------------------

class TestRedemption:
    def test_honest_flow_accepts(self):
        sys_, rng = fig7_system()
        alice = issue_credential(sys_.center, "alice", Label.interval(1, 4))
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME, token_id="t")
        tts_broadcast(sys_, 2)
        result = redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        verdict = verify_redemption(sys_, "bob", result.fields, 2, SCHEME,
                                    result.protocol)
        assert verdict.state == ACCEPT

    def test_redeem_before_broadcast(self):
        sys_, rng = fig7_system()
        alice = issue_credential(sys_.center, "alice", Label.interval(1, 4))
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME)
        with pytest.raises(TimeReleaseError) as err:
            redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        assert err.value.reason == "no-released-tikc"

    def test_unreachable_broadcast_tick(self):
        sys_, rng = fig7_system()
        carol = issue_credential(sys_.center, "carol", Label.interval(3, 4))
        token = mint_token(sys_, "bob", 1, 2, rng, SCHEME)
        tts_broadcast(sys_, 1)
        tts_broadcast(sys_, 2)
        with pytest.raises(TimeReleaseError) as err:
            redeem_token(sys_, carol, token, rng.nonce(), SCHEME, rng)
        assert err.value.reason == "window-not-dominated"

    def test_embedded_label_must_be_dominated(self):
        sys_, rng = fig7_system()
        narrow = issue_credential(sys_.center, "dave", Label.interval(2, 2))
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME,
                           challenge_label=Label.interval(2, 3))
        tts_broadcast(sys_, 2)
        with pytest.raises(TimeReleaseError) as err:
            redeem_token(sys_, narrow, token, rng.nonce(), SCHEME, rng)
        assert err.value.reason == "label-not-dominated"

    def test_liveness_uses_in_window_temporal_edge(self):
        # Accept implies the derivation crossed a temporal edge whose tick
        # lies inside the window.
        sys_, rng = fig7_system()
        alice = issue_credential(sys_.center, "alice", Label.interval(1, 4))
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME)
        tts_broadcast(sys_, 1)  # out of window
        with pytest.raises(TimeReleaseError):
            redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        tts_broadcast(sys_, 3)
        result = redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        assert len(result.temporal_edges_used) == 1
        (edge,) = result.temporal_edges_used
        tick = edge[1].inner.interval_bounds[0]
        assert 2 <= tick <= 3

    def test_exhaustive_single_tikc_sufficiency(self):
        # For every credential and window over the mirrored T_4: redemption
        # fails before any in-window broadcast, succeeds after one dominated
        # in-window broadcast, and never succeeds otherwise.
        windows = [(t0, t1) for t0 in range(1, 5) for t1 in range(t0, 5)]
        labels = list(build_intervals(4).labels)
        for tick in range(1, 5):
            sys_, rng = fig7_system(seed=100 + tick)
            creds = {lab: issue_credential(sys_.center, lab.id, lab)
                     for lab in labels}
            tokens = {w: mint_token(sys_, "bob", w[0], w[1], rng, SCHEME)
                      for w in windows}
            # Before any broadcast nothing opens.
            for (t0, t1), token in sorted(tokens.items()):
                for lab in labels:
                    with pytest.raises(TimeReleaseError):
                        redeem_token(sys_, creds[lab], token, rng.nonce(),
                                     SCHEME, rng)
            tts_broadcast(sys_, tick)
            for (t0, t1), token in sorted(tokens.items()):
                for lab in labels:
                    lo, hi = lab.interval_bounds
                    expected = (t0 <= tick <= t1) and (lo <= tick <= hi)
                    try:
                        result = redeem_token(sys_, creds[lab], token,
                                              rng.nonce(), SCHEME, rng)
                        succeeded = True
                    except TimeReleaseError:
                        succeeded = False
                    assert succeeded == expected, (lab.id, (t0, t1), tick)
                    if succeeded:
                        verdict = verify_redemption(
                            sys_, "bob", result.fields, tick, SCHEME,
                            result.protocol)
                        assert verdict.state == ACCEPT


# ---------------------------------------------------------------------------
# Verification ledger
# ---------------------------------------------------------------------------

class TestVerify:
    def _redeemed(self, seed=3):
        sys_, rng = fig7_system(seed)
        alice = issue_credential(sys_.center, "alice", Label.interval(1, 4))
        token = mint_token(sys_, "bob", 2, 3, rng, SCHEME, token_id="tok")
        tts_broadcast(sys_, 2)
        result = redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        return sys_, rng, alice, token, result

    def test_replayed_claimant_nonce(self):
        sys_, rng, _, _, result = self._redeemed()
        assert verify_redemption(sys_, "bob", result.fields, 2, SCHEME,
                                 result.protocol).state == ACCEPT
        second = verify_redemption(sys_, "bob", result.fields, 2, SCHEME,
                                   result.protocol)
        assert (second.state, second.reason) == (REJECT, "replayed-claimant-nonce")

    def test_expired_window(self):
        sys_, rng, _, _, result = self._redeemed()
        verdict = verify_redemption(sys_, "bob", result.fields, 4, SCHEME,
                                    result.protocol)
        assert (verdict.state, verdict.reason) == (REJECT, "expired")

    def test_fresh_nonce_allows_second_redemption(self):
        sys_, rng, alice, token, result = self._redeemed()
        assert verify_redemption(sys_, "bob", result.fields, 2, SCHEME,
                                 result.protocol).state == ACCEPT
        again = redeem_token(sys_, alice, token, rng.nonce(), SCHEME, rng)
        assert verify_redemption(sys_, "bob", again.fields, 3, SCHEME,
                                 again.protocol).state == ACCEPT

    def test_unknown_token(self):
        sys_, rng, _, _, result = self._redeemed()
        verdict = verify_redemption(sys_, "carol", result.fields, 2, SCHEME,
                                    result.protocol)
        assert (verdict.state, verdict.reason) == (REJECT, "unknown-token")

    def test_tampered_response(self):
        sys_, rng, _, _, result = self._redeemed()
        token_field, ct_field = result.fields
        body = bytearray(ct_field.value.body)
        body[-1] ^= 1
        fields = (token_field, type(ct_field)(ct_field.kind,
                                              type(ct_field.value)(bytes(body))))
        verdict = verify_redemption(sys_, "bob", fields, 2, SCHEME,
                                    result.protocol)
        assert (verdict.state, verdict.reason) == (REJECT, "bad-ciphertext")

    def test_cross_protocol_context(self):
        # A protocol 14 response never verifies as protocol 15 and vice versa.
        sys_, rng, _, _, result = self._redeemed()
        verdict = verify_redemption(sys_, "bob", result.fields, 2, SCHEME, 15)
        assert verdict.state == REJECT
