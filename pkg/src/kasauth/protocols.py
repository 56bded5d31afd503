"""State machines for the authentication protocol family.

Protocols 1-5 are the shared-key baselines (nonce unilateral, nonce mutual,
AKEP-style key transport, timestamp unilateral, timestamp mutual). 6-11 are
the KAS challenge-response variants (claimant- and verifier-selects-label,
mutual, protected nonce with and without a derived session key, label
negotiation). 12-13 add time-variant parameters (timestamps or sequence
numbers) over a KAS. 16-17 bind individual identity through a TTP digest.
Protocols 14-15 live in the timerelease module and are driven by scenario
directives rather than step machines.

Each (protocol, role) pair has one step function consuming
(state, context, inbound message) and returning the optional outbound
message; functions are pure given those arguments plus the context's
randomness handle, which keeps replay deterministic. Every ciphertext binds
a context of (protocol id, message index, sender role, receiver role), so
reflected or cross-spliced messages fail authentication rather than parsing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .crypto import (
    AeadScheme,
    AuthenticationFailure,
    Nonce,
    NonceLedger,
    Rng,
    SymmetricKey,
    derive_session_key,
    fresh_nonce,
    keyed_digest,
)
from .kas import DerivationError, KasPublicInfo, UserCredential, derive_key
from .poset import AuthenticationPolicy, Label, PosetError
from . import wire
from .wire import (
    CLAIMANT,
    TTP,
    VERIFIER,
    Field,
    ProtocolMessage,
    Transcript,
    Verdict,
    decode_fields,
    encode_fields,
    f_ct,
    f_id,
    f_label,
    f_nonce,
    f_seq,
    f_text,
    f_tick,
    field_values,
    message_context,
)

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 2

# (protocol, role) pairs whose accept verdict is an authentication decision
# about the peer. Claimant accepts elsewhere only mean "completed my part".
AUTH_DECISIONS = frozenset(
    {(p, VERIFIER) for p in range(1, 18)}
    | {(2, CLAIMANT), (3, CLAIMANT), (5, CLAIMANT), (8, CLAIMANT), (13, CLAIMANT)}
)


# ---------------------------------------------------------------------------
# Session data
# ---------------------------------------------------------------------------

@dataclass
class SessionConfig:
    protocol: int
    session: str
    claimant: str
    verifier: str
    ttp: Optional[str] = None
    v: Optional[Label] = None
    w: Optional[Label] = None
    service: Optional[str] = None
    freshness: str = "timestamp"  # protocols 12/13: timestamp | sequence
    session_key_label: Optional[Label] = None  # protocol 3: KAS-sourced key
    claim_as: Optional[str] = None  # protocols 16/17: adversarial claimed id
    reckless: bool = False  # respond with own key when derivation fails


@dataclass
class SessionState:
    """One party's view of one protocol run."""

    config: SessionConfig
    role: str
    phase: int = 0
    verdict: Verdict = field(default_factory=Verdict)
    own_nonce: Optional[Nonce] = None
    peer_nonce: Optional[Nonce] = None
    challenge_body: bytes = b""  # protocol 10: bytes of the encrypted challenge
    expected_digest: Optional[bytes] = None
    claimed_id: Optional[str] = None
    session_key: Optional[SymmetricKey] = None
    effective_label: Optional[Label] = None

    @property
    def protocol(self) -> int:
        return self.config.protocol

    def peer_of(self, ctx: "PartyContext") -> str:
        if self.role == CLAIMANT:
            return self.config.verifier
        return self.config.claimant


@dataclass
class PartyContext:
    """Everything one actor brings to its sessions.

    The randomness handle, nonce ledger, clocks, sequence counters, and the
    timestamp replay cache are per-actor state shared across sessions.
    """

    actor_id: str
    scheme: AeadScheme
    rng: Rng
    clock: Callable[[], int] = lambda: 0
    nonce_ledger: NonceLedger = field(default_factory=NonceLedger)
    policy: Optional[AuthenticationPolicy] = None
    pub: Optional[KasPublicInfo] = None
    credential: Optional[UserCredential] = None
    pair_keys: dict[str, SymmetricKey] = field(default_factory=dict)
    ttp_key: Optional[SymmetricKey] = None  # user side: key shared with the TTP
    ttp_user_keys: dict[str, SymmetricKey] = field(default_factory=dict)  # TTP side
    window: int = DEFAULT_WINDOW
    seq_send: dict[str, int] = field(default_factory=dict)
    seq_seen: dict[str, int] = field(default_factory=dict)
    ts_seen: set[bytes] = field(default_factory=set)

    def fresh_nonce(self) -> Nonce:
        return fresh_nonce(self.rng, self.nonce_ledger)


# ---------------------------------------------------------------------------
# Step helpers
# ---------------------------------------------------------------------------

def _out(ctx: PartyContext, state: SessionState, index: int, receiver: str,
         fields: list[Field]) -> ProtocolMessage:
    return ProtocolMessage(
        protocol=state.protocol, index=index, sender=ctx.actor_id,
        receiver=receiver, session=state.config.session, fields=tuple(fields))


def _reject(state: SessionState, reason: str) -> None:
    if state.verdict.pending:
        state.verdict = Verdict.reject(reason)
    return None


def _accept(state: SessionState) -> None:
    if state.verdict.pending:
        state.verdict = Verdict.accept()


def _encrypt(ctx: PartyContext, state: SessionState, key: SymmetricKey, index: int,
             sender_role: str, receiver_role: str, fields: list[Field]):
    context = message_context(state.protocol, index, sender_role, receiver_role)
    return f_ct(ctx.scheme.encrypt(key, encode_fields(fields), context, ctx.rng))


def _open(ctx: PartyContext, state: SessionState, key: SymmetricKey, ct, index: int,
          sender_role: str, receiver_role: str) -> Optional[tuple[Field, ...]]:
    context = message_context(state.protocol, index, sender_role, receiver_role)
    try:
        plain = ctx.scheme.decrypt(key, ct, context)
        return decode_fields(plain)
    except (AuthenticationFailure, wire.WireError):
        return None


def _pair_key(ctx: PartyContext, state: SessionState) -> Optional[SymmetricKey]:
    return ctx.pair_keys.get(state.peer_of(ctx))


def _derive(ctx: PartyContext, label: Label) -> Optional[SymmetricKey]:
    if ctx.credential is None or ctx.pub is None or ctx.policy is None:
        return None
    try:
        return derive_key(ctx.pub, ctx.policy.poset, ctx.credential.label,
                          ctx.credential.key, label, ctx.scheme)
    except DerivationError:
        return None


def _claimant_key(ctx: PartyContext, state: SessionState, label: Label) -> Optional[SymmetricKey]:
    """The claimant's key for a challenge label.

    Honest claimants abort when they cannot derive it; a reckless claimant
    (adversary model: legal derivations only) falls back to its own issued
    key, which the verifier must reject.
    """
    if ctx.policy is not None and "derived_only" in ctx.policy.options \
            and ctx.credential is not None and label == ctx.credential.label \
            and not state.config.reckless:
        return _reject(state, "policy-unsatisfied")
    key = _derive(ctx, label)
    if key is not None:
        return key
    if state.config.reckless and ctx.credential is not None:
        return ctx.credential.key
    return _reject(state, "cannot-derive")


def _verifier_admissible(ctx: PartyContext, state: SessionState, v: Label) -> Optional[str]:
    """Label admissibility on the verifier side; None when acceptable."""
    poset = ctx.policy.poset
    if v not in poset:
        return "policy-unsatisfied"
    if state.config.service is not None:
        try:
            required = ctx.policy.label_of_service(state.config.service)
        except PosetError:
            return "policy-unsatisfied"
        if not poset.leq(required, v):
            return "policy-unsatisfied"
    if ctx.credential is None or not poset.leq(v, ctx.credential.label):
        return "verifier-under-cleared"
    if "derived_only" in ctx.policy.options and v == ctx.credential.label:
        return "policy-unsatisfied"
    return None


def _check_timestamp(ctx: PartyContext, tick: int) -> Optional[str]:
    now = ctx.clock()
    if tick < now - ctx.window:
        return "stale-timestamp"
    if tick > now + ctx.window:
        return "future-timestamp"
    return None


def _check_body_replay(ctx: PartyContext, body: bytes) -> bool:
    """Uniqueness log for one-pass timestamp messages (ISO-style)."""
    return body in ctx.ts_seen


def _next_seq(ctx: PartyContext, peer: str) -> int:
    value = ctx.seq_send.get(peer, 0) + 1
    ctx.seq_send[peer] = value
    return value


def _check_seq(ctx: PartyContext, sender: str, value: int) -> Optional[str]:
    if value <= ctx.seq_seen.get(sender, 0):
        return "sequence-replay"
    ctx.seq_seen[sender] = value
    return None


def _expect(state: SessionState, inbound: Optional[ProtocolMessage],
            index: int) -> Optional[ProtocolMessage]:
    """Phase guard: the message must sit at this protocol position."""
    if inbound is None or inbound.protocol != state.protocol or inbound.index != index:
        _reject(state, "unexpected-message")
        return None
    return inbound


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

Handler = Callable[[SessionState, PartyContext, Optional[ProtocolMessage]],
                   Optional[ProtocolMessage]]
_HANDLERS: dict[tuple[int, str], Handler] = {}


def _handles(*keys: tuple[int, str]):
    def register(fn: Handler) -> Handler:
        for key in keys:
            _HANDLERS[key] = fn
        return fn
    return register


def step(state: SessionState, ctx: PartyContext,
         inbound: Optional[ProtocolMessage]) -> Optional[ProtocolMessage]:
    """Advance one session by one message; never raises on bad input."""
    if not state.verdict.pending:
        return None
    handler = _HANDLERS.get((state.protocol, state.role))
    if handler is None:
        return _reject(state, "unknown-protocol")
    return handler(state, ctx, inbound)


# ---------------------------------------------------------------------------
# Protocol 1: unilateral challenge-response under a shared pair key
# ---------------------------------------------------------------------------

@_handles((1, CLAIMANT))
def _p1_claimant(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0 and inbound is None:
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier, [f_text("Hi")])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.NONCE)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        (peer_nonce,) = opened
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            _encrypt(ctx, state, key, 3, CLAIMANT, VERIFIER,
                     [f_nonce(peer_nonce), f_id(cfg.verifier)])])
    return _reject(state, "unexpected-message")


@_handles((1, VERIFIER))
def _p1_verifier(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        return _out(ctx, state, 2, cfg.claimant, [f_nonce(state.own_nonce)])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        inner = _open(ctx, state, key, opened[0], 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        values = field_values(inner, wire.NONCE, wire.ID)
        if values is None or values[1] != ctx.actor_id:
            return _reject(state, "bad-ciphertext")
        if values[0].data != state.own_nonce.data:
            return _reject(state, "nonce-mismatch")
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocols 2-3: mutual nonce exchange, optionally transporting a session key
# ---------------------------------------------------------------------------

@_handles((2, CLAIMANT), (3, CLAIMANT))
def _p23_claimant(state, ctx, inbound):
    cfg = state.config
    akep = state.protocol == 3
    if state.phase == 0 and inbound is None:
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier, [f_nonce(state.own_nonce)])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        inner = _open(ctx, state, key, opened[0], 2, VERIFIER, CLAIMANT)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        if akep:
            values = field_values(inner, wire.NONCE, wire.NONCE, wire.ID, wire.ID, wire.KEY)
        else:
            values = field_values(inner, wire.NONCE, wire.NONCE, wire.ID)
        if values is None:
            return _reject(state, "bad-ciphertext")
        if values[0].data != state.own_nonce.data:
            return _reject(state, "nonce-mismatch")
        if values[2] != ctx.actor_id or (akep and values[3] != cfg.verifier):
            return _reject(state, "bad-ciphertext")
        peer_nonce = values[1]
        if akep:
            state.session_key = SymmetricKey(values[4].data, origin="session")
            reply = [f_nonce(peer_nonce), f_id(ctx.actor_id)]
        else:
            reply = [f_nonce(peer_nonce), f_nonce(state.own_nonce)]
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            _encrypt(ctx, state, key, 3, CLAIMANT, VERIFIER, reply)])
    return _reject(state, "unexpected-message")


@_handles((2, VERIFIER), (3, VERIFIER))
def _p23_verifier(state, ctx, inbound):
    cfg = state.config
    akep = state.protocol == 3
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.NONCE)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        state.peer_nonce = opened[0]
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        state.own_nonce = ctx.fresh_nonce()
        if akep:
            session_key, reason = _session_key_source(ctx, state)
            if reason is not None:
                return _reject(state, reason)
            state.session_key = session_key
            inner = [f_nonce(state.peer_nonce), f_nonce(state.own_nonce),
                     f_id(cfg.claimant), f_id(ctx.actor_id), wire.f_key(session_key)]
        else:
            inner = [f_nonce(state.peer_nonce), f_nonce(state.own_nonce), f_id(cfg.claimant)]
        state.phase = 1
        return _out(ctx, state, 2, cfg.claimant, [
            _encrypt(ctx, state, key, 2, VERIFIER, CLAIMANT, inner)])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _pair_key(ctx, state)
        inner = _open(ctx, state, key, opened[0], 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        if akep:
            values = field_values(inner, wire.NONCE, wire.ID)
            ok = values is not None and values[0].data == state.own_nonce.data \
                and values[1] == cfg.claimant
        else:
            values = field_values(inner, wire.NONCE, wire.NONCE)
            ok = values is not None and values[0].data == state.own_nonce.data \
                and values[1].data == state.peer_nonce.data
        if values is None:
            return _reject(state, "bad-ciphertext")
        if not ok:
            return _reject(state, "nonce-mismatch")
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


def _session_key_source(ctx: PartyContext, state: SessionState):
    """Protocol 3's transported key: fresh by default, KAS-sourced on request.

    A KAS-sourced key must sit at a leaf label so it enables no further
    derivations.
    """
    label = state.config.session_key_label
    if label is None:
        return ctx.rng.key("session"), None
    if ctx.policy is None or label not in ctx.policy.poset:
        return None, "non-leaf-session-key"
    if ctx.policy.poset.children(label):
        return None, "non-leaf-session-key"
    key = _derive(ctx, label)
    if key is None:
        return None, "cannot-derive"
    return SymmetricKey(key.data, origin="session"), None


# ---------------------------------------------------------------------------
# Protocols 4-5: one-pass timestamp baselines
# ---------------------------------------------------------------------------

@_handles((4, CLAIMANT), (5, CLAIMANT))
def _p45_claimant(state, ctx, inbound):
    cfg = state.config
    mutual = state.protocol == 5
    if state.phase == 0 and inbound is None:
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        state.phase = 1
        if not mutual:
            _accept(state)
        return _out(ctx, state, 1, cfg.verifier, [
            _encrypt(ctx, state, key, 1, CLAIMANT, VERIFIER,
                     [f_tick(ctx.clock()), f_id(cfg.verifier)])])
    if mutual and state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _pair_key(ctx, state)
        reason = _check_pass_timestamp(ctx, state, key, opened[0], 2, VERIFIER, CLAIMANT)
        if reason is not None:
            return _reject(state, reason)
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


@_handles((4, VERIFIER), (5, VERIFIER))
def _p45_verifier(state, ctx, inbound):
    cfg = state.config
    mutual = state.protocol == 5
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _pair_key(ctx, state)
        if key is None:
            return _reject(state, "no-shared-key")
        reason = _check_pass_timestamp(ctx, state, key, opened[0], 1, CLAIMANT, VERIFIER)
        if reason is not None:
            return _reject(state, reason)
        state.phase = 1
        _accept(state)
        if mutual:
            return _out(ctx, state, 2, cfg.claimant, [
                _encrypt(ctx, state, key, 2, VERIFIER, CLAIMANT,
                         [f_tick(ctx.clock()), f_id(cfg.claimant)])])
        return None
    return _reject(state, "unexpected-message")


def _check_pass_timestamp(ctx, state, key, ct, index, sender_role, receiver_role):
    if key is None:
        return "no-shared-key"
    inner = _open(ctx, state, key, ct, index, sender_role, receiver_role)
    if inner is None:
        return "bad-ciphertext"
    values = field_values(inner, wire.TICK, wire.ID)
    if values is None or values[1] != ctx.actor_id:
        return "bad-ciphertext"
    reason = _check_timestamp(ctx, values[0])
    if reason is not None:
        return reason
    if _check_body_replay(ctx, ct.body):
        return "replayed-timestamp"
    ctx.ts_seen.add(ct.body)
    return None


# ---------------------------------------------------------------------------
# Protocols 6-7: unilateral KAS challenge-response (CSL and VSL)
# ---------------------------------------------------------------------------

@_handles((6, CLAIMANT), (7, CLAIMANT))
def _p67_claimant(state, ctx, inbound):
    cfg = state.config
    csl = state.protocol == 6
    if state.phase == 0 and inbound is None:
        if csl and cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        state.phase = 1
        if csl:
            state.effective_label = cfg.v
            return _out(ctx, state, 1, cfg.verifier, [f_label(cfg.v)])
        return _out(ctx, state, 1, cfg.verifier, [f_text("Hi")])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        if csl:
            opened = field_values(msg.fields, wire.NONCE)
            if opened is None:
                return _reject(state, "bad-ciphertext")
            v, peer_nonce = state.effective_label, opened[0]
        else:
            opened = field_values(msg.fields, wire.LABEL, wire.NONCE)
            if opened is None:
                return _reject(state, "bad-ciphertext")
            v, peer_nonce = opened
            state.effective_label = v
        key = _claimant_key(ctx, state, v)
        if key is None:
            return None
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            _encrypt(ctx, state, key, 3, CLAIMANT, VERIFIER,
                     [f_nonce(peer_nonce), f_id(cfg.verifier)])])
    return _reject(state, "unexpected-message")


@_handles((6, VERIFIER), (7, VERIFIER))
def _p67_verifier(state, ctx, inbound):
    cfg = state.config
    csl = state.protocol == 6
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        if csl:
            opened = field_values(msg.fields, wire.LABEL)
            if opened is None:
                return _reject(state, "bad-ciphertext")
            v = opened[0]
        elif cfg.v is not None:
            v = cfg.v
        else:
            try:
                v = ctx.policy.label_of_service(cfg.service)
            except PosetError:
                return _reject(state, "policy-unsatisfied")
        reason = _verifier_admissible(ctx, state, v)
        if reason is not None:
            return _reject(state, reason)
        state.effective_label = ctx.policy.poset.get(v.id)
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        fields = [f_nonce(state.own_nonce)]
        if not csl:
            fields = [f_label(state.effective_label), f_nonce(state.own_nonce)]
        return _out(ctx, state, 2, cfg.claimant, fields)
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-response")
        key = _derive(ctx, state.effective_label)
        if key is None:
            return _reject(state, "verifier-under-cleared")
        inner = _open(ctx, state, key, opened[0], 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-response")
        values = field_values(inner, wire.NONCE, wire.ID)
        if values is None or values[0].data != state.own_nonce.data \
                or values[1] != ctx.actor_id:
            return _reject(state, "bad-response")
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocol 8: mutual KAS challenge-response
# ---------------------------------------------------------------------------

@_handles((8, CLAIMANT))
def _p8_claimant(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0 and inbound is None:
        if cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier,
                    [f_label(cfg.v), f_nonce(state.own_nonce)])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT, wire.LABEL)
        if opened is None:
            return _reject(state, "bad-response")
        ct, w = opened
        key_v = _derive(ctx, cfg.v)
        if key_v is None:
            return _reject(state, "cannot-derive")
        inner = _open(ctx, state, key_v, ct, 2, VERIFIER, CLAIMANT)
        if inner is None:
            return _reject(state, "bad-response")
        values = field_values(inner, wire.NONCE, wire.NONCE, wire.ID)
        if values is None or values[0].data != state.own_nonce.data \
                or values[2] != ctx.actor_id:
            return _reject(state, "bad-response")
        peer_nonce = values[1]
        key_w = _claimant_key(ctx, state, w)
        if key_w is None:
            return None
        state.effective_label = w
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            _encrypt(ctx, state, key_w, 3, CLAIMANT, VERIFIER,
                     [f_nonce(state.own_nonce), f_nonce(peer_nonce)])])
    return _reject(state, "unexpected-message")


@_handles((8, VERIFIER))
def _p8_verifier(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL, wire.NONCE)
        if opened is None:
            return _reject(state, "bad-response")
        v, peer_nonce = opened
        state.peer_nonce = peer_nonce
        w = cfg.w if cfg.w is not None else v
        key_v = _derive(ctx, v)
        if key_v is None:
            return _reject(state, "cannot-derive")
        if _derive(ctx, w) is None:
            return _reject(state, "cannot-derive")
        state.effective_label = w
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        return _out(ctx, state, 2, cfg.claimant, [
            _encrypt(ctx, state, key_v, 2, VERIFIER, CLAIMANT,
                     [f_nonce(peer_nonce), f_nonce(state.own_nonce), f_id(cfg.claimant)]),
            f_label(w)])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-response")
        key_w = _derive(ctx, state.effective_label)
        inner = _open(ctx, state, key_w, opened[0], 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-response")
        values = field_values(inner, wire.NONCE, wire.NONCE)
        if values is None or values[0].data != state.peer_nonce.data \
                or values[1].data != state.own_nonce.data:
            return _reject(state, "bad-response")
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocols 9-10: protected nonce, optionally deriving a session key
# ---------------------------------------------------------------------------

def _p10_session_key(state: SessionState, verifier_id: str, nonce: Nonce) -> SymmetricKey:
    binding = b"kasauth/p10/session|" + encode_fields(
        [f_label(state.effective_label), f_id(verifier_id)]) + state.challenge_body
    return derive_session_key(nonce.data, binding)


@_handles((9, CLAIMANT), (10, CLAIMANT))
def _p910_claimant(state, ctx, inbound):
    cfg = state.config
    with_session = state.protocol == 10
    if state.phase == 0 and inbound is None:
        if cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        state.effective_label = cfg.v
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier, [f_label(cfg.v)])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        key = _claimant_key(ctx, state, cfg.v)
        if key is None:
            return None
        inner = _open(ctx, state, key, opened[0], 2, VERIFIER, CLAIMANT)
        if inner is None:
            # The challenge nonce is hidden; a reckless claimant guesses.
            if not cfg.reckless:
                return _reject(state, "cannot-derive")
            inner = (f_nonce(ctx.fresh_nonce()),)
        values = field_values(inner, wire.NONCE)
        if values is None:
            return _reject(state, "bad-ciphertext")
        peer_nonce = values[0]
        state.challenge_body = opened[0].body
        if with_session:
            reply_key = _p10_session_key(state, cfg.verifier, peer_nonce)
            state.session_key = reply_key
        else:
            reply_key = key
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            _encrypt(ctx, state, reply_key, 3, CLAIMANT, VERIFIER,
                     [f_nonce(peer_nonce), f_id(cfg.verifier)])])
    return _reject(state, "unexpected-message")


@_handles((9, VERIFIER), (10, VERIFIER))
def _p910_verifier(state, ctx, inbound):
    cfg = state.config
    with_session = state.protocol == 10
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        v = opened[0]
        reason = _verifier_admissible(ctx, state, v)
        if reason is not None:
            return _reject(state, reason)
        state.effective_label = ctx.policy.poset.get(v.id)
        key = _derive(ctx, state.effective_label)
        if key is None:
            return _reject(state, "verifier-under-cleared")
        state.own_nonce = ctx.fresh_nonce()
        challenge = _encrypt(ctx, state, key, 2, VERIFIER, CLAIMANT,
                             [f_nonce(state.own_nonce)])
        state.challenge_body = challenge.value.body
        state.phase = 1
        return _out(ctx, state, 2, cfg.claimant, [challenge])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-response")
        if with_session:
            key = _p10_session_key(state, ctx.actor_id, state.own_nonce)
            state.session_key = key
        else:
            key = _derive(ctx, state.effective_label)
        inner = _open(ctx, state, key, opened[0], 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-response")
        values = field_values(inner, wire.NONCE, wire.ID)
        if values is None or values[0].data != state.own_nonce.data \
                or values[1] != ctx.actor_id:
            return _reject(state, "bad-response")
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocol 11: security-label negotiation
# ---------------------------------------------------------------------------

@_handles((11, CLAIMANT))
def _p11_claimant(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0 and inbound is None:
        if cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier, [f_label(cfg.v)])
    if state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.NONCE, wire.LABEL)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        peer_nonce, verifier_label = opened
        w = _negotiate(ctx, state, cfg.v, verifier_label)
        if w is None:
            return None
        if cfg.service is not None:
            try:
                required = ctx.policy.label_of_service(cfg.service)
            except PosetError:
                return _reject(state, "policy-unsatisfied")
            if not ctx.policy.poset.leq(required, w):
                return _reject(state, "below-service-minimum")
        key = _claimant_key(ctx, state, w)
        if key is None:
            return None
        state.effective_label = w
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 3, cfg.verifier, [
            f_label(w),
            _encrypt(ctx, state, key, 3, CLAIMANT, VERIFIER,
                     [f_nonce(peer_nonce), f_id(cfg.verifier)])])
    return _reject(state, "unexpected-message")


def _negotiate(ctx: PartyContext, state: SessionState, v: Label,
               verifier_label: Label) -> Optional[Label]:
    """The challenge label both sides can hold: maximal common descendant of
    the request, the verifier's clearance, and our own clearance."""
    poset = ctx.policy.poset
    if v not in poset or verifier_label not in poset:
        return _reject(state, "policy-unsatisfied")
    own = ctx.credential.label
    if poset.leq(v, verifier_label) and poset.leq(v, own):
        return v
    maxima = poset.common_descendant_maxima(v, verifier_label, own)
    if not maxima:
        return _reject(state, "no-common-descendant")
    if len(maxima) > 1:
        logger.warning("negotiation between %s and %s is ambiguous: %s",
                       v.id, verifier_label.id, ", ".join(m.id for m in maxima))
    return maxima[0]


@_handles((11, VERIFIER))
def _p11_verifier(state, ctx, inbound):
    cfg = state.config
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        if opened[0] not in ctx.policy.poset:
            return _reject(state, "policy-unsatisfied")
        state.own_nonce = ctx.fresh_nonce()
        state.phase = 1
        return _out(ctx, state, 2, cfg.claimant,
                    [f_nonce(state.own_nonce), f_label(ctx.credential.label)])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL, wire.CT)
        if opened is None:
            return _reject(state, "bad-response")
        w, ct = opened
        reason = _verifier_admissible(ctx, state, w)
        if reason == "policy-unsatisfied" and w in ctx.policy.poset \
                and cfg.service is not None:
            reason = "below-service-minimum"
        if reason is not None:
            return _reject(state, reason)
        key = _derive(ctx, w)
        inner = _open(ctx, state, key, ct, 3, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-response")
        values = field_values(inner, wire.NONCE, wire.ID)
        if values is None or values[0].data != state.own_nonce.data \
                or values[1] != ctx.actor_id:
            return _reject(state, "bad-response")
        state.effective_label = ctx.policy.poset.get(w.id)
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocols 12-13: one-pass time-variant KAS authentication
# ---------------------------------------------------------------------------

def _fresh_field(ctx: PartyContext, state: SessionState, peer: str) -> Field:
    if state.config.freshness == "sequence":
        return f_seq(_next_seq(ctx, peer))
    return f_tick(ctx.clock())


def _check_fresh(ctx: PartyContext, state: SessionState, inner: tuple[Field, ...],
                 sender: str, body: bytes) -> Optional[str]:
    values = field_values(inner, wire.TICK, wire.ID)
    if values is not None:
        if state.config.freshness != "timestamp":
            return "bad-ciphertext"
        if values[1] != ctx.actor_id:
            return "bad-ciphertext"
        reason = _check_timestamp(ctx, values[0])
        if reason is not None:
            return reason
        if _check_body_replay(ctx, body):
            return "replayed-timestamp"
        ctx.ts_seen.add(body)
        return None
    values = field_values(inner, wire.SEQ, wire.ID)
    if values is not None:
        if state.config.freshness != "sequence":
            return "bad-ciphertext"
        if values[1] != ctx.actor_id:
            return "bad-ciphertext"
        return _check_seq(ctx, sender, values[0])
    return "bad-ciphertext"


@_handles((12, CLAIMANT), (13, CLAIMANT))
def _p1213_claimant(state, ctx, inbound):
    cfg = state.config
    mutual = state.protocol == 13
    if state.phase == 0 and inbound is None:
        if cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        key = _claimant_key(ctx, state, cfg.v)
        if key is None:
            return None
        state.effective_label = cfg.v
        state.phase = 1
        if not mutual:
            _accept(state)
        return _out(ctx, state, 1, cfg.verifier, [
            f_label(cfg.v),
            _encrypt(ctx, state, key, 1, CLAIMANT, VERIFIER,
                     [_fresh_field(ctx, state, cfg.verifier), f_id(cfg.verifier)])])
    if mutual and state.phase == 1:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        w, ct = opened
        key = _derive(ctx, w)
        if key is None:
            return _reject(state, "cannot-derive")
        inner = _open(ctx, state, key, ct, 2, VERIFIER, CLAIMANT)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        reason = _check_fresh(ctx, state, inner, msg.sender, ct.body)
        if reason is not None:
            return _reject(state, reason)
        state.phase = 2
        return _accept(state)
    return _reject(state, "unexpected-message")


@_handles((12, VERIFIER), (13, VERIFIER))
def _p1213_verifier(state, ctx, inbound):
    cfg = state.config
    mutual = state.protocol == 13
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.LABEL, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        v, ct = opened
        reason = _verifier_admissible(ctx, state, v)
        if reason is not None:
            return _reject(state, reason)
        state.effective_label = ctx.policy.poset.get(v.id)
        key = _derive(ctx, state.effective_label)
        inner = _open(ctx, state, key, ct, 1, CLAIMANT, VERIFIER)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        reason = _check_fresh(ctx, state, inner, msg.sender, ct.body)
        if reason is not None:
            return _reject(state, reason)
        state.phase = 1
        _accept(state)
        if mutual:
            w = cfg.w if cfg.w is not None else state.effective_label
            key_w = _derive(ctx, w)
            if key_w is None:
                return None
            return _out(ctx, state, 2, cfg.claimant, [
                f_label(w),
                _encrypt(ctx, state, key_w, 2, VERIFIER, CLAIMANT,
                         [_fresh_field(ctx, state, cfg.claimant), f_id(cfg.claimant)])])
        return None
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Protocols 16-17: individual identity via a TTP
# ---------------------------------------------------------------------------

@_handles((16, CLAIMANT), (17, CLAIMANT))
def _p1617_claimant(state, ctx, inbound):
    cfg = state.config
    ake = state.protocol == 17
    if state.phase == 0 and inbound is None:
        state.claimed_id = cfg.claim_as or ctx.actor_id
        state.phase = 1
        return _out(ctx, state, 1, cfg.verifier, [f_id(state.claimed_id)])
    if state.phase == 1:
        msg = _expect(state, inbound, 4)
        if msg is None:
            return None
        if ake:
            opened = field_values(msg.fields, wire.LABEL, wire.CT)
        else:
            opened = field_values(msg.fields, wire.LABEL, wire.NONCE)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        v = opened[0]
        key_v = _claimant_key(ctx, state, v)
        if key_v is None:
            return None
        state.effective_label = v
        if ctx.ttp_key is None:
            return _reject(state, "ttp-unavailable")
        if ake:
            inner = _open(ctx, state, key_v, opened[1], 4, VERIFIER, CLAIMANT)
            if inner is None:
                return _reject(state, "bad-ciphertext")
            values = field_values(inner, wire.NONCE)
            if values is None:
                return _reject(state, "bad-ciphertext")
            peer_nonce = values[0]
            session_key = SymmetricKey(
                keyed_digest(ctx.ttp_key, peer_nonce.data), origin="session")
            state.session_key = session_key
            state.phase = 2
            _accept(state)
            return _out(ctx, state, 5, cfg.verifier, [
                _encrypt(ctx, state, session_key, 5, CLAIMANT, VERIFIER,
                         [f_nonce(peer_nonce), f_id(cfg.verifier)])])
        peer_nonce = opened[1]
        digest = keyed_digest(ctx.ttp_key, peer_nonce.data)
        state.phase = 2
        _accept(state)
        return _out(ctx, state, 5, cfg.verifier, [
            _encrypt(ctx, state, key_v, 5, CLAIMANT, VERIFIER,
                     [f_nonce(peer_nonce), f_id(cfg.verifier), wire.f_digest(digest)])])
    return _reject(state, "unexpected-message")


@_handles((16, VERIFIER), (17, VERIFIER))
def _p1617_verifier(state, ctx, inbound):
    cfg = state.config
    ake = state.protocol == 17
    if state.phase == 0:
        msg = _expect(state, inbound, 1)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.ID)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        state.claimed_id = opened[0]
        if cfg.ttp is None:
            return _reject(state, "ttp-unavailable")
        if cfg.v is None:
            return _reject(state, "policy-unsatisfied")
        reason = _verifier_admissible(ctx, state, cfg.v)
        if reason is not None:
            return _reject(state, reason)
        state.effective_label = cfg.v
        state.phase = 1
        return _out(ctx, state, 2, cfg.ttp, [f_id(state.claimed_id)])
    if state.phase == 1:
        msg = _expect(state, inbound, 3)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None or ctx.ttp_key is None:
            return _reject(state, "ttp-unavailable")
        inner = _open(ctx, state, ctx.ttp_key, opened[0], 3, TTP, VERIFIER)
        if inner is None:
            return _reject(state, "bad-ciphertext")
        if ake:
            values = field_values(inner, wire.NONCE, wire.KEY)
            if values is None:
                return _reject(state, "bad-ciphertext")
            state.own_nonce, state.session_key = values
        else:
            values = field_values(inner, wire.NONCE, wire.DIGEST)
            if values is None:
                return _reject(state, "bad-ciphertext")
            state.own_nonce, state.expected_digest = values
        key_v = _derive(ctx, cfg.v)
        if key_v is None:
            return _reject(state, "verifier-under-cleared")
        state.phase = 2
        if ake:
            return _out(ctx, state, 4, cfg.claimant, [
                f_label(cfg.v),
                _encrypt(ctx, state, key_v, 4, VERIFIER, CLAIMANT,
                         [f_nonce(state.own_nonce)])])
        return _out(ctx, state, 4, cfg.claimant,
                    [f_label(cfg.v), f_nonce(state.own_nonce)])
    if state.phase == 2:
        msg = _expect(state, inbound, 5)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.CT)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        if ake:
            inner = _open(ctx, state, state.session_key, opened[0], 5, CLAIMANT, VERIFIER)
            if inner is None:
                return _reject(state, "bad-ciphertext")
            values = field_values(inner, wire.NONCE, wire.ID)
            if values is None or values[0].data != state.own_nonce.data \
                    or values[1] != ctx.actor_id:
                return _reject(state, "bad-ciphertext")
        else:
            key_v = _derive(ctx, cfg.v)
            inner = _open(ctx, state, key_v, opened[0], 5, CLAIMANT, VERIFIER)
            if inner is None:
                return _reject(state, "bad-ciphertext")
            values = field_values(inner, wire.NONCE, wire.ID, wire.DIGEST)
            if values is None or values[0].data != state.own_nonce.data \
                    or values[1] != ctx.actor_id:
                return _reject(state, "bad-ciphertext")
            if values[2] != state.expected_digest:
                return _reject(state, "digest-mismatch")
        state.phase = 3
        return _accept(state)
    return _reject(state, "unexpected-message")


@_handles((16, TTP), (17, TTP))
def _p1617_ttp(state, ctx, inbound):
    ake = state.protocol == 17
    if state.phase == 0:
        msg = _expect(state, inbound, 2)
        if msg is None:
            return None
        opened = field_values(msg.fields, wire.ID)
        if opened is None:
            return _reject(state, "bad-ciphertext")
        claimed = opened[0]
        claimant_key = ctx.ttp_user_keys.get(claimed)
        verifier_key = ctx.ttp_user_keys.get(msg.sender)
        if claimant_key is None or verifier_key is None:
            return _reject(state, "unknown-user")
        nonce = ctx.fresh_nonce()
        digest = keyed_digest(claimant_key, nonce.data)
        if ake:
            inner = [f_nonce(nonce), wire.f_key(SymmetricKey(digest, origin="session"))]
        else:
            inner = [f_nonce(nonce), wire.f_digest(digest)]
        state.phase = 1
        _accept(state)
        return _out(ctx, state, 3, msg.sender, [
            _encrypt(ctx, state, verifier_key, 3, TTP, VERIFIER, inner)])
    return _reject(state, "unexpected-message")


# ---------------------------------------------------------------------------
# Direct session runner
# ---------------------------------------------------------------------------

def run_session(protocol: int, claimant: PartyContext, verifier: PartyContext, *,
                ttp: Optional[PartyContext] = None, session: str = "s1",
                v: Optional[Label] = None, w: Optional[Label] = None,
                service: Optional[str] = None, freshness: str = "timestamp",
                session_key_label: Optional[Label] = None,
                claim_as: Optional[str] = None, reckless: bool = False) -> Transcript:
    """Run one honest exchange in-process and return its transcript.

    Messages pass directly between the parties (no bus); the harness module
    runs the same step functions under a simulated network instead.
    """
    cfg = SessionConfig(
        protocol=protocol, session=session, claimant=claimant.actor_id,
        verifier=verifier.actor_id, ttp=ttp.actor_id if ttp else None,
        v=v, w=w, service=service, freshness=freshness,
        session_key_label=session_key_label, claim_as=claim_as, reckless=reckless)
    parties: dict[str, tuple[PartyContext, SessionState]] = {
        claimant.actor_id: (claimant, SessionState(cfg, CLAIMANT)),
        verifier.actor_id: (verifier, SessionState(cfg, VERIFIER)),
    }
    if ttp is not None:
        parties[ttp.actor_id] = (ttp, SessionState(cfg, TTP))
    transcript = Transcript(protocol=protocol, session=session)
    outbound = step(parties[claimant.actor_id][1], claimant, None)
    hops = 0
    while outbound is not None:
        transcript.record(outbound)
        entry = parties.get(outbound.receiver)
        if entry is None:
            break
        outbound = step(entry[1], entry[0], outbound)
        hops += 1
        if hops > 16:
            raise RuntimeError("protocol did not terminate")
    for actor_id, (_, st) in parties.items():
        if st.verdict.pending:
            st.verdict = Verdict.reject("incomplete")
        transcript.verdicts[actor_id] = st.verdict
        if st.effective_label is not None:
            transcript.clearances[actor_id] = st.effective_label
        if st.session_key is not None:
            transcript.session_keys[actor_id] = st.session_key
    return transcript


# Named wrappers for the individual session operations.

def baseline_session(variant: int, claimant: PartyContext, verifier: PartyContext,
                     **kwargs) -> Transcript:
    if variant not in (1, 2, 3, 4, 5):
        raise ValueError(f"baseline variant must be 1..5, got {variant}")
    return run_session(variant, claimant, verifier, **kwargs)


def csl_unilateral_session(claimant: PartyContext, verifier: PartyContext,
                           v: Label, **kwargs) -> Transcript:
    return run_session(6, claimant, verifier, v=v, **kwargs)


def vsl_unilateral_session(claimant: PartyContext, verifier: PartyContext,
                           *, v: Optional[Label] = None,
                           service: Optional[str] = None, **kwargs) -> Transcript:
    return run_session(7, claimant, verifier, v=v, service=service, **kwargs)


def mutual_session(claimant: PartyContext, verifier: PartyContext,
                   v: Label, w: Label, **kwargs) -> Transcript:
    return run_session(8, claimant, verifier, v=v, w=w, **kwargs)


def protected_nonce_session(claimant: PartyContext, verifier: PartyContext,
                            v: Label, with_session_key: bool = False,
                            **kwargs) -> Transcript:
    return run_session(10 if with_session_key else 9, claimant, verifier, v=v, **kwargs)


def negotiation_session(claimant: PartyContext, verifier: PartyContext,
                        v: Label, service: Optional[str] = None, **kwargs) -> Transcript:
    return run_session(11, claimant, verifier, v=v, service=service, **kwargs)


def timestamp_session(claimant: PartyContext, verifier: PartyContext, v: Label,
                      *, w: Optional[Label] = None, mutual: bool = False,
                      freshness: str = "timestamp", **kwargs) -> Transcript:
    return run_session(13 if mutual else 12, claimant, verifier,
                       v=v, w=w, freshness=freshness, **kwargs)


def ttp_identity_session(claimant: PartyContext, verifier: PartyContext,
                         ttp: PartyContext, v: Label, **kwargs) -> Transcript:
    return run_session(16, claimant, verifier, ttp=ttp, v=v, **kwargs)


def ttp_ake_session(claimant: PartyContext, verifier: PartyContext,
                    ttp: PartyContext, v: Label, **kwargs) -> Transcript:
    return run_session(17, claimant, verifier, ttp=ttp, v=v, **kwargs)
