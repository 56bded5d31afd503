"""One-round authentication via pre-published tokens and timed key release.

The construction joins an upper policy poset to a mirrored interval poset of
acceptance windows. The lower half orders intervals by *reverse* containment:
the key of a time point [t,t]' derives the key of every window containing t.
Designated temporal edges run from upper labels to lower points; their edge
tokens are withheld at setup and broadcast one tick at a time by a Trusted
Time Server. A verifier pre-publishes a token encrypted under a window key;
a claimant can open it only after some in-window broadcast it can reach, so
a valid response proves both authorization and liveness within the window —
with no synchronized clocks.

Lower time points are rendered "[t,t]'" (the mirrored leaf interval).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .crypto import AeadScheme, AuthenticationFailure, Ciphertext, Nonce, Rng, SymmetricKey
from .kas import (
    DerivationError,
    DerivationTrace,
    KasPublicInfo,
    KasTrustedCenter,
    UserCredential,
    derive_key_trace,
    kas_setup,
)
from .poset import Label, Poset
from .wire import CLAIMANT, VERIFIER, Field, Verdict, decode_fields, encode_fields, \
    f_ct, f_id, f_label, f_nonce, f_text, field_values, message_context
from . import wire

logger = logging.getLogger(__name__)

PROTOCOL_TOKEN = 14
PROTOCOL_TOKEN_LABEL = 15
_REDEEM_INDEX = 3  # message position of the claimant's response


class TimeReleaseError(Exception):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def point_label(t: int) -> Label:
    """The lower-poset time point for tick t."""
    return Label.mirrored(Label.interval(t, t))


def window_label(t0: int, t1: int) -> Label:
    return Label.mirrored(Label.interval(t0, t1))


def build_lower(n: int) -> Poset:
    """The acceptance-window poset: T_n reflected, points on top."""
    labels = [window_label(i, j) for i in range(1, n + 1) for j in range(i, n + 1)]
    edges = []
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            edges.append((window_label(i + 1, j), window_label(i, j)))
            edges.append((window_label(i, j - 1), window_label(i, j)))
    return Poset(labels, edges)


def auto_edges(upper: Poset, n: int) -> tuple[tuple[Label, Label], ...]:
    """Leaf-to-point temporal edges [t,t] -> [t,t]' for T_n-shaped uppers."""
    edges = []
    for t in range(1, n + 1):
        leaf = Label.interval(t, t)
        if leaf not in upper:
            raise TimeReleaseError(
                "dangling-edge", f"upper poset has no leaf {leaf.id}; list edges explicitly")
        edges.append((leaf, point_label(t)))
    return tuple(edges)


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Tikc:
    """One broadcast batch: the withheld tokens for every edge into tick t."""

    time: int
    tokens: dict[tuple[Label, Label], Ciphertext]


@dataclass(frozen=True)
class Token:
    """A pre-published challenge, readable by anyone (including adversaries)."""

    token_id: str
    issuer: str
    window: Label  # mirrored interval label
    body: Ciphertext
    challenge_label: Optional[Label] = None

    @property
    def protocol(self) -> int:
        return PROTOCOL_TOKEN_LABEL if self.challenge_label is not None else PROTOCOL_TOKEN

    @property
    def window_bounds(self) -> tuple[int, int]:
        return self.window.inner.interval_bounds


@dataclass
class LedgerEntry:
    nonce: Nonce
    end_tick: int
    issuer: str
    expected_key: SymmetricKey
    seen_claimant_nonces: set[bytes] = field(default_factory=set)


class TokenLedger:
    """Verifier-side bookkeeping: <nonce, t1> plus seen claimant nonces."""

    def __init__(self):
        self._entries: dict[str, LedgerEntry] = {}

    def register(self, token_id: str, entry: LedgerEntry) -> None:
        if token_id in self._entries:
            raise TimeReleaseError("duplicate-token", token_id)
        self._entries[token_id] = entry

    def get(self, token_id: str) -> Optional[LedgerEntry]:
        return self._entries.get(token_id)


@dataclass
class TimeReleaseSystem:
    upper: Poset
    lower: Poset
    combined: Poset
    span: int
    temporal_edges: tuple[tuple[Label, Label], ...]
    center: KasTrustedCenter
    full_pub: KasPublicInfo
    released: KasPublicInfo
    ledger: TokenLedger
    broadcast_ticks: list[int] = field(default_factory=list)
    repository: list[Token] = field(default_factory=list)
    orphan_points: tuple[Label, ...] = ()
    _token_seq: int = 0

    def find_token(self, token_id: str) -> Optional[Token]:
        for token in self.repository:
            if token.token_id == token_id:
                return token
        return None


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def build_time_release(upper: Poset, n: int,
                       temporal_edges: Iterable[tuple[Label, Label]],
                       rng: Rng, scheme: AeadScheme,
                       root_reserved: bool = False) -> TimeReleaseSystem:
    """Instantiate one KAS over upper + mirrored lower, withholding E*.

    Temporal edges run from an upper label to a lower point [t,t]'. The
    combined Hasse diagram must remain a valid transitive reduction; points
    reachable by no temporal edge are permitted but flagged.
    """
    if n < 1:
        raise TimeReleaseError("invalid-span", str(n))
    lower = build_lower(n)
    points = {point_label(t) for t in range(1, n + 1)}
    edges = tuple(sorted(set(temporal_edges)))
    for src, dst in edges:
        if src not in upper:
            raise TimeReleaseError("dangling-edge", f"unknown upper label {src.id}")
        if dst not in points:
            raise TimeReleaseError("dangling-edge", f"{dst.id} is not a lower time point")
    combined = Poset(
        list(upper.labels) + list(lower.labels),
        list(upper.cover_edges) + list(lower.cover_edges) + list(edges),
    )
    report = combined.validate()
    if not report.ok:
        first = report.first
        raise TimeReleaseError("invalid-structure", f"{first.kind}: {first.detail}")
    orphans = tuple(sorted(p for p in points if not any(dst == p for _, dst in edges)))
    if orphans:
        logger.warning("lower time points with no temporal edge: %s",
                       ", ".join(p.id for p in orphans))
    center, full_pub = kas_setup(combined, rng, scheme, root_reserved=root_reserved)
    released = full_pub.without_edges(edges) if edges else full_pub
    return TimeReleaseSystem(
        upper=upper, lower=lower, combined=combined, span=n,
        temporal_edges=edges, center=center, full_pub=full_pub,
        released=released, ledger=TokenLedger(), orphan_points=orphans,
    )


def tts_broadcast(sys: TimeReleaseSystem, t: int) -> Tikc:
    """Release the temporal-edge tokens for tick t; at most once per tick."""
    if not 1 <= t <= sys.span:
        raise TimeReleaseError("invalid-tick", str(t))
    if t in sys.broadcast_ticks:
        raise TimeReleaseError("duplicate-broadcast", str(t))
    point = point_label(t)
    tokens = {
        edge: sys.full_pub.edge_tokens[edge]
        for edge in sys.temporal_edges if edge[1] == point
    }
    sys.released = sys.released.with_edges(tokens)
    sys.broadcast_ticks.append(t)
    return Tikc(time=t, tokens=tokens)


def mint_token(sys: TimeReleaseSystem, issuer: str, t0: int, t1: int,
               rng: Rng, scheme: AeadScheme, *,
               token_id: Optional[str] = None,
               challenge_label: Optional[Label] = None,
               verifier_credential: Optional[UserCredential] = None,
               allow_provision: bool = True) -> Token:
    """Publish a token for the window [t0,t1]' and record its ledger entry.

    The window key (and, with a challenge label, the expected response key)
    is derived from the verifier's own credential over released info when
    possible, else provisioned directly by the trusted center; the path
    taken is logged.
    """
    if not (1 <= t0 <= t1 <= sys.span):
        raise TimeReleaseError("invalid-window", f"[{t0},{t1}] outside 1..{sys.span}")
    window = window_label(t0, t1)
    window_key = _obtain_key(sys, window, verifier_credential, allow_provision, scheme)
    nonce = rng.nonce()
    if challenge_label is not None:
        sys.upper.require(challenge_label)
        expected_key = _obtain_key(sys, challenge_label, verifier_credential,
                                   allow_provision, scheme)
        plain = encode_fields([f_nonce(nonce), f_label(challenge_label)])
        context = b"kasauth/p15/token"
        protocol = PROTOCOL_TOKEN_LABEL
    else:
        expected_key = window_key
        plain = encode_fields([f_nonce(nonce)])
        context = b"kasauth/p14/token"
        protocol = PROTOCOL_TOKEN
    body = scheme.encrypt(window_key, plain, context, rng)
    sys._token_seq += 1
    tid = token_id or f"token-{sys._token_seq}"
    token = Token(token_id=tid, issuer=issuer, window=window, body=body,
                  challenge_label=challenge_label)
    sys.repository.append(token)
    sys.ledger.register(tid, LedgerEntry(
        nonce=nonce, end_tick=t1, issuer=issuer, expected_key=expected_key))
    logger.info("minted %s for window %s (protocol %d)", tid, window.id, protocol)
    return token


def _obtain_key(sys: TimeReleaseSystem, label: Label,
                credential: Optional[UserCredential],
                allow_provision: bool, scheme: AeadScheme) -> SymmetricKey:
    if credential is not None:
        try:
            key = derive_key_trace(sys.released, sys.combined, credential.label,
                                   credential.key, label, scheme).key
            logger.info("key for %s derived from credential %s", label.id, credential.label.id)
            return key
        except DerivationError:
            pass
    if not allow_provision:
        raise TimeReleaseError("window-not-derivable", label.id)
    logger.info("key for %s provisioned by the trusted center", label.id)
    return sys.center.key_of(label)


@dataclass(frozen=True)
class RedemptionResult:
    protocol: int
    fields: tuple[Field, ...]
    trace: DerivationTrace
    temporal_edges_used: tuple[tuple[Label, Label], ...]
    response_key: SymmetricKey


def redeem_token(sys: TimeReleaseSystem, credential: UserCredential, token: Token,
                 claimant_nonce: Nonce, scheme: AeadScheme, rng: Rng) -> RedemptionResult:
    """Derive the window key from released info, open the token, respond.

    Raises TimeReleaseError with reason ``window-not-dominated`` (the window
    is unreachable regardless of broadcasts), ``no-released-tikc`` (reachable
    in principle, but no usable TIKC released yet), ``label-not-dominated``
    (embedded challenge label above the credential), or
    ``token-decrypt-failed``.
    """
    t0, t1 = token.window_bounds
    try:
        trace = derive_key_trace(sys.released, sys.combined, credential.label,
                                 credential.key, token.window, scheme)
    except DerivationError as exc:
        if exc.reason == "not-dominated":
            raise TimeReleaseError("window-not-dominated", token.window.id) from None
        in_window = [t for t in sys.broadcast_ticks if t0 <= t <= t1]
        if not in_window:
            raise TimeReleaseError(
                "no-released-tikc", f"no broadcast within [{t0},{t1}] yet") from None
        raise TimeReleaseError(
            "window-not-dominated",
            f"broadcasts at {in_window} unreachable from {credential.label.id}") from None
    temporal_used = tuple(e for e in trace.edges if e in set(sys.temporal_edges))
    try:
        plain = scheme.decrypt(trace.key, token.body, b"kasauth/p%d/token" % token.protocol)
    except AuthenticationFailure:
        raise TimeReleaseError("token-decrypt-failed", token.token_id) from None
    inner = decode_fields(plain)
    if token.challenge_label is not None:
        opened = field_values(inner, wire.NONCE, wire.LABEL)
        if opened is None:
            raise TimeReleaseError("token-decrypt-failed", "malformed token plaintext")
        verifier_nonce, embedded = opened
        try:
            response_key = derive_key_trace(sys.released, sys.combined, credential.label,
                                            credential.key, embedded, scheme).key
        except DerivationError:
            raise TimeReleaseError("label-not-dominated", embedded.id) from None
    else:
        opened = field_values(inner, wire.NONCE)
        if opened is None:
            raise TimeReleaseError("token-decrypt-failed", "malformed token plaintext")
        (verifier_nonce,) = opened
        response_key = trace.key
    context = message_context(token.protocol, _REDEEM_INDEX, CLAIMANT, VERIFIER)
    plain_response = encode_fields([
        f_id(token.issuer), f_nonce(verifier_nonce), f_nonce(claimant_nonce)])
    response = scheme.encrypt(response_key, plain_response, context, rng)
    return RedemptionResult(
        protocol=token.protocol,
        fields=(f_text(token.token_id), f_ct(response)),
        trace=trace,
        temporal_edges_used=temporal_used,
        response_key=response_key,
    )


def verify_redemption(sys: TimeReleaseSystem, verifier_id: str,
                      fields: tuple[Field, ...], current_tick: int,
                      scheme: AeadScheme, protocol: int) -> Verdict:
    """Accept iff the response opens under the expected key, names this
    verifier and the ledger nonce, carries an unseen claimant nonce, and the
    window has not expired."""
    opened = field_values(fields, wire.TEXT, wire.CT)
    if opened is None:
        return Verdict.reject("bad-ciphertext")
    token_id, body = opened
    entry = sys.ledger.get(token_id)
    if entry is None or entry.issuer != verifier_id:
        return Verdict.reject("unknown-token")
    if current_tick > entry.end_tick:
        return Verdict.reject("expired")
    context = message_context(protocol, _REDEEM_INDEX, CLAIMANT, VERIFIER)
    try:
        plain = scheme.decrypt(entry.expected_key, body, context)
    except AuthenticationFailure:
        return Verdict.reject("bad-ciphertext")
    try:
        inner = decode_fields(plain)
    except Exception:
        return Verdict.reject("bad-ciphertext")
    values = field_values(inner, wire.ID, wire.NONCE, wire.NONCE)
    if values is None:
        return Verdict.reject("bad-ciphertext")
    named, verifier_nonce, claimant_nonce = values
    if named != verifier_id or verifier_nonce.data != entry.nonce.data:
        return Verdict.reject("bad-ciphertext")
    if claimant_nonce.data in entry.seen_claimant_nonces:
        return Verdict.reject("replayed-claimant-nonce")
    entry.seen_claimant_nonces.add(claimant_nonce.data)
    return Verdict.accept()
