"""Canonical message encoding and transcript records.

Every protocol message is a tagged field list with a fixed order per
message type, encoded as ``tag(1) || length(4, big-endian) || payload`` per
field. Ciphertext contexts are derived from (protocol id, message index,
sender role, receiver role) — never from actor identities, so claimants in
the same equivalence class produce identical bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Optional, Union

from .crypto import Ciphertext, Nonce, SymmetricKey, KEY_SIZE, NONCE_SIZE, DIGEST_SIZE
from .poset import Label

CLAIMANT = "claimant"
VERIFIER = "verifier"
TTP = "ttp"


class WireError(ValueError):
    """Malformed canonical encoding."""


# ---------------------------------------------------------------------------
# Fields
# ---------------------------------------------------------------------------

ID = "id"
TEXT = "text"
LABEL = "label"
NONCE = "nonce"
TICK = "tick"
SEQ = "seq"
KEY = "key"
DIGEST = "digest"
CT = "ct"

_TAGS = {ID: 1, TEXT: 2, LABEL: 3, NONCE: 4, TICK: 5, SEQ: 6, KEY: 7, DIGEST: 8, CT: 9}
_KINDS = {tag: kind for kind, tag in _TAGS.items()}

FieldValue = Union[str, Label, Nonce, int, SymmetricKey, bytes, Ciphertext]


@dataclass(frozen=True)
class Field:
    kind: str
    value: FieldValue

    def render(self) -> str:
        v = self.value
        if self.kind in (ID, TEXT):
            return f"{self.kind}={v}"
        if self.kind == LABEL:
            return f"label={v.id}"  # type: ignore[union-attr]
        if self.kind == NONCE:
            return f"nonce={v.data.hex()[:12]}"  # type: ignore[union-attr]
        if self.kind in (TICK, SEQ):
            return f"{self.kind}={v}"
        if self.kind == KEY:
            return "key=<32 bytes>"
        if self.kind == DIGEST:
            return f"digest={v.hex()[:12]}"  # type: ignore[union-attr]
        return f"ct[{len(v.body)}]"  # type: ignore[union-attr]


def f_id(value: str) -> Field:
    return Field(ID, value)


def f_text(value: str) -> Field:
    return Field(TEXT, value)


def f_label(value: Label) -> Field:
    return Field(LABEL, value)


def f_nonce(value: Nonce) -> Field:
    return Field(NONCE, value)


def f_tick(value: int) -> Field:
    return Field(TICK, value)


def f_seq(value: int) -> Field:
    return Field(SEQ, value)


def f_key(value: SymmetricKey) -> Field:
    return Field(KEY, value)


def f_digest(value: bytes) -> Field:
    return Field(DIGEST, value)


def f_ct(value: Ciphertext) -> Field:
    return Field(CT, value)


def _payload(f: Field) -> bytes:
    if f.kind in (ID, TEXT):
        return str(f.value).encode()
    if f.kind == LABEL:
        return f.value.id.encode()  # type: ignore[union-attr]
    if f.kind == NONCE:
        return f.value.data  # type: ignore[union-attr]
    if f.kind in (TICK, SEQ):
        # Signed: skewed views of an early logical clock can sit below zero.
        return struct.pack(">q", int(f.value))  # type: ignore[arg-type]
    if f.kind == KEY:
        return f.value.data  # type: ignore[union-attr]
    if f.kind == DIGEST:
        return bytes(f.value)  # type: ignore[arg-type]
    if f.kind == CT:
        return f.value.body  # type: ignore[union-attr]
    raise WireError(f"unknown field kind {f.kind!r}")


def encode_fields(fields: tuple[Field, ...] | list[Field]) -> bytes:
    out = bytearray()
    for f in fields:
        payload = _payload(f)
        out.append(_TAGS[f.kind])
        out.extend(struct.pack(">I", len(payload)))
        out.extend(payload)
    return bytes(out)


def decode_fields(data: bytes) -> tuple[Field, ...]:
    fields: list[Field] = []
    pos = 0
    while pos < len(data):
        if pos + 5 > len(data):
            raise WireError("truncated field header")
        tag = data[pos]
        (length,) = struct.unpack(">I", data[pos + 1:pos + 5])
        pos += 5
        if pos + length > len(data):
            raise WireError("truncated field payload")
        payload = data[pos:pos + length]
        pos += length
        kind = _KINDS.get(tag)
        if kind is None:
            raise WireError(f"unknown field tag {tag}")
        fields.append(_decode_one(kind, payload))
    return tuple(fields)


def _decode_one(kind: str, payload: bytes) -> Field:
    if kind in (ID, TEXT):
        return Field(kind, payload.decode())
    if kind == LABEL:
        return Field(kind, Label.parse(payload.decode()))
    if kind == NONCE:
        if len(payload) != NONCE_SIZE:
            raise WireError("bad nonce length")
        return Field(kind, Nonce(payload))
    if kind in (TICK, SEQ):
        if len(payload) != 8:
            raise WireError(f"bad {kind} length")
        return Field(kind, struct.unpack(">q", payload)[0])
    if kind == KEY:
        if len(payload) != KEY_SIZE:
            raise WireError("bad key length")
        return Field(kind, SymmetricKey(payload))
    if kind == DIGEST:
        if len(payload) != DIGEST_SIZE:
            raise WireError("bad digest length")
        return Field(kind, payload)
    return Field(CT, Ciphertext(payload))


def field_values(fields: tuple[Field, ...], *kinds: str) -> Optional[tuple]:
    """Values in order when the field kinds match exactly, else None."""
    if tuple(f.kind for f in fields) != kinds:
        return None
    return tuple(f.value for f in fields)


# ---------------------------------------------------------------------------
# Messages and transcripts
# ---------------------------------------------------------------------------

def message_context(protocol: int, index: int, sender_role: str, receiver_role: str) -> bytes:
    """Domain-separation context for one protocol message position."""
    return f"kasauth/p{protocol:02d}/m{index}/{sender_role}>{receiver_role}".encode()


@dataclass(frozen=True)
class ProtocolMessage:
    protocol: int
    index: int
    sender: str
    receiver: str
    session: str
    fields: tuple[Field, ...]

    def payload_bytes(self) -> bytes:
        return encode_fields(self.fields)

    def summary(self) -> str:
        return " ".join(f.render() for f in self.fields) or "-"


PENDING = "pending"
ACCEPT = "accept"
REJECT = "reject"


@dataclass(frozen=True)
class Verdict:
    state: str = PENDING
    reason: str = ""

    @staticmethod
    def accept() -> "Verdict":
        return Verdict(ACCEPT)

    @staticmethod
    def reject(reason: str) -> "Verdict":
        return Verdict(REJECT, reason)

    @property
    def pending(self) -> bool:
        return self.state == PENDING

    def render(self) -> str:
        return f"{self.state}:{self.reason}" if self.reason else self.state


@dataclass
class Transcript:
    """Append-only record of one session: messages, then per-party verdicts."""

    protocol: int
    session: str
    messages: list[ProtocolMessage] = dc_field(default_factory=list)
    verdicts: dict[str, Verdict] = dc_field(default_factory=dict)
    clearances: dict[str, Label] = dc_field(default_factory=dict)
    session_keys: dict[str, SymmetricKey] = dc_field(default_factory=dict)

    def record(self, message: ProtocolMessage) -> None:
        self.messages.append(message)

    def payload_stream(self) -> bytes:
        """Concatenated canonical payloads, for transcript comparison."""
        return b"".join(m.payload_bytes() for m in self.messages)

    def verdict_of(self, actor: str) -> Verdict:
        return self.verdicts.get(actor, Verdict())
