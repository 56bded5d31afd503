"""Symmetric primitives behind the authentication protocols.

Two authenticated-encryption instantiations sit behind one contract:

  * ``StreamHmacAead`` — deterministic given a seeded Rng; SHA-256 counter
    keystream with an HMAC-SHA256 tag over (context, iv, body). The tag is
    keyed by the encryption key itself, so decryption under any other key
    fails detectably (key-committing by construction).
  * ``CommittingAesGcm`` — AES-256-GCM with the context as associated data,
    plus an HMAC-derived key-commitment tag checked before decryption
    (GCM alone is not key-committing, which the protocols rely on).

Both randomize via an explicit Rng handle; nothing reads ambient entropy,
so full simulator runs are reproducible from a seed.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

KEY_SIZE = 32
NONCE_SIZE = 16
DIGEST_SIZE = 32

_SESSION_KDF_SALT = b"kasauth/session-key/v1"
_COMMIT_TAG_INFO = b"kasauth/key-commitment/v1"


class CryptoError(Exception):
    """Base error for this module."""


class AuthenticationFailure(CryptoError):
    """Decryption failed: wrong key, tampering, or context mismatch.

    The three causes are indistinguishable by design.
    """


class NonceReuseError(CryptoError):
    """A nonce value was presented to a ledger twice."""


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SymmetricKey:
    """A fixed-length secret. Comparison is constant-time and ignores origin."""

    data: bytes
    origin: str = "external"  # kas-node | shared-ttp | session | external

    def __post_init__(self):
        if len(self.data) != KEY_SIZE:
            raise CryptoError(f"key must be {KEY_SIZE} bytes, got {len(self.data)}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymmetricKey):
            return NotImplemented
        return hmac.compare_digest(self.data, other.data)

    def __hash__(self) -> int:
        return hash(self.data)

    def __repr__(self) -> str:
        return f"SymmetricKey(origin={self.origin!r}, data=<{KEY_SIZE} bytes>)"


@dataclass(frozen=True)
class Nonce:
    data: bytes

    def __post_init__(self):
        if len(self.data) != NONCE_SIZE:
            raise CryptoError(f"nonce must be {NONCE_SIZE} bytes, got {len(self.data)}")

    def __repr__(self) -> str:
        return f"Nonce({self.data.hex()})"


@dataclass(frozen=True)
class Timestamp:
    """Logical time: a non-negative integer tick."""

    tick: int

    def __post_init__(self):
        if self.tick < 0:
            raise CryptoError(f"timestamp tick must be >= 0, got {self.tick}")


@dataclass(frozen=True)
class Ciphertext:
    """Opaque body plus the context bytes that were authenticated with it."""

    body: bytes
    binding: bytes = b""


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class Rng:
    """Seeded, single-owner randomness source; passed explicitly everywhere."""

    def __init__(self, seed: int):
        self._random = random.Random(seed)

    def bytes(self, n: int) -> bytes:
        return self._random.randbytes(n)

    def key(self, origin: str = "external") -> SymmetricKey:
        return SymmetricKey(self.bytes(KEY_SIZE), origin)

    def nonce(self) -> Nonce:
        return Nonce(self.bytes(NONCE_SIZE))


class NonceLedger:
    """Per-actor record of nonce values; rejects any reuse."""

    def __init__(self):
        self._seen: set[bytes] = set()

    def record(self, nonce: Nonce) -> Nonce:
        if nonce.data in self._seen:
            raise NonceReuseError(f"nonce {nonce.data.hex()} reused")
        self._seen.add(nonce.data)
        return nonce

    def __contains__(self, nonce: Nonce) -> bool:
        return nonce.data in self._seen

    def __len__(self) -> int:
        return len(self._seen)


def fresh_nonce(rng: Rng, ledger: NonceLedger | None = None) -> Nonce:
    """Draw a nonce from the rng, recording it in the ledger when given."""
    nonce = rng.nonce()
    if ledger is not None:
        ledger.record(nonce)
    return nonce


# ---------------------------------------------------------------------------
# Authenticated encryption
# ---------------------------------------------------------------------------

class AeadScheme:
    """Contract shared by both instantiations.

    encrypt is randomized (distinct bodies for repeated inputs); decrypt
    succeeds only under the encrypting key with the same context, failing
    with AuthenticationFailure otherwise.
    """

    name: str = "abstract"

    def encrypt(self, key: SymmetricKey, plaintext: bytes, context: bytes, rng: Rng) -> Ciphertext:
        raise NotImplementedError

    def decrypt(self, key: SymmetricKey, ct: Ciphertext, context: bytes) -> bytes:
        raise NotImplementedError


class StreamHmacAead(AeadScheme):
    """Deterministic test scheme: SHA-256 keystream, HMAC-SHA256 tag.

    Body layout: iv(16) || ciphertext || tag(32). The tag covers
    (context length, context, iv, ciphertext) under the raw key, so a wrong
    key, altered body, or altered context all fail the same way.
    """

    name = "hmac"
    _IV_SIZE = 16
    _TAG_SIZE = 32

    @staticmethod
    def _keystream(key: bytes, iv: bytes, length: int) -> bytes:
        out = bytearray()
        counter = 0
        while len(out) < length:
            out.extend(hashlib.sha256(key + iv + struct.pack(">Q", counter)).digest())
            counter += 1
        return bytes(out[:length])

    @classmethod
    def _tag(cls, key: bytes, context: bytes, iv: bytes, body: bytes) -> bytes:
        material = struct.pack(">I", len(context)) + context + iv + body
        return hmac.new(key, material, hashlib.sha256).digest()

    def encrypt(self, key: SymmetricKey, plaintext: bytes, context: bytes, rng: Rng) -> Ciphertext:
        iv = rng.bytes(self._IV_SIZE)
        stream = self._keystream(key.data, iv, len(plaintext))
        enc = bytes(a ^ b for a, b in zip(plaintext, stream))
        tag = self._tag(key.data, context, iv, enc)
        return Ciphertext(iv + enc + tag, binding=context)

    def decrypt(self, key: SymmetricKey, ct: Ciphertext, context: bytes) -> bytes:
        if len(ct.body) < self._IV_SIZE + self._TAG_SIZE:
            raise AuthenticationFailure("ciphertext too short")
        iv = ct.body[:self._IV_SIZE]
        enc = ct.body[self._IV_SIZE:-self._TAG_SIZE]
        tag = ct.body[-self._TAG_SIZE:]
        expected = self._tag(key.data, context, iv, enc)
        if not hmac.compare_digest(tag, expected):
            raise AuthenticationFailure("authentication failed")
        stream = self._keystream(key.data, iv, len(enc))
        return bytes(a ^ b for a, b in zip(enc, stream))


class CommittingAesGcm(AeadScheme):
    """AES-256-GCM with an explicit key-commitment tag.

    Body layout: iv(12) || commit(16) || gcm ciphertext+tag. commit =
    HMAC-SHA256(key, info || iv)[:16], checked before GCM decryption so a
    wrong key is rejected even where GCM alone would not commit to it.
    """

    name = "aes"
    _IV_SIZE = 12
    _COMMIT_SIZE = 16

    @classmethod
    def _commitment(cls, key: bytes, iv: bytes) -> bytes:
        return hmac.new(key, _COMMIT_TAG_INFO + iv, hashlib.sha256).digest()[:cls._COMMIT_SIZE]

    def encrypt(self, key: SymmetricKey, plaintext: bytes, context: bytes, rng: Rng) -> Ciphertext:
        iv = rng.bytes(self._IV_SIZE)
        commit = self._commitment(key.data, iv)
        enc = AESGCM(key.data).encrypt(iv, plaintext, context)
        return Ciphertext(iv + commit + enc, binding=context)

    def decrypt(self, key: SymmetricKey, ct: Ciphertext, context: bytes) -> bytes:
        header = self._IV_SIZE + self._COMMIT_SIZE
        if len(ct.body) < header:
            raise AuthenticationFailure("ciphertext too short")
        iv = ct.body[:self._IV_SIZE]
        commit = ct.body[self._IV_SIZE:header]
        if not hmac.compare_digest(commit, self._commitment(key.data, iv)):
            raise AuthenticationFailure("authentication failed")
        try:
            return AESGCM(key.data).decrypt(iv, ct.body[header:], context)
        except InvalidTag:
            raise AuthenticationFailure("authentication failed") from None


SCHEMES = {
    StreamHmacAead.name: StreamHmacAead,
    CommittingAesGcm.name: CommittingAesGcm,
}


def make_scheme(name: str) -> AeadScheme:
    try:
        return SCHEMES[name]()
    except KeyError:
        raise CryptoError(f"unknown AE scheme {name!r}") from None


def ae_encrypt(scheme: AeadScheme, key: SymmetricKey, plaintext: bytes,
               context: bytes, rng: Rng) -> Ciphertext:
    return scheme.encrypt(key, plaintext, context, rng)


def ae_decrypt(scheme: AeadScheme, key: SymmetricKey, ct: Ciphertext, context: bytes) -> bytes:
    return scheme.decrypt(key, ct, context)


# ---------------------------------------------------------------------------
# Digest and session-key derivation
# ---------------------------------------------------------------------------

def keyed_digest(key: SymmetricKey, data: bytes) -> bytes:
    """HMAC-SHA256 over data; infeasible to produce without the key."""
    return hmac.new(key.data, data, hashlib.sha256).digest()


def derive_session_key(secret: bytes, transcript_context: bytes) -> SymmetricKey:
    """Deterministic session key from a shared secret and transcript context.

    HKDF-style: extract with a fixed salt, expand with the context. Distinct
    contexts yield independent-looking keys.
    """
    if not secret:
        raise CryptoError("session-key secret must be non-empty")
    prk = hmac.new(_SESSION_KDF_SALT, secret, hashlib.sha256).digest()
    okm = hmac.new(prk, transcript_context + b"\x01", hashlib.sha256).digest()
    return SymmetricKey(okm, origin="session")
