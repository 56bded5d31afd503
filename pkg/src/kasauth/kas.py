"""Iterative key-encrypting KAS over a poset.

Setup draws one fresh key per poset node and publishes, for every cover
edge (x, y), the child key encrypted under the parent key. Anyone holding
the key for x can then derive the key for any y <= x by decrypting along a
cover path, provided every edge token on some path has been published.

Edge tokens bind both endpoint ids in their context, so a token cannot be
spliced between structurally similar edges. Public info objects are
immutable snapshots; withholding produces a new snapshot.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .crypto import AeadScheme, AuthenticationFailure, Ciphertext, Rng, SymmetricKey
from .poset import Label, Poset, UnknownLabelError


class KasError(Exception):
    """Setup or credential-issuance failure."""


class DerivationError(KasError):
    """Key derivation failed.

    reason is one of ``not-dominated`` (target above or incomparable),
    ``missing-edge-token`` (dominated, but no fully published path), or
    ``decryption-failure`` (a published token did not decrypt).
    """

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def edge_context(parent: Label, child: Label) -> bytes:
    return f"kasauth/kas-edge|{parent.id}|{child.id}".encode()


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UserCredential:
    """Everything a claimant holds: one label and its node key."""

    user_id: str
    label: Label
    key: SymmetricKey


@dataclass
class KasTrustedCenter:
    """Trusted-center side: the full node-key map plus issuance log."""

    poset: Poset
    node_keys: dict[Label, SymmetricKey]
    root_reserved: bool = False
    issued: list[UserCredential] = field(default_factory=list)

    def key_of(self, label: Label) -> SymmetricKey:
        self.poset.require(label)
        return self.node_keys[label]


class KasPublicInfo:
    """Published edge tokens; possibly a strict subset of the cover edges."""

    def __init__(self, tokens: Mapping[tuple[Label, Label], Ciphertext]):
        self._tokens = dict(sorted(tokens.items()))
        children: dict[Label, list[Label]] = {}
        for parent, child in self._tokens:
            children.setdefault(parent, []).append(child)
        self._children = {p: tuple(sorted(cs)) for p, cs in children.items()}

    @property
    def edge_tokens(self) -> dict[tuple[Label, Label], Ciphertext]:
        return dict(self._tokens)

    def token(self, parent: Label, child: Label) -> Optional[Ciphertext]:
        return self._tokens.get((parent, child))

    def published_children(self, label: Label) -> tuple[Label, ...]:
        return self._children.get(label, ())

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, edge: tuple[Label, Label]) -> bool:
        return edge in self._tokens

    def with_edges(self, tokens: Mapping[tuple[Label, Label], Ciphertext]) -> "KasPublicInfo":
        merged = dict(self._tokens)
        merged.update(tokens)
        return KasPublicInfo(merged)

    def without_edges(self, edges: Iterable[tuple[Label, Label]]) -> "KasPublicInfo":
        removed = set(edges)
        for edge in sorted(removed):
            if edge not in self._tokens:
                raise KasError(f"unknown edge ({edge[0].id}, {edge[1].id})")
        return KasPublicInfo({e: t for e, t in self._tokens.items() if e not in removed})


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def kas_setup(poset: Poset, rng: Rng, scheme: AeadScheme,
              root_reserved: bool = False) -> tuple[KasTrustedCenter, KasPublicInfo]:
    """Fresh pairwise-distinct node keys plus one token per cover edge."""
    node_keys: dict[Label, SymmetricKey] = {}
    seen: set[bytes] = set()
    for label in poset.labels:
        key = rng.key("kas-node")
        while key.data in seen:
            key = rng.key("kas-node")
        seen.add(key.data)
        node_keys[label] = key
    tokens = {
        (parent, child): scheme.encrypt(
            node_keys[parent], node_keys[child].data, edge_context(parent, child), rng)
        for parent, child in poset.cover_edges
    }
    center = KasTrustedCenter(poset=poset, node_keys=node_keys, root_reserved=root_reserved)
    return center, KasPublicInfo(tokens)


def issue_credential(center: KasTrustedCenter, user_id: str, label: Label) -> UserCredential:
    center.poset.require(label)
    if center.root_reserved and not center.poset.parents(label):
        raise KasError(f"label {label.id!r} is maximal and reserved for the trusted center")
    credential = UserCredential(user_id=user_id, label=label, key=center.node_keys[label])
    center.issued.append(credential)
    return credential


@dataclass(frozen=True)
class DerivationTrace:
    key: SymmetricKey
    path: tuple[Label, ...]
    edges: tuple[tuple[Label, Label], ...]

    @property
    def decryptions(self) -> int:
        return len(self.edges)


def derive_key_trace(pub: KasPublicInfo, poset: Poset, have_label: Label,
                     have_key: SymmetricKey, target: Label,
                     scheme: AeadScheme) -> DerivationTrace:
    """Derive the target node key, reporting the path taken.

    The search runs over published edges only (shortest path, ties broken
    toward the lexicographically least child id), so a withheld edge on the
    canonical cover path does not block derivation when another published
    path exists.
    """
    poset.require(have_label)
    poset.require(target)
    if target == have_label:
        return DerivationTrace(key=have_key, path=(have_label,), edges=())
    if not poset.leq(target, have_label):
        raise DerivationError("not-dominated", f"{target.id} is not below {have_label.id}")
    path = _published_path(pub, have_label, target)
    if path is None:
        raise DerivationError(
            "missing-edge-token", f"no published path from {have_label.id} to {target.id}")
    key = have_key
    edges: list[tuple[Label, Label]] = []
    for parent, child in zip(path, path[1:]):
        token = pub.token(parent, child)
        assert token is not None
        try:
            raw = scheme.decrypt(key, token, edge_context(parent, child))
        except AuthenticationFailure:
            raise DerivationError(
                "decryption-failure", f"token for ({parent.id}, {child.id})") from None
        key = SymmetricKey(raw, origin="kas-node")
        edges.append((parent, child))
    return DerivationTrace(key=key, path=tuple(path), edges=tuple(edges))


def derive_key(pub: KasPublicInfo, poset: Poset, have_label: Label,
               have_key: SymmetricKey, target: Label, scheme: AeadScheme) -> SymmetricKey:
    return derive_key_trace(pub, poset, have_label, have_key, target, scheme).key


def _published_path(pub: KasPublicInfo, frm: Label, to: Label) -> Optional[list[Label]]:
    dist = {to: 0}
    queue = deque([to])
    parents: dict[Label, list[Label]] = {}
    for parent, child in pub.edge_tokens:
        parents.setdefault(child, []).append(parent)
    while queue:
        cur = queue.popleft()
        for parent in parents.get(cur, ()):
            if parent not in dist:
                dist[parent] = dist[cur] + 1
                queue.append(parent)
    if frm not in dist:
        return None
    path = [frm]
    cur = frm
    while cur != to:
        step = dist[cur] - 1
        cur = min(c for c in pub.published_children(cur) if dist.get(c) == step)
        path.append(cur)
    return path


def withhold_edges(pub: KasPublicInfo,
                   edges: Iterable[tuple[Label, Label]]) -> KasPublicInfo:
    """Public info lacking the given tokens; the original is unchanged."""
    return pub.without_edges(edges)


def export_public_info(pub: KasPublicInfo) -> str:
    """Deterministic, sorted textual listing of edge tokens for diffing."""
    lines = [
        f"{parent.id} -> {child.id} : {token.body.hex()}"
        for (parent, child), token in sorted(pub.edge_tokens.items())
    ]
    return "\n".join(lines) + ("\n" if lines else "")
