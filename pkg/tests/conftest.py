"""Shared fixtures: small posets, KAS environments, protocol parties."""

from __future__ import annotations

import pytest

from kasauth.crypto import Rng, StreamHmacAead
from kasauth.kas import issue_credential, kas_setup
from kasauth.poset import AuthenticationPolicy, Label, build_intervals
from kasauth.protocols import PartyContext


class Clock:
    """Shared logical clock; per-party views add a skew."""

    def __init__(self, tick: int = 0):
        self.tick = tick

    def advance(self, n: int = 1) -> None:
        self.tick += n

    def view(self, skew: int = 0):
        return lambda: self.tick + skew


class Env:
    """One KAS over a policy plus ready-to-use protocol parties."""

    def __init__(self, policy: AuthenticationPolicy, seed: int = 1,
                 scheme=None, window: int = 2):
        self.policy = policy
        self.scheme = scheme or StreamHmacAead()
        self.rng = Rng(seed)
        self.clock = Clock()
        self.window = window
        self.center, self.pub = kas_setup(
            policy.poset, self.rng, self.scheme,
            root_reserved="root_reserved" in policy.options)
        self._ttp_keys: dict[str, object] = {}

    def party(self, actor_id: str, user: str | None = None, skew: int = 0,
              with_ttp_key: bool = False) -> PartyContext:
        ctx = PartyContext(
            actor_id=actor_id, scheme=self.scheme, rng=self.rng,
            clock=self.clock.view(skew), policy=self.policy, pub=self.pub,
            window=self.window)
        if user is not None:
            label = self.policy.label_of_user(user)
            ctx.credential = issue_credential(self.center, actor_id, label)
        if with_ttp_key:
            key = self.rng.key("shared-ttp")
            self._ttp_keys[actor_id] = key
            ctx.ttp_key = key
        return ctx

    def ttp_party(self, actor_id: str = "trent") -> PartyContext:
        ctx = PartyContext(
            actor_id=actor_id, scheme=self.scheme, rng=self.rng,
            clock=self.clock.view(0), policy=self.policy)
        ctx.ttp_user_keys = dict(self._ttp_keys)
        return ctx

    def share_pair_key(self, a: PartyContext, b: PartyContext) -> None:
        key = self.rng.key("external")
        a.pair_keys[b.actor_id] = key
        b.pair_keys[a.actor_id] = key


def t4_policy(**user_labels) -> AuthenticationPolicy:
    poset = build_intervals(4)
    users = {name: poset.get(label) for name, label in user_labels.items()}
    return AuthenticationPolicy(poset=poset, users=users, services={})


@pytest.fixture
def t4():
    return build_intervals(4)


@pytest.fixture
def iv():
    return Label.interval
