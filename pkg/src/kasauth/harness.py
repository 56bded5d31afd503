"""Deterministic simulator: actors, message bus, adversary, scenario runner.

A scenario is a line-oriented script: an actor roster over a policy, then an
ordered list of directives (start sessions, advance the logical clock,
broadcast TIKCs, mint and redeem time-release tokens, adversary actions)
plus expected verdicts. Runs are single-threaded; all randomness flows from
one seeded source, so identical (scenario, seed) pairs produce byte-identical
logs.

The adversary is a scripted interposer on the bus (observe, drop, replay,
reorder, inject, substitute-field). It reads every delivered message but
never an honest actor's keys. Deliveries caused by adversary action are
marked tainted; an accept verdict produced while consuming a tainted message
is the attack-suite failure signal.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .crypto import Rng, fresh_nonce, make_scheme
from .kas import KasError, export_public_info, issue_credential, kas_setup
from .poset import AuthenticationPolicy, Label, PosetError, parse_policy
from .protocols import AUTH_DECISIONS, PartyContext, SessionConfig, SessionState, step
from .timerelease import (
    TimeReleaseError,
    TimeReleaseSystem,
    auto_edges,
    build_time_release,
    mint_token,
    redeem_token,
    tts_broadcast,
    verify_redemption,
)
from . import wire
from .wire import (
    CLAIMANT,
    TTP,
    VERIFIER,
    Field,
    ProtocolMessage,
    Verdict,
    f_id,
    f_label,
    f_text,
    f_tick,
)

ACTOR_ROLES = {
    "trusted-center", "claimant", "verifier", "tts", "ttp", "bulletin-board", "adversary",
}
_SESSION_ROLES = {"claimant", "verifier", "adversary"}


class ScenarioError(ValueError):
    """Scenario parse or execution error."""

    def __init__(self, message: str, line_no: int = 0):
        super().__init__(f"line {line_no}: {message}" if line_no else message)
        self.line_no = line_no


# ---------------------------------------------------------------------------
# Scenario model and grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActorSpec:
    actor_id: str
    role: str
    user: Optional[str] = None
    skew: int = 0


@dataclass(frozen=True)
class Directive:
    op: str
    args: tuple
    line_no: int = 0


@dataclass(frozen=True)
class Expectation:
    session: str
    actor: str
    state: str
    reason: Optional[str] = None

    def matches(self, verdict: Verdict) -> bool:
        if verdict.state != self.state:
            return False
        return self.reason is None or verdict.reason == self.reason

    def render(self) -> str:
        want = self.state if self.reason is None else f"{self.state}:{self.reason}"
        return f"{self.session} {self.actor} {want}"


@dataclass
class Scenario:
    policy_text: str
    actors: list[ActorSpec]
    directives: list[Directive]
    expectations: list[Expectation]
    scheme: str = "hmac"
    window: int = 2


def parse_scenario(text: str) -> Scenario:
    """Parse the scenario grammar (see README for the full directive list)."""
    actors: list[ActorSpec] = []
    directives: list[Directive] = []
    expectations: list[Expectation] = []
    policy_lines: list[str] = []
    in_policy = False
    have_policy = False
    scheme = "hmac"
    window = 2

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw if in_policy else raw.split("#", 1)[0]
        line = line.strip()
        if not line:
            continue
        if in_policy:
            if line == "policy end":
                in_policy = False
            else:
                policy_lines.append(raw)
            continue
        parts = line.split()
        op = parts[0]
        if op == "policy":
            if have_policy:
                raise ScenarioError("policy already declared", line_no)
            if parts[1:] == ["begin"]:
                in_policy = True
                have_policy = True
            elif len(parts) == 3 and parts[1] == "file":
                raise ScenarioError(
                    "unresolved 'policy file' reference; inline the policy", line_no)
            else:
                raise ScenarioError("usage: policy begin ... policy end", line_no)
        elif op == "actor":
            actors.append(_parse_actor(parts, line_no))
        elif op == "option":
            if len(parts) == 3 and parts[1] == "scheme":
                scheme = parts[2]
            elif len(parts) == 3 and parts[1] == "window":
                window = _int(parts[2], line_no)
            else:
                raise ScenarioError("usage: option scheme <name> | option window <n>", line_no)
        elif op == "expect":
            expectations.append(_parse_expect(parts, line_no))
        elif op in ("start", "tick", "tts", "mint", "redeem", "board",
                    "adversary", "pairkey", "trs", "tedge"):
            directives.append(Directive(op, tuple(parts[1:]), line_no))
        else:
            raise ScenarioError(f"unknown directive {op!r}", line_no)

    if in_policy:
        raise ScenarioError("unterminated policy block")
    if not have_policy:
        raise ScenarioError("scenario declares no policy")
    if not actors:
        raise ScenarioError("scenario declares no actors")
    return Scenario(
        policy_text="\n".join(policy_lines), actors=actors, directives=directives,
        expectations=expectations, scheme=scheme, window=window)


def _parse_actor(parts: list[str], line_no: int) -> ActorSpec:
    if len(parts) < 3 or parts[2] not in ACTOR_ROLES:
        roles = ", ".join(sorted(ACTOR_ROLES))
        raise ScenarioError(f"usage: actor <id> <role> [user <id>] [skew <n>]; roles: {roles}",
                            line_no)
    actor_id, role = parts[1], parts[2]
    user = None
    skew = 0
    rest = parts[3:]
    while rest:
        if rest[0] == "user" and len(rest) >= 2:
            user = rest[1]
            rest = rest[2:]
        elif rest[0] == "skew" and len(rest) >= 2:
            skew = _int(rest[1], line_no)
            rest = rest[2:]
        else:
            raise ScenarioError(f"bad actor attribute {rest[0]!r}", line_no)
    return ActorSpec(actor_id=actor_id, role=role, user=user, skew=skew)


def _parse_expect(parts: list[str], line_no: int) -> Expectation:
    if len(parts) != 4:
        raise ScenarioError("usage: expect <session> <actor> <accept|reject[:reason]>", line_no)
    verdict = parts[3]
    reason = None
    if ":" in verdict:
        verdict, reason = verdict.split(":", 1)
    if verdict not in (wire.ACCEPT, wire.REJECT):
        raise ScenarioError(f"bad verdict {parts[3]!r}", line_no)
    return Expectation(session=parts[1], actor=parts[2], state=verdict, reason=reason)


def _int(text: str, line_no: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ScenarioError(f"expected integer, got {text!r}", line_no) from None


# ---------------------------------------------------------------------------
# Simulation state
# ---------------------------------------------------------------------------

@dataclass
class Actor:
    spec: ActorSpec
    ctx: PartyContext
    sessions: dict[str, SessionState] = field(default_factory=dict)


@dataclass
class Envelope:
    message: ProtocolMessage
    tainted: bool = False
    note: str = ""


@dataclass
class InterceptPlan:
    """Rewrite the payload of one future delivery (attack-suite hook).

    Either substitutes the whole field tuple or swaps every label field for
    ``label_swap``.
    """

    session: str
    index: int
    fields: tuple[Field, ...] = ()
    label_swap: Optional[Label] = None
    note: str = ""
    used: bool = False

    def apply(self, fields: tuple[Field, ...]) -> tuple[Field, ...]:
        if self.label_swap is not None:
            return tuple(
                f_label(self.label_swap) if f.kind == wire.LABEL else f
                for f in fields)
        return self.fields


@dataclass
class SessionRecord:
    session: str
    protocol: int
    claimant: str
    verifier: str
    ttp: Optional[str] = None
    config: Optional[SessionConfig] = None
    verdicts: dict[str, Verdict] = field(default_factory=dict)  # 14/15 only
    token_id: Optional[str] = None

    def parties(self) -> list[str]:
        out = [self.claimant, self.verifier]
        if self.ttp:
            out.append(self.ttp)
        return out


@dataclass
class RunResult:
    ok: bool
    log: str
    expectations: list[tuple[str, bool, str]]  # (rendered, ok, observed)
    verdicts: dict[str, dict[str, str]]
    tainted_accepts: list[tuple[str, str]]


class Simulation:
    """Single-threaded event loop over a parsed scenario."""

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        try:
            self.policy: AuthenticationPolicy = parse_policy(scenario.policy_text)
        except PosetError as exc:
            raise ScenarioError(f"policy: {exc}") from None
        self.rng = Rng(seed)
        self.scheme = make_scheme(scenario.scheme)
        self.tick = 0
        self.lines: list[str] = []
        self.queue: deque[Envelope] = deque()
        self.pending: list[tuple[str, tuple]] = []  # scripted adversary actions
        self.intercepts: list[InterceptPlan] = []
        self.records: dict[tuple[str, int], ProtocolMessage] = {}
        self.delivered: list[ProtocolMessage] = []
        self.corpus: list[ProtocolMessage] = []  # honest deliveries only
        self.sessions: dict[str, SessionRecord] = {}
        self.tainted_accepts: list[tuple[str, str]] = []
        self.trs: Optional[TimeReleaseSystem] = None
        self._trs_pending: Optional[int] = None
        self._trs_auto = False
        self._tedges: list[tuple[Label, int]] = []

        root_reserved = "root_reserved" in self.policy.options
        self.center, self.pub = kas_setup(
            self.policy.poset, self.rng, self.scheme, root_reserved=root_reserved)
        self.actors: dict[str, Actor] = {}
        for spec in scenario.actors:
            if spec.actor_id in self.actors:
                raise ScenarioError(f"duplicate actor {spec.actor_id!r}")
            ctx = PartyContext(
                actor_id=spec.actor_id, scheme=self.scheme, rng=self.rng,
                clock=(lambda skew=spec.skew: self.tick + skew),
                policy=self.policy, pub=self.pub, window=scenario.window)
            if spec.user is not None:
                label = self.policy.label_of_user(spec.user)
                ctx.credential = issue_credential(self.center, spec.actor_id, label)
            self.actors[spec.actor_id] = Actor(spec=spec, ctx=ctx)
        ttp_actors = [a for a in self.actors.values() if a.spec.role == "ttp"]
        self.default_ttp = ttp_actors[0].spec.actor_id if len(ttp_actors) == 1 else None
        for ttp_actor in ttp_actors:
            for other in self.actors.values():
                if other.spec.role in _SESSION_ROLES:
                    key = self.rng.key("shared-ttp")
                    ttp_actor.ctx.ttp_user_keys[other.spec.actor_id] = key
                    other.ctx.ttp_key = key

    # -- logging -------------------------------------------------------------

    def log(self, text: str) -> None:
        self.lines.append(f"{self.tick:>4} | {text}")

    def _log_delivery(self, env: Envelope, updates: list[str]) -> None:
        m = env.message
        taint = f" [{env.note}]" if env.note else ""
        verdicts = "; ".join(updates) if updates else "-"
        self.log(f"p{m.protocol:02d} m{m.index} | {m.sender} -> {m.receiver} | "
                 f"{m.session} | {m.summary()}{taint} | {verdicts}")

    # -- directive execution ---------------------------------------------------

    def run_script(self) -> RunResult:
        for directive in self.scenario.directives:
            self.execute(directive)
        return self.finish()

    def execute(self, directive: Directive) -> None:
        handler = getattr(self, f"_op_{directive.op}", None)
        if handler is None:
            raise ScenarioError(f"unknown directive {directive.op!r}", directive.line_no)
        handler(directive)
        if directive.op != "adversary":
            # Adversary actions only arm or enqueue; they take effect at the
            # next delivery opportunity, so several can stack in flight.
            self.drain()

    def finish(self) -> RunResult:
        self.drain()
        for record in self.sessions.values():
            for actor_id in record.parties():
                verdict = self.verdict_of(record, actor_id)
                if verdict.pending:
                    self._set_verdict(record, actor_id, Verdict.reject("incomplete"))
        self.lines.append("== report ==")
        verdict_map: dict[str, dict[str, str]] = {}
        for sid in sorted(self.sessions):
            record = self.sessions[sid]
            rendered = " ".join(
                f"{actor}={self.verdict_of(record, actor).render()}"
                for actor in record.parties())
            verdict_map[sid] = {
                actor: self.verdict_of(record, actor).render()
                for actor in record.parties()}
            self.lines.append(f"{sid} p{record.protocol:02d} {rendered}")
        results: list[tuple[str, bool, str]] = []
        ok = True
        for exp in self.scenario.expectations:
            record = self.sessions.get(exp.session)
            if record is None or exp.actor not in record.parties():
                observed = "no-such-session"
                good = False
            else:
                verdict = self.verdict_of(record, exp.actor)
                observed = verdict.render()
                good = exp.matches(verdict)
            ok = ok and good
            results.append((exp.render(), good, observed))
            self.lines.append(
                f"expect {exp.render()} : {'ok' if good else 'FAIL (' + observed + ')'}")
        self.lines.append(f"result: {'pass' if ok else 'fail'}")
        return RunResult(ok=ok, log="\n".join(self.lines) + "\n",
                         expectations=results, verdicts=verdict_map,
                         tainted_accepts=list(self.tainted_accepts))

    # -- verdict plumbing -------------------------------------------------------

    def verdict_of(self, record: SessionRecord, actor_id: str) -> Verdict:
        actor = self.actors.get(actor_id)
        if actor is not None and record.session in actor.sessions:
            return actor.sessions[record.session].verdict
        return record.verdicts.get(actor_id, Verdict())

    def _set_verdict(self, record: SessionRecord, actor_id: str, verdict: Verdict) -> None:
        actor = self.actors.get(actor_id)
        if actor is not None and record.session in actor.sessions:
            state = actor.sessions[record.session]
            if state.verdict.pending:
                state.verdict = verdict
        elif actor_id not in record.verdicts or record.verdicts[actor_id].pending:
            record.verdicts[actor_id] = verdict

    # -- directives ---------------------------------------------------------------

    def _actor(self, actor_id: str, line_no: int = 0) -> Actor:
        actor = self.actors.get(actor_id)
        if actor is None:
            raise ScenarioError(f"undeclared actor {actor_id!r}", line_no)
        return actor

    def _op_tick(self, d: Directive) -> None:
        amount = _int(d.args[0], d.line_no) if d.args else 1
        self.tick += amount
        self.log(f"clock advanced by {amount}")

    def _op_pairkey(self, d: Directive) -> None:
        if len(d.args) != 2:
            raise ScenarioError("usage: pairkey <a> <b>", d.line_no)
        self._provision_pair(d.args[0], d.args[1], d.line_no)

    def _provision_pair(self, a: str, b: str, line_no: int = 0) -> None:
        actor_a = self._actor(a, line_no)
        actor_b = self._actor(b, line_no)
        key = self.rng.key("external")
        actor_a.ctx.pair_keys[b] = key
        actor_b.ctx.pair_keys[a] = key
        self.log(f"pair key provisioned for {a},{b}")

    def _op_trs(self, d: Directive) -> None:
        if len(d.args) < 2 or d.args[0] != "span":
            raise ScenarioError("usage: trs span <n> [auto]", d.line_no)
        if self.trs is not None or self._trs_pending is not None:
            raise ScenarioError("time-release system already declared", d.line_no)
        self._trs_pending = _int(d.args[1], d.line_no)
        self._trs_auto = len(d.args) > 2 and d.args[2] == "auto"
        if self._trs_auto:
            self._build_trs(d.line_no)

    def _op_tedge(self, d: Directive) -> None:
        if self._trs_pending is None:
            raise ScenarioError("tedge before trs", d.line_no)
        if len(d.args) != 2:
            raise ScenarioError("usage: tedge <upper-label> <t>", d.line_no)
        label = Label.parse(d.args[0])
        self._tedges.append((label, _int(d.args[1], d.line_no)))

    def _ensure_trs(self, line_no: int) -> TimeReleaseSystem:
        if self.trs is None:
            if self._trs_pending is not None:
                self._build_trs(line_no)
            else:
                raise ScenarioError("no time-release system declared (trs span <n>)", line_no)
        return self.trs

    def _build_trs(self, line_no: int) -> None:
        span = self._trs_pending
        upper = self.policy.poset
        try:
            if self._trs_auto:
                edges = auto_edges(upper, span)
            else:
                edges = tuple(
                    (upper.get(lab.id), Label.mirrored(Label.interval(t, t)))
                    for lab, t in self._tedges)
            self.trs = build_time_release(
                upper, span, edges, self.rng, self.scheme,
                root_reserved="root_reserved" in self.policy.options)
        except (TimeReleaseError, PosetError) as exc:
            raise ScenarioError(f"time-release build failed: {exc}", line_no) from None
        for actor_id in sorted(self.actors):
            actor = self.actors[actor_id]
            spec = actor.spec
            ctx = actor.ctx
            ctx.pub = self.trs.released
            if spec.user is not None:
                label = self.policy.label_of_user(spec.user)
                ctx.credential = issue_credential(self.trs.center, spec.actor_id, label)
        self.log(f"time-release system over {len(self.trs.combined)} nodes, "
                 f"{len(self.trs.temporal_edges)} temporal edges withheld")

    def _op_tts(self, d: Directive) -> None:
        if len(d.args) != 2 or d.args[0] != "broadcast":
            raise ScenarioError("usage: tts broadcast <t>", d.line_no)
        trs = self._ensure_trs(d.line_no)
        t = _int(d.args[1], d.line_no)
        try:
            tikc = tts_broadcast(trs, t)
        except TimeReleaseError as exc:
            raise ScenarioError(f"broadcast failed: {exc}", d.line_no) from None
        for actor in self.actors.values():
            actor.ctx.pub = trs.released
        self.log(f"tts broadcast t={t} tikc-size={len(tikc.tokens)}")

    def _op_mint(self, d: Directive) -> None:
        args = list(d.args)
        if len(args) < 4 or args[2] != "window":
            raise ScenarioError("usage: mint <token-id> <verifier> window [t0,t1] "
                                "[label <label>]", d.line_no)
        token_id, verifier_id = args[0], args[1]
        trs = self._ensure_trs(d.line_no)
        verifier = self._actor(verifier_id, d.line_no)
        bounds = Label.parse(args[3])
        if bounds.kind != "interval":
            raise ScenarioError(f"window must be an interval, got {args[3]!r}", d.line_no)
        t0, t1 = bounds.interval_bounds
        challenge = None
        if len(args) >= 6 and args[4] == "label":
            challenge = self.policy.poset.get(Label.parse(args[5]).id)
        try:
            token = mint_token(
                trs, verifier_id, t0, t1, self.rng, self.scheme, token_id=token_id,
                challenge_label=challenge, verifier_credential=verifier.ctx.credential)
        except TimeReleaseError as exc:
            raise ScenarioError(f"mint failed: {exc}", d.line_no) from None
        suffix = f" label={challenge.id}" if challenge else ""
        self.log(f"board: token {token.token_id} published by {verifier_id} "
                 f"window={token.window.id}{suffix}")

    def _op_redeem(self, d: Directive) -> None:
        if len(d.args) != 3:
            raise ScenarioError("usage: redeem <session> <claimant> <token-id>", d.line_no)
        sid, claimant_id, token_id = d.args
        self.start_redemption(sid, claimant_id, token_id, d.line_no)

    def start_redemption(self, sid: str, claimant_id: str, token_id: str,
                         line_no: int = 0) -> SessionRecord:
        trs = self._ensure_trs(line_no)
        claimant = self._actor(claimant_id, line_no)
        token = trs.find_token(token_id)
        if token is None:
            raise ScenarioError(f"unknown token {token_id!r}", line_no)
        if sid in self.sessions:
            raise ScenarioError(f"duplicate session {sid!r}", line_no)
        record = SessionRecord(session=sid, protocol=token.protocol,
                               claimant=claimant_id, verifier=token.issuer,
                               token_id=token_id)
        self.sessions[sid] = record
        if claimant.ctx.credential is None:
            self._set_verdict(record, claimant_id, Verdict.reject("cannot-derive"))
            self.log(f"redeem {sid}: {claimant_id} has no credential")
            return record
        claimant_nonce = fresh_nonce(self.rng, claimant.ctx.nonce_ledger)
        try:
            result = redeem_token(trs, claimant.ctx.credential, token,
                                  claimant_nonce, self.scheme, self.rng)
        except TimeReleaseError as exc:
            self._set_verdict(record, claimant_id, Verdict.reject(exc.reason))
            self.log(f"redeem {sid}: failed ({exc.reason})")
            return record
        self._set_verdict(record, claimant_id, Verdict.accept())
        message = ProtocolMessage(
            protocol=result.protocol, index=3, sender=claimant_id,
            receiver=token.issuer, session=sid, fields=result.fields)
        self.queue.append(Envelope(message))
        return record

    def _op_board(self, d: Directive) -> None:
        if tuple(d.args) != ("dump",):
            raise ScenarioError("usage: board dump", d.line_no)
        trs = self._ensure_trs(d.line_no)
        if not trs.repository:
            self.log("board: empty")
        for token in trs.repository:
            suffix = f" label={token.challenge_label.id}" if token.challenge_label else ""
            self.log(f"board: {token.token_id} issuer={token.issuer} "
                     f"window={token.window.id}{suffix} body={token.body.body.hex()[:16]}")

    def _op_start(self, d: Directive) -> None:
        args = list(d.args)
        if len(args) < 4:
            raise ScenarioError(
                "usage: start <session> <protocol> <claimant> <verifier> [options]", d.line_no)
        sid, proto_text, claimant_id, verifier_id = args[:4]
        protocol = _int(proto_text, d.line_no)
        if protocol in (14, 15):
            raise ScenarioError(
                "protocols 14/15 run via mint/tts broadcast/redeem directives", d.line_no)
        if sid in self.sessions:
            raise ScenarioError(f"duplicate session {sid!r}", d.line_no)
        claimant = self._actor(claimant_id, d.line_no)
        verifier = self._actor(verifier_id, d.line_no)
        options = self._parse_start_options(args[4:], d.line_no)
        if options.get("freshness") not in (None, "timestamp", "sequence"):
            raise ScenarioError("freshness must be timestamp or sequence", d.line_no)
        ttp_id = options.pop("ttp", None)
        if protocol in (16, 17) and ttp_id is None:
            ttp_id = self.default_ttp
            if ttp_id is None:
                raise ScenarioError("protocols 16/17 need a ttp actor", d.line_no)
        if options.get("claim_as") and claimant.spec.role != "adversary":
            raise ScenarioError("claim-as is an adversary-only deviation", d.line_no)
        if protocol <= 5 and verifier_id not in claimant.ctx.pair_keys:
            self._provision_pair(claimant_id, verifier_id, d.line_no)
        cfg = SessionConfig(
            protocol=protocol, session=sid, claimant=claimant_id,
            verifier=verifier_id, ttp=ttp_id, **options)
        self.start_session(cfg)

    def start_session(self, cfg: SessionConfig) -> SessionRecord:
        """Register states for every role and kick the claimant."""
        sid = cfg.session
        if sid in self.sessions:
            raise ScenarioError(f"duplicate session {sid!r}")
        claimant = self._actor(cfg.claimant)
        verifier = self._actor(cfg.verifier)
        record = SessionRecord(session=sid, protocol=cfg.protocol, claimant=cfg.claimant,
                               verifier=cfg.verifier, ttp=cfg.ttp, config=cfg)
        self.sessions[sid] = record
        claimant.sessions[sid] = SessionState(cfg, CLAIMANT)
        verifier.sessions[sid] = SessionState(cfg, VERIFIER)
        if cfg.ttp is not None:
            self._actor(cfg.ttp).sessions[sid] = SessionState(cfg, TTP)
        self.log(f"start {sid} p{cfg.protocol:02d} {cfg.claimant} -> {cfg.verifier}")
        outbound = step(claimant.sessions[sid], claimant.ctx, None)
        if outbound is not None:
            self.queue.append(Envelope(outbound))
        return record

    def _parse_start_options(self, rest: list[str], line_no: int) -> dict:
        options: dict = {}
        i = 0
        flags = {"reckless": "reckless"}
        takes_label = {"v": "v", "w": "w", "session-key-label": "session_key_label"}
        takes_str = {"service": "service", "freshness": "freshness",
                     "claim-as": "claim_as", "ttp": "ttp"}
        while i < len(rest):
            token = rest[i]
            if token in flags:
                options[flags[token]] = True
                i += 1
            elif token in takes_label and i + 1 < len(rest):
                options[takes_label[token]] = Label.parse(rest[i + 1])
                i += 2
            elif token in takes_str and i + 1 < len(rest):
                options[takes_str[token]] = rest[i + 1]
                i += 2
            else:
                raise ScenarioError(f"bad start option {token!r}", line_no)
        return options

    # -- adversary -----------------------------------------------------------------

    def _op_adversary(self, d: Directive) -> None:
        if not d.args:
            raise ScenarioError("empty adversary action", d.line_no)
        kind = d.args[0]
        rest = list(d.args[1:])
        if kind in ("drop", "substitute", "observe", "reorder", "replace"):
            if kind == "replace" and ("with" not in rest or len(rest) < rest.index("with") + 3):
                raise ScenarioError(
                    "usage: adversary replace [session <sid>] [index <i>] "
                    "with <sid> <index>", d.line_no)
            self.pending.append((kind, tuple(rest)))
            self.log(f"adversary armed: {kind} {' '.join(rest)}".rstrip())
        elif kind == "replay":
            self._adversary_replay(rest, d.line_no)
        elif kind == "inject":
            self._adversary_inject(rest, d.line_no)
        else:
            raise ScenarioError(f"unknown adversary action {kind!r}", d.line_no)

    def _adversary_replay(self, rest: list[str], line_no: int) -> None:
        if len(rest) < 2:
            raise ScenarioError(
                "usage: adversary replay <session> <index> [session <sid>] "
                "[index <i>] [to <actor>] [as <actor>]", line_no)
        source = self.records.get((rest[0], _int(rest[1], line_no)))
        if source is None:
            raise ScenarioError(f"no recorded message {rest[0]}.{rest[1]}", line_no)
        overrides = dict(zip(rest[2::2], rest[3::2]))
        message = ProtocolMessage(
            protocol=source.protocol,
            index=_int(overrides["index"], line_no) if "index" in overrides else source.index,
            sender=overrides.get("as", source.sender),
            receiver=overrides.get("to", source.receiver),
            session=overrides.get("session", source.session),
            fields=source.fields)
        self.queue.append(Envelope(message, tainted=True,
                                   note=f"replay {rest[0]}.{rest[1]}"))
        self.log(f"adversary: replayed {rest[0]}.{rest[1]} into "
                 f"{message.session} m{message.index}")

    def _adversary_inject(self, rest: list[str], line_no: int) -> None:
        if len(rest) < 8 or rest[2] != "from" or rest[4] != "to" or rest[6] != "session":
            raise ScenarioError(
                "usage: adversary inject <proto> <index> from <a> to <b> session <sid> "
                "[label <l>|text <t>|tick <n>|id <x>]...", line_no)
        fields: list[Field] = []
        i = 8
        while i < len(rest):
            kind, value = rest[i], rest[i + 1] if i + 1 < len(rest) else None
            if value is None:
                raise ScenarioError(f"field {kind!r} needs a value", line_no)
            if kind == "label":
                fields.append(f_label(Label.parse(value)))
            elif kind == "text":
                fields.append(f_text(value))
            elif kind == "tick":
                fields.append(f_tick(_int(value, line_no)))
            elif kind == "id":
                fields.append(f_id(value))
            else:
                raise ScenarioError(f"unsupported inject field {kind!r}", line_no)
            i += 2
        message = ProtocolMessage(
            protocol=_int(rest[0], line_no), index=_int(rest[1], line_no),
            sender=rest[3], receiver=rest[5], session=rest[7], fields=tuple(fields))
        self.queue.append(Envelope(message, tainted=True, note="injected"))
        self.log(f"adversary: injected p{message.protocol:02d} m{message.index} "
                 f"into {message.session}")

    def _apply_pending(self, env: Envelope) -> Optional[Envelope]:
        """Consume the first armed adversary action matching this delivery."""
        for i, (kind, args) in enumerate(self.pending):
            source_key = None
            if kind == "substitute":
                params = dict(zip(args[2::2], args[3::2]))
            elif kind == "replace":
                split = args.index("with")
                params = dict(zip(args[:split][0::2], args[:split][1::2]))
                source_key = (args[split + 1], int(args[split + 2]))
            else:
                params = dict(zip(args[0::2], args[1::2]))
            if params.get("from") is not None and env.message.sender != params["from"]:
                continue
            if params.get("to") is not None and env.message.receiver != params["to"]:
                continue
            if params.get("session") is not None and env.message.session != params["session"]:
                continue
            if params.get("index") is not None and env.message.index != int(params["index"]):
                continue
            if kind == "reorder" and not self.queue:
                continue
            del self.pending[i]
            if kind == "reorder":
                swapped = self.queue.popleft()
                env.tainted = True
                env.note = (env.note + " reordered").strip()
                self.queue.appendleft(env)
                self.log("adversary: swapped next two deliveries")
                swapped.tainted = True
                swapped.note = (swapped.note + " reordered").strip()
                return swapped
            if kind == "drop":
                self.log(f"adversary: dropped p{env.message.protocol:02d} "
                         f"m{env.message.index} {env.message.sender} -> "
                         f"{env.message.receiver}")
                return None
            if kind == "observe":
                self.log(f"adversary: observed {env.message.session} "
                         f"m{env.message.index} | {env.message.summary()}")
                return env
            if kind == "replace":
                source = self.records.get(source_key)
                if source is None:
                    raise ScenarioError(
                        f"adversary replace: no recorded message {source_key}")
                return Envelope(
                    message=ProtocolMessage(
                        protocol=env.message.protocol, index=env.message.index,
                        sender=env.message.sender, receiver=env.message.receiver,
                        session=env.message.session, fields=source.fields),
                    tainted=True,
                    note=f"payload replaced with {source_key[0]}.{source_key[1]}")
            if kind == "substitute":
                if len(args) < 2 or args[0] != "label":
                    raise ScenarioError("usage: adversary substitute label <l> "
                                        "[from <a>] [to <b>]")
                new_label = Label.parse(args[1])
                fields = tuple(
                    f_label(new_label) if f.kind == wire.LABEL else f
                    for f in env.message.fields)
                env = Envelope(
                    message=ProtocolMessage(
                        protocol=env.message.protocol, index=env.message.index,
                        sender=env.message.sender, receiver=env.message.receiver,
                        session=env.message.session, fields=fields),
                    tainted=True, note=f"label substituted -> {new_label.id}")
                return env
        return env

    # -- delivery loop -----------------------------------------------------------------

    def drain(self) -> None:
        guard = 0
        while self.queue:
            guard += 1
            if guard > 10000:
                raise ScenarioError("message storm: delivery loop did not quiesce")
            env = self.queue.popleft()
            applied = self._apply_pending(env)
            if applied is None:
                continue
            env = applied
            for plan in self.intercepts:
                if not plan.used and plan.session == env.message.session \
                        and plan.index == env.message.index:
                    plan.used = True
                    env = Envelope(
                        message=ProtocolMessage(
                            protocol=env.message.protocol, index=env.message.index,
                            sender=env.message.sender, receiver=env.message.receiver,
                            session=env.message.session,
                            fields=plan.apply(env.message.fields)),
                        tainted=True, note=plan.note or "substituted payload")
                    break
            self._deliver(env)

    def _deliver(self, env: Envelope) -> None:
        message = env.message
        self.records[(message.session, message.index)] = message
        self.delivered.append(message)
        if not env.tainted:
            self.corpus.append(message)
        actor = self.actors.get(message.receiver)
        if actor is None:
            self._log_delivery(env, ["dropped: unknown actor"])
            return
        record = self.sessions.get(message.session)
        if record is not None and record.protocol in (14, 15) and record.config is None:
            self._deliver_redemption(env, record)
            return
        state = actor.sessions.get(message.session)
        if state is None:
            self._log_delivery(env, ["ignored: no such session"])
            return
        before = state.verdict
        outbound = step(state, actor.ctx, message)
        updates = []
        if state.verdict != before:
            updates.append(f"{message.receiver}:{state.verdict.render()}")
            if state.verdict.state == wire.ACCEPT and env.tainted \
                    and (state.protocol, state.role) in AUTH_DECISIONS:
                self.tainted_accepts.append((message.session, message.receiver))
        self._log_delivery(env, updates)
        if outbound is not None:
            self.queue.append(Envelope(outbound))

    def _deliver_redemption(self, env: Envelope, record: SessionRecord) -> None:
        message = env.message
        trs = self.trs
        verdict = verify_redemption(trs, message.receiver, message.fields,
                                    self.tick, self.scheme, message.protocol)
        if message.receiver != record.verifier:
            verdict = Verdict.reject("unknown-token")
        previous = record.verdicts.get(message.receiver, Verdict())
        if previous.pending:
            record.verdicts[message.receiver] = verdict
        if verdict.state == wire.ACCEPT and env.tainted:
            self.tainted_accepts.append((message.session, message.receiver))
        self._log_delivery(env, [f"{message.receiver}:{verdict.render()}"])


# ---------------------------------------------------------------------------
# Entry points used by the service layer
# ---------------------------------------------------------------------------

def load_policy(text: str) -> AuthenticationPolicy:
    return parse_policy(text)


def run_scenario(text: str, seed: int) -> RunResult:
    scenario = parse_scenario(text)
    return Simulation(scenario, seed).run_script()


def public_info_export(policy_text: str, seed: int, scheme_name: str = "hmac") -> str:
    policy = parse_policy(policy_text)
    rng = Rng(seed)
    scheme = make_scheme(scheme_name)
    _, pub = kas_setup(policy.poset, rng, scheme,
                       root_reserved="root_reserved" in policy.options)
    return export_public_info(pub)
