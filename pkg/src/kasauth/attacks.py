"""Automated attack suites over recorded honest transcripts.

Each suite first runs the scenario honestly inside one simulation, then
spawns fresh clone sessions of every recorded session and lets the adversary
interfere at one delivery per clone:

  replay  - every honest message is re-delivered into a clone of its own
            session at its own position (the honest payload is suppressed).
  splice  - every honest message is delivered into every recorded position
            of every session clone, across protocols.
  label   - every label-carrying message position is re-run once per
            alternative security label, swapped in flight.

Working inside one simulation matters: verifier-side state (nonce ledgers,
sequence counters, timestamp uniqueness logs, token ledgers) persists across
sessions exactly as it would for a real verifier, which is what defeats
replays of one-pass messages.

The replay and splice suites fail on any tainted authentication accept (an
accept produced while consuming an adversary-delivered message). The label
suite fails on unsoundness instead: a verifier accept whose effective label
is not dominated by the claimant's credential. Label fields travel
unauthenticated by design, so swapping one may leave a party's (still
correct) authentication of its peer intact; what must never happen is an
accepted clearance nobody proved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .harness import InterceptPlan, ScenarioError, SessionRecord, Simulation, parse_scenario
from . import wire

SUITES = ("replay", "splice", "label")

_LABEL_SUITE_PROTOCOLS = frozenset({6, 7, 8, 9, 10, 11, 12, 13})


@dataclass
class AttackOutcome:
    suite: str
    attempts: int
    failures: list[str] = field(default_factory=list)
    log: str = ""

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (f"suite={self.suite} attempts={self.attempts} "
                f"false-accepts={len(self.failures)} : {status}")


def run_attack_suite(scenario_text: str, seed: int, suite: str) -> AttackOutcome:
    if suite not in SUITES:
        raise ScenarioError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    scenario = parse_scenario(scenario_text)
    sim = Simulation(scenario, seed)
    for directive in scenario.directives:
        sim.execute(directive)
    sim.log(f"== attack suite: {suite} ==")

    if suite == "replay":
        outcome = _replay_or_splice(sim, cross=False)
    elif suite == "splice":
        outcome = _replay_or_splice(sim, cross=True)
    else:
        outcome = _label_suite(sim)
    outcome.suite = suite
    sim.log(outcome.summary())
    outcome.log = "\n".join(sim.lines) + "\n"
    return outcome


# ---------------------------------------------------------------------------
# Clone machinery
# ---------------------------------------------------------------------------

def _clonable_records(sim: Simulation) -> list[SessionRecord]:
    return [sim.sessions[sid] for sid in sorted(sim.sessions)
            if not sid.startswith("~")]


def _spawn_clone(sim: Simulation, record: SessionRecord, clone_id: str,
                 plan: InterceptPlan) -> None:
    sim.intercepts.append(plan)
    if record.config is not None:
        cfg = record.config
        sim.start_session(type(cfg)(
            protocol=cfg.protocol, session=clone_id, claimant=cfg.claimant,
            verifier=cfg.verifier, ttp=cfg.ttp, v=cfg.v, w=cfg.w,
            service=cfg.service, freshness=cfg.freshness,
            session_key_label=cfg.session_key_label, claim_as=cfg.claim_as,
            reckless=cfg.reckless))
    else:
        sim.start_redemption(clone_id, record.claimant, record.token_id)
    sim.drain()


def _positions(sim: Simulation) -> list[tuple[SessionRecord, int]]:
    """Every (session template, message index) seen in the honest run."""
    by_session: dict[str, set[int]] = {}
    for message in sim.corpus:
        by_session.setdefault(message.session, set()).add(message.index)
    out = []
    for record in _clonable_records(sim):
        for index in sorted(by_session.get(record.session, ())):
            out.append((record, index))
    return out


def _collect_failures(sim: Simulation, before: int, attempt: str,
                      failures: list[str]) -> None:
    for session, actor in sim.tainted_accepts[before:]:
        failures.append(f"{attempt} -> tainted accept by {actor} in {session}")


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def _replay_or_splice(sim: Simulation, cross: bool) -> AttackOutcome:
    corpus = list(sim.corpus)
    positions = _positions(sim)
    records = {r.session: r for r in _clonable_records(sim)}
    failures: list[str] = []
    attempts = 0
    counter = 0
    for message in corpus:
        if cross:
            targets = positions
        else:
            record = records.get(message.session)
            targets = [(record, message.index)] if record is not None else []
        for target_record, index in targets:
            counter += 1
            clone_id = f"~{target_record.session}.{counter}"
            attempt = (f"replay {message.session}.m{message.index} "
                       f"into {target_record.session}.m{index}")
            before = len(sim.tainted_accepts)
            plan = InterceptPlan(session=clone_id, index=index,
                                 fields=message.fields, note=attempt)
            _spawn_clone(sim, target_record, clone_id, plan)
            attempts += 1
            _collect_failures(sim, before, attempt, failures)
    return AttackOutcome(suite="", attempts=attempts, failures=failures)


def _label_suite(sim: Simulation) -> AttackOutcome:
    """Swap challenge labels in flight; check nothing unsound gets accepted."""
    labels = list(sim.policy.poset.labels)
    failures: list[str] = []
    attempts = 0
    counter = 0
    label_positions = [
        (message.session, message.index, next(
            f.value for f in message.fields if f.kind == wire.LABEL))
        for message in sim.corpus
        if message.protocol in _LABEL_SUITE_PROTOCOLS
        and any(f.kind == wire.LABEL for f in message.fields)
    ]
    records = {r.session: r for r in _clonable_records(sim)}
    for session, index, original in label_positions:
        record = records.get(session)
        if record is None:
            continue
        for alt in labels:
            if alt == original:
                continue
            counter += 1
            clone_id = f"~{session}.lbl{counter}"
            attempt = f"substitute {original.id} -> {alt.id} at {session}.m{index}"
            plan = InterceptPlan(session=clone_id, index=index,
                                 label_swap=alt, note=attempt)
            _spawn_clone(sim, record, clone_id, plan)
            attempts += 1
            _check_soundness(sim, clone_id, attempt, failures)
    return AttackOutcome(suite="", attempts=attempts, failures=failures)


def _check_soundness(sim: Simulation, clone_id: str, attempt: str,
                     failures: list[str]) -> None:
    record = sim.sessions[clone_id]
    verifier = sim.actors[record.verifier]
    state = verifier.sessions.get(clone_id)
    if state is None or state.verdict.state != wire.ACCEPT:
        return
    claimant = sim.actors[record.claimant]
    credential = claimant.ctx.credential
    effective = state.effective_label
    if effective is None or credential is None:
        return
    if not sim.policy.poset.leq(effective, credential.label):
        failures.append(
            f"{attempt} -> unsound accept: {record.claimant} proved "
            f"{effective.id} above its clearance {credential.label.id}")
