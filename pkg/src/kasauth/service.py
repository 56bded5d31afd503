"""FastAPI facade over the library.

Clients post policy and scenario *text*; parsing, validation, and the
simulation itself run server-side. Every run is seeded by the request, so
the service is stateless and two identical requests return identical bodies.
"""

from __future__ import annotations

from typing import Literal, Optional

from fastapi import FastAPI
from pydantic import BaseModel, Field

from . import __version__
from .attacks import SUITES, run_attack_suite
from .crypto import SCHEMES
from .harness import ScenarioError, public_info_export, run_scenario
from .poset import PolicyParseError, PosetError, parse_policy

app = FastAPI(
    title="kas-auth",
    version=__version__,
    description="Key-assignment-scheme entity authentication: policy "
                "validation, key publication, and deterministic protocol "
                "simulation with adversary suites.",
)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class ValidateRequest(BaseModel):
    policy: str = Field(description="Policy file text")


class ValidateResponse(BaseModel):
    ok: bool
    labels: int = 0
    cover_edges: int = 0
    users: int = 0
    services: int = 0
    errors: list[str] = []


class KeysRequest(BaseModel):
    policy: str
    seed: int = 0
    scheme: Literal["hmac", "aes"] = "hmac"


class KeysResponse(BaseModel):
    ok: bool
    export: str = ""
    errors: list[str] = []


class SessionVerdicts(BaseModel):
    session: str
    verdicts: dict[str, str]


class ExpectationResult(BaseModel):
    expectation: str
    ok: bool
    observed: str


class RunRequest(BaseModel):
    scenario: str = Field(description="Scenario text with an inline policy block")
    seed: int = 0


class RunResponse(BaseModel):
    ok: bool
    log: str = ""
    sessions: list[SessionVerdicts] = []
    expectations: list[ExpectationResult] = []
    errors: list[str] = []


class AttackRequest(BaseModel):
    scenario: str
    seed: int = 0
    suite: Literal["replay", "splice", "label"] = "replay"


class AttackResponse(BaseModel):
    ok: bool
    suite: str = ""
    attempts: int = 0
    false_accepts: list[str] = []
    log: str = ""
    errors: list[str] = []


class HealthResponse(BaseModel):
    status: str
    version: str
    schemes: list[str]
    suites: list[str]


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------

@app.get("/v1/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__,
                          schemes=sorted(SCHEMES), suites=list(SUITES))


@app.post("/v1/validate", response_model=ValidateResponse)
def validate(request: ValidateRequest) -> ValidateResponse:
    try:
        policy = parse_policy(request.policy)
    except (PolicyParseError, PosetError) as exc:
        return ValidateResponse(ok=False, errors=[str(exc)])
    report = policy.poset.validate()
    if not report.ok:
        return ValidateResponse(
            ok=False,
            labels=len(policy.poset),
            cover_edges=len(policy.poset.cover_edges),
            errors=[f"{v.kind}: {v.detail}" for v in report.violations])
    return ValidateResponse(
        ok=True, labels=len(policy.poset),
        cover_edges=len(policy.poset.cover_edges),
        users=len(policy.users), services=len(policy.services))


@app.post("/v1/keys", response_model=KeysResponse)
def keys(request: KeysRequest) -> KeysResponse:
    try:
        export = public_info_export(request.policy, request.seed, request.scheme)
    except (PolicyParseError, PosetError) as exc:
        return KeysResponse(ok=False, errors=[str(exc)])
    return KeysResponse(ok=True, export=export)


@app.post("/v1/run", response_model=RunResponse)
def run(request: RunRequest) -> RunResponse:
    try:
        result = run_scenario(request.scenario, request.seed)
    except (ScenarioError, PosetError) as exc:
        return RunResponse(ok=False, errors=[str(exc)])
    return RunResponse(
        ok=result.ok,
        log=result.log,
        sessions=[SessionVerdicts(session=sid, verdicts=verdicts)
                  for sid, verdicts in result.verdicts.items()],
        expectations=[ExpectationResult(expectation=e, ok=good, observed=obs)
                      for e, good, obs in result.expectations])


@app.post("/v1/attack", response_model=AttackResponse)
def attack(request: AttackRequest) -> AttackResponse:
    try:
        outcome = run_attack_suite(request.scenario, request.seed, request.suite)
    except (ScenarioError, PosetError) as exc:
        return AttackResponse(ok=False, errors=[str(exc)])
    return AttackResponse(
        ok=outcome.ok, suite=outcome.suite, attempts=outcome.attempts,
        false_accepts=outcome.failures, log=outcome.log)
