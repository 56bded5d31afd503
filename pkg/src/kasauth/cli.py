"""kas-auth: thin command-line client for the service.

Every subcommand is one HTTP request against the FastAPI app. Without
--server the app is mounted in-process over an ASGI transport (no socket),
so the CLI works offline with identical request/response semantics; with
--server it targets a running instance. ``kas-auth serve`` starts one.

Exit status: 0 when the service reports ok (all expectations met, no false
accepts, policy valid), 1 otherwise, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import httpx


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kas-auth",
        description="KAS-based entity authentication: validate policies, "
                    "export public key material, run protocol scenarios, "
                    "and launch attack suites.")
    parser.add_argument("--server", metavar="URL", default=None,
                        help="target a running service instead of in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="parse and validate a policy file")
    p.add_argument("policy", type=Path)

    p = sub.add_parser("keys", help="print the public edge-token export")
    p.add_argument("policy", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scheme", choices=("hmac", "aes"), default="hmac")

    p = sub.add_parser("run", help="run a scenario and report verdicts")
    p.add_argument("scenario", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", type=Path, default=None,
                   help="also write the transcript log to this path")

    p = sub.add_parser("attack", help="run an automated attack suite")
    p.add_argument("scenario", type=Path)
    p.add_argument("--suite", choices=("replay", "splice", "label"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", type=Path, default=None)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

def post(server: str | None, path: str, payload: dict) -> dict:
    if server is not None:
        with httpx.Client(base_url=server, timeout=300.0) as client:
            response = client.post(path, json=payload)
            response.raise_for_status()
            return response.json()

    async def _local() -> dict:
        from .service import app
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://kas-auth.local",
                                     timeout=None) as client:
            response = await client.post(path, json=payload)
            response.raise_for_status()
            return response.json()

    return asyncio.run(_local())


def read_scenario(path: Path) -> str:
    """Load a scenario, inlining any ``policy file <path>`` reference."""
    lines = path.read_text().splitlines()
    out: list[str] = []
    for line in lines:
        parts = line.split()
        if parts[:2] == ["policy", "file"] and len(parts) == 3:
            policy_path = (path.parent / parts[2]).resolve()
            out.append("policy begin")
            out.append(policy_path.read_text().rstrip("\n"))
            out.append("policy end")
        else:
            out.append(line)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    body = post(args.server, "/v1/validate", {"policy": args.policy.read_text()})
    for error in body.get("errors", []):
        print(f"error: {error}")
    if body["ok"]:
        print(f"ok: {body['labels']} labels, {body['cover_edges']} cover edges, "
              f"{body['users']} users, {body['services']} services")
        return 0
    return 1


def cmd_keys(args: argparse.Namespace) -> int:
    body = post(args.server, "/v1/keys", {
        "policy": args.policy.read_text(), "seed": args.seed, "scheme": args.scheme})
    for error in body.get("errors", []):
        print(f"error: {error}", file=sys.stderr)
    if not body["ok"]:
        return 1
    sys.stdout.write(body["export"])
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    body = post(args.server, "/v1/run", {
        "scenario": read_scenario(args.scenario), "seed": args.seed})
    for error in body.get("errors", []):
        print(f"error: {error}", file=sys.stderr)
        return 1
    sys.stdout.write(body["log"])
    if args.log is not None:
        args.log.write_text(body["log"])
    return 0 if body["ok"] else 1


def cmd_attack(args: argparse.Namespace) -> int:
    body = post(args.server, "/v1/attack", {
        "scenario": read_scenario(args.scenario), "seed": args.seed,
        "suite": args.suite})
    for error in body.get("errors", []):
        print(f"error: {error}", file=sys.stderr)
        return 1
    if args.log is not None:
        args.log.write_text(body["log"])
    print(f"suite={body['suite']} attempts={body['attempts']} "
          f"false-accepts={len(body['false_accepts'])}")
    for failure in body["false_accepts"]:
        print(f"  {failure}")
    return 0 if body["ok"] else 1


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .service import app
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "validate": cmd_validate,
        "keys": cmd_keys,
        "run": cmd_run,
        "attack": cmd_attack,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except httpx.HTTPError as exc:
        print(f"error: request failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
