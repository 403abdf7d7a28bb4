"""Command-line client for the pipeline service.

Every subcommand builds a request, posts it to the service (an in-process
instance by default, or a remote one via --server), and prints the JSON
result. Exit codes: 0 on success, 1 on validation problems (bad config,
missing inputs, unmatched sequences), 2 when a stage fails at runtime.
"""

import argparse
import json
import sys

import httpx


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _overrides(items: list[str]) -> dict:
    out: dict = {}
    for item in items:
        path, value = _parse_override(item)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duopose",
        description="Reconstruct two closely interacting people from corrupted estimates.",
    )
    parser.add_argument("--config", help="path to the experiment config JSON file")
    parser.add_argument(
        "--server",
        help="base URL of a running service; by default the pipeline runs in-process",
    )
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="config override with a dotted key, e.g. --set diffusion.steps=50",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", help="generate the synthetic interaction corpus")
    sub.add_parser("train-prior", help="train the interaction prior")
    sub.add_parser("train-diffusion", help="train the guided diffusion adaptor")

    rc = sub.add_parser("reconstruct", help="adapt initial estimates on a split")
    rc.add_argument("--split", default="test")
    rc.add_argument("--tag", default="adapted", help="name of the output run directory")
    rc.add_argument("--steps", type=int, help="sampling steps (default from config)")
    rc.add_argument("--no-physics", action="store_true", help="disable penetration guidance")
    rc.add_argument(
        "--single-branch", action="store_true", help="ablation: no cross-person attention"
    )
    rc.add_argument("--no-prior", action="store_true", help="skip prior projection")

    ev = sub.add_parser("evaluate", help="score a reconstruction run against ground truth")
    ev.add_argument("--tag", default="adapted")
    ev.add_argument("--split", default="test")

    au = sub.add_parser("audit-penetration", help="audit ground truth for interpenetration")
    au.add_argument("--split", default=None)

    pt = sub.add_parser("plot-trace", help="render per-step trace figures for a run")
    pt.add_argument("--tag", default="adapted")

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8800)
    return parser


def _request(args: argparse.Namespace) -> tuple[str, dict]:
    base = {
        "config_path": args.config,
        "overrides": _overrides(args.set),
    }
    if args.command == "generate":
        return "/generate", base
    if args.command == "train-prior":
        return "/train/prior", base
    if args.command == "train-diffusion":
        return "/train/diffusion", base
    if args.command == "reconstruct":
        return "/reconstruct", {
            **base,
            "split": args.split,
            "tag": args.tag,
            "steps": args.steps,
            "physics": not args.no_physics,
            "single_branch": args.single_branch,
            "use_prior": not args.no_prior,
        }
    if args.command == "evaluate":
        return "/evaluate", {**base, "tag": args.tag, "split": args.split}
    if args.command == "audit-penetration":
        return "/audit-penetration", {**base, "split": args.split}
    if args.command == "plot-trace":
        return "/plot-trace", {**base, "tag": args.tag}
    raise SystemExit(f"unknown command {args.command!r}")


def _client(args: argparse.Namespace) -> httpx.Client:
    if args.server:
        return httpx.Client(base_url=args.server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import create_app

    # In-process client over the same ASGI app the server would run;
    # raise_server_exceptions=False keeps stage failures as HTTP 500s so
    # the exit-code mapping stays uniform with remote mode.
    return TestClient(create_app(), raise_server_exceptions=False)


def _exit_code(args: argparse.Namespace, status: int, body: dict) -> int:
    if status >= 500:
        return 2
    if status >= 400:
        return 1
    result = body.get("result", {})
    if args.command == "evaluate" and result.get("unmatched"):
        return 1
    if args.command == "audit-penetration" and not result.get("clean", True):
        return 2
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service.app import create_app

        uvicorn.run(create_app(), host=args.host, port=args.port)
        return 0

    path, payload = _request(args)
    with _client(args) as client:
        try:
            resp = client.post(path, json=payload)
        except httpx.HTTPError as exc:
            print(json.dumps({"ok": False, "error": str(exc)}), file=sys.stderr)
            return 2
    try:
        body = resp.json()
    except json.JSONDecodeError:
        body = {"raw": resp.text}
    stream = sys.stdout if resp.status_code < 400 else sys.stderr
    print(json.dumps(body, indent=1, sort_keys=True), file=stream)
    return _exit_code(args, resp.status_code, body)


if __name__ == "__main__":
    sys.exit(main())
