"""Command line entry point: run scenarios, re-verify traces, enumerate short attacks."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .protocol import dump_jsonl
from .scenarios import ConfigError, bundled_path, list_scenarios, load_config, run_scenario
from .verifier import Artifacts, MalformedTrace, all_pass, verdict_records, verify

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _table(verdicts, checks=None) -> str:
    rows = [v for v in verdicts if checks is None or v.requirement in checks]
    lines = []
    for v in rows:
        line = f"{v.sub_problem:<4} {v.requirement} {v.status:<4}"
        if v.detail:
            line += f"  {v.detail}"
        lines.append(line)
    passed = sum(v.passed for v in rows)
    lines.append(f"{passed}/{len(rows)} checks pass")
    return "\n".join(lines)


def cmd_run(args) -> int:
    try:
        path = bundled_path(args.scenario) if args.scenario else Path(args.config)
        cfg = load_config(path)
        result = run_scenario(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if not args.quiet:
        print(_table(result.verdicts, cfg.checks))
        print(f"artifacts written to {args.out}")
    return result.exit_code


def cmd_verify(args) -> int:
    try:
        art = Artifacts.load(args.trace)
        verdicts = verify(art)
    except MalformedTrace as exc:
        print(f"malformed trace: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_jsonl(out / "verdicts.jsonl", verdict_records(verdicts))
    if not args.quiet:
        print(_table(verdicts))
    return EXIT_OK if all_pass(verdicts) else EXIT_FAIL


def cmd_list(args) -> int:
    try:
        for name, description in list_scenarios():
            print(f"{name:<18} {description}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_enumerate(args) -> int:
    from .search import enumerate_attacks

    report = enumerate_attacks(args.max_actions)
    print(json.dumps(report.to_json(), sort_keys=True, indent=2))
    return EXIT_OK if report.ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unisuf", description="UniSUF OTA protocol simulator and trace verifier")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its artifacts")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="scenario config (JSON)")
    src.add_argument("--scenario", help="name of a bundled scenario")
    run.add_argument("--out", required=True, help="artifact directory")
    run.add_argument("-q", "--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    ver = sub.add_parser("verify", help="re-verify a recorded trace")
    ver.add_argument("--trace", required=True, help="trace.jsonl; sibling files are read from its directory")
    ver.add_argument("--out", required=True, help="directory for verdicts.jsonl")
    ver.add_argument("-q", "--quiet", action="store_true")
    ver.set_defaults(func=cmd_verify)

    ls = sub.add_parser("list-scenarios", help="list bundled scenarios")
    ls.set_defaults(func=cmd_list)

    en = sub.add_parser("enumerate", help="replay every short attack script on the ECU link")
    en.add_argument("--max-actions", type=int, default=4)
    en.set_defaults(func=cmd_enumerate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
