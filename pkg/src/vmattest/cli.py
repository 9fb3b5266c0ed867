"""Command-line scenario runner.

    vmattest run SCENARIO [--seed N] [--out DIR] [--disable DEFENSE ...]
    vmattest matrix [--seed N] [--out DIR] [--disable DEFENSE ...]
    vmattest list
    vmattest policy-check FILE

Exit codes: 0 pass, 1 scenario failure or invariant breach, 2 unreadable or
malformed input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import DEFENSES
from .errors import PolicyError
from .policy import parse_policy
from .scenario import (
    ScenarioError,
    builtin,
    builtin_names,
    format_table,
    load_scenario,
    run_matrix,
    run_scenario,
)

EXIT_PASS, EXIT_FAIL, EXIT_PARSE = 0, 1, 2


def _resolve(arg: str):
    # a bare name selects a bundled scenario
    path = Path(arg)
    if not path.exists() and arg in builtin_names():
        return builtin(arg)
    return load_scenario(path)


def _print_report(r, stream) -> None:
    print(f"scenario {r.name} (seed {r.seed}, disabled: {','.join(r.disabled) or 'none'})", file=stream)
    width = max(len(s) for s, _ in r.steps)
    for step, result in r.steps:
        print(f"  {step.ljust(width)}  {result}", file=stream)
    if r.invariant_breach:
        print(f"  invariant breach at {r.invariant_breach}", file=stream)
    print(f"outcome {r.outcome} -> {r.verdict}", file=stream)


def cmd_run(args) -> int:
    try:
        sc = _resolve(args.scenario)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    report = run_scenario(sc, seed=args.seed, extra_disable=args.disable, out_dir=args.out)
    _print_report(report, sys.stdout)
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_matrix(args) -> int:
    reports = run_matrix(seed=args.seed, extra_disable=args.disable, out_dir=args.out)
    print(format_table(reports))
    passed = sum(r.passed for r in reports)
    print(f"\n{passed}/{len(reports)} Pass")
    if args.out:
        summary = {"seed": args.seed, "disabled": args.disable, "rows": [r.to_dict() for r in reports]}
        Path(args.out, "matrix.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return EXIT_PASS if passed == len(reports) else EXIT_FAIL


def cmd_list(args) -> int:
    for name in builtin_names():
        print(f"{name:24s} {builtin(name).description}")
    return EXIT_PASS


def cmd_policy_check(args) -> int:
    try:
        doc = parse_policy(Path(args.file).read_text(encoding="utf-8"))
    except (OSError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"{doc.policy_id}: {len(doc.host_pcrs)} host PCRs, {len(doc.guest_pcrs)} guest PCRs, "
          f"{len(doc.guest_file_whitelist)} whitelisted files, {len(doc.guest_signer_certs)} signers")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmattest", description="VM runtime-integrity attestation simulator")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="randomness seed (default 0)")
        p.add_argument("--out", metavar="DIR", help="write report and transcript files here")
        p.add_argument("--disable", metavar="DEFENSE", action="append", default=[], choices=sorted(DEFENSES),
                       help="switch a defense off (repeatable)")

    p_run = sub.add_parser("run", help="run one scenario file or bundled scenario name")
    p_run.add_argument("scenario")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_matrix = sub.add_parser("matrix", help="run the benign flow and the attack/ablation matrix")
    common(p_matrix)
    p_matrix.set_defaults(func=cmd_matrix)

    p_list = sub.add_parser("list", help="list bundled scenarios")
    p_list.set_defaults(func=cmd_list)

    p_pol = sub.add_parser("policy-check", help="parse and validate a policy file")
    p_pol.add_argument("file")
    p_pol.set_defaults(func=cmd_policy_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
