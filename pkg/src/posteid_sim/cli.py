"""Command line entry point.

    posteid-sim run --scenario ATTACK --policy baseline --seed 7 \
        --transcript out.jsonl --report out.json
    posteid-sim verify --transcript out.jsonl --scenario ATTACK --policy baseline

Exit status: 0 when the outcome matches the expectation (or the transcript
verifies), 1 when it does not, 2 on configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from .scenario import ConfigError, ScenarioConfig, ScenarioIOError, run_scenario, verify_transcript

EXIT_OK, EXIT_MISMATCH, EXIT_ERROR = 0, 1, 2


def _seed(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posteid-sim", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write transcript + report")
    run.add_argument("--scenario", required=True)
    run.add_argument("--policy", required=True, help="baseline | restrict | fix")
    run.add_argument("--seed", required=True, type=_seed)
    run.add_argument("--transcript", required=True)
    run.add_argument("--report", required=True)

    verify = sub.add_parser("verify", help="re-check a transcript against a scenario")
    verify.add_argument("--transcript", required=True)
    verify.add_argument("--scenario", required=True)
    verify.add_argument("--policy", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK

    try:
        if args.command == "run":
            cfg = ScenarioConfig(args.scenario, args.policy, args.seed, args.transcript, args.report)
            report = run_scenario(cfg)
            print(
                f"{report.scenario.value}/{report.policy.value} seed={report.seed}: "
                f"outcome={report.outcome.value} expected={report.expected_outcome.value} "
                f"digest={report.transcript_digest}"
            )
            return EXIT_OK if report.matches else EXIT_MISMATCH

        cfg = ScenarioConfig(args.scenario, args.policy)
        verdict = verify_transcript(args.transcript, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ScenarioIOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_ERROR

    print(json.dumps({"ok": verdict.ok, "violations": verdict.violations}, indent=2))
    return EXIT_OK if verdict.ok else EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
