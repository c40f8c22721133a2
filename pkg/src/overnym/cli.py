"""Command line: run scenarios, check them, compare bloom FPR.

    overnym run <scenario> [--seed N] [--trace PATH] [--metrics PATH]
                [--strict-registration]
    overnym check <scenario>
    overnym fpr --m M --k K --n N [--trials T] [--seed S]

Every flag has an environment override with the OVERNYM_ prefix:
OVERNYM_SEED, OVERNYM_TRACE, OVERNYM_METRICS, OVERNYM_STRICT_REGISTRATION
(the last is truthy when set to 1/true/on). Flags beat the environment.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from random import Random

from .neat import BloomFilter, fpr_analytic
from .runner import run_scenario, write_outputs
from .scenario import ParseError, ValidationError, parse_scenario

ENV_PREFIX = "OVERNYM_"


def _env(name: str) -> str | None:
    return os.environ.get(ENV_PREFIX + name)


def _env_flag(name: str) -> bool:
    value = (_env(name) or "").strip().lower()
    return value in ("1", "true", "on", "yes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overnym",
        description="Deterministic pseudonymous-overlay network simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a scenario, write trace and metrics")
    run.add_argument("scenario", help="scenario file")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", default=None, help="trace output path (JSON lines)")
    run.add_argument("--metrics", default=None, help="metrics output path (JSON)")
    run.add_argument("--strict-registration", action="store_true", default=None,
                     help="routers reject unregistered chain addresses")

    check = sub.add_parser("check", help="parse and validate a scenario only")
    check.add_argument("scenario", help="scenario file")

    fpr = sub.add_parser("fpr", help="analytic vs simulated bloom false-positive rate")
    fpr.add_argument("--m", type=int, required=True, help="filter bits")
    fpr.add_argument("--k", type=int, required=True, help="index hashes")
    fpr.add_argument("--n", type=int, required=True, help="inserted keys")
    fpr.add_argument("--trials", type=int, default=20000, help="absent-key probes")
    fpr.add_argument("--seed", type=int, default=0, help="probe RNG seed")
    return parser


def _load_scenario(path: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return None
    try:
        return parse_scenario(text)
    except (ParseError, ValidationError) as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return None


def cmd_run(args: argparse.Namespace) -> int:
    sc = _load_scenario(args.scenario)
    if sc is None:
        return 2
    seed = args.seed
    if seed is None and _env("SEED") is not None:
        seed = int(_env("SEED"))
    strict = args.strict_registration
    if strict is None and _env("STRICT_REGISTRATION") is not None:
        strict = _env_flag("STRICT_REGISTRATION")

    stem = Path(args.scenario).stem
    trace_path = args.trace or _env("TRACE") or f"{stem}.trace.jsonl"
    metrics_path = args.metrics or _env("METRICS") or f"{stem}.metrics.json"

    result = run_scenario(sc, seed=seed, strict=strict)
    write_outputs(result, trace_path, metrics_path)

    for text, passed, detail in result.checks:
        status = "ok" if passed else "FAILED"
        print(f"{status:6} {text}  [{detail}]")
    print(f"trace   -> {trace_path}")
    print(f"metrics -> {metrics_path}")
    if result.exit_code != 0:
        failed = sum(1 for _, passed, _ in result.checks if not passed)
        print(f"error: {failed} expectation(s) failed", file=sys.stderr)
    return result.exit_code


def cmd_check(args: argparse.Namespace) -> int:
    sc = _load_scenario(args.scenario)
    if sc is None:
        return 2
    print(f"ok: {len(sc.nodes)} nodes, {len(sc.segments)} segments, "
          f"{len(sc.actions)} actions, {len(sc.expectations)} expectations, "
          f"seed {sc.seed}")
    return 0


def cmd_fpr(args: argparse.Namespace) -> int:
    if args.m < 8 or args.k < 1 or args.n < 0 or args.trials < 1:
        print("error: need m >= 8, k >= 1, n >= 0, trials >= 1", file=sys.stderr)
        return 2
    analytic = fpr_analytic(args.m, args.k, args.n)
    bloom = BloomFilter(args.m, args.k)
    rng = Random(args.seed)
    for i in range(args.n):
        bloom.add(b"member-" + i.to_bytes(8, "big"))
    false_positives = 0
    for i in range(args.trials):
        probe = b"absent-" + rng.getrandbits(64).to_bytes(8, "big") + i.to_bytes(8, "big")
        if bloom.might_contain(probe):
            false_positives += 1
    simulated = false_positives / args.trials
    print(f"m={args.m} k={args.k} n={args.n}")
    print(f"analytic  fpr: {analytic:.6f}")
    print(f"simulated fpr: {simulated:.6f}  ({false_positives}/{args.trials} probes)")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "check":
        return cmd_check(args)
    return cmd_fpr(args)


if __name__ == "__main__":
    sys.exit(main())
