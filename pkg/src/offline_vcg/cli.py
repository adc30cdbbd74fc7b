"""``offline-vcg`` command line: exact, learn, sweep-report, check.

Exit codes: 0 success, 1 invariant failure, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, invariants
from .mdp import InputError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="offline-vcg", description="Offline dynamic VCG experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("exact", "check the exact mechanism on an instance"),
                           ("learn", "run the offline learner over a K x seed sweep")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True, help="run config (JSON)")
        c.add_argument("--out", help="output directory (overrides output.dir)")
        c.add_argument("--seed", type=int, help="master seed (overrides the config)")
        if name == "learn":
            c.add_argument("--jobs", type=int, default=1, help="worker processes for (K, seed) cells")
    s = sub.add_parser("sweep-report", help="merge learn reports and compute aggregates")
    s.add_argument("reports", nargs="+", help="report.csv files or report directories")
    s.add_argument("--out", required=True, help="output directory")
    k = sub.add_parser("check", help="run an invariant suite")
    k.add_argument("--suite", required=True, choices=invariants.SUITES)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out", help="write the suite record as JSON here")
    return p


def _load(args) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config).with_overrides(seed=args.seed, out=args.out)
    if cfg.out is None:
        raise harness.ConfigError("output.dir", "no output directory; pass --out or set output.dir")
    harness.check_writable(cfg.out)
    return cfg


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command in ("exact", "learn"):
            cfg = _load(args)
            if args.command == "exact":
                report, ok = harness.cmd_exact(cfg)
            else:
                if args.jobs < 1:
                    raise harness.ConfigError("--jobs", "must be >= 1")
                report, ok = harness.cmd_learn(cfg, args.jobs)
            paths = report.write(cfg.out)
            _say(f"wrote {paths['csv']} and {paths['json']}")
            if not ok:
                _say("invariant failure: see the JSON sidecar")
            return EXIT_OK if ok else EXIT_FAIL
        if args.command == "sweep-report":
            header, rows, agg = harness.sweep_report(args.reports)
            files = harness.write_sweep(args.out, header, rows, agg)
            _say(f"wrote {files['aggregate']}")
            return EXIT_OK
        result = invariants.run_suite(args.suite, args.seed)
        print(f"{result.name}: {'PASS' if result.passed else 'FAIL'} {json.dumps(result.summary, sort_keys=True)}")
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True, default=str) + "\n")
        return EXIT_OK if result.passed else EXIT_FAIL
    except InputError as exc:
        _say(f"error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
