"""Command-line entry point.

    vhlsim run CONFIG [--metrics PATH] [--workers N]
    vhlsim theory-check [--instances N] [--seed S] [--replay-dir DIR]
    vhlsim export-features CONFIG --round R --layer L [--out PATH]

Exit codes: 0 success, 1 config error, 2 numeric divergence,
3 theory-check violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, runner
from .config import load_config
from .errors import ConfigError, ConfigurationError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 1, 2, 3

log = logging.getLogger("vhlsim")


def run_theory_checks(instances: int, seed: int, replay_dir=None) -> dict:
    """Randomised lemma checks plus the P == Pv instance.

    Failing instances are written as JSON under ``replay_dir`` when given.
    """
    if instances < 1:
        raise ValueError("instance count must be >= 1")
    rng = np.random.default_rng(seed)
    violations, slacks = [], []
    for i in range(instances):
        inst = analysis.random_lemma_instance(rng)
        rep = analysis.lemma1_check(inst.classifier, inst.p, inst.q, inst.candidates)
        slacks.append(rep.slack)
        if not rep.holds:
            record = {"index": i, "seed": seed, "lhs": rep.lhs, "rhs": rep.rhs, **inst.to_dict()}
            violations.append(record)
            if replay_dir is not None:
                path = Path(replay_dir) / f"violation_seed{seed}_{i}.json"
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(json.dumps(record, indent=2))
    inst = analysis.random_lemma_instance(np.random.default_rng([seed, 1]))
    same = analysis.lemma1_check(inst.classifier, inst.p, inst.p, inst.candidates)
    return {
        "instances": instances,
        "seed": seed,
        "violations": len(violations),
        "min_slack": float(min(slacks)),
        "mean_slack": float(np.mean(slacks)),
        "identical_lhs": same.lhs,
        "identical_rhs": same.rhs,
        "failures": violations,
    }


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    base = Path(args.config).resolve().parent
    summary = runner.run_experiment(cfg, metrics_path=args.metrics, workers=args.workers, base_dir=base)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_theory(args) -> int:
    report = run_theory_checks(args.instances, args.seed, args.replay_dir)
    print(f"instances={report['instances']} violations={report['violations']} "
          f"min_slack={report['min_slack']:.6g} mean_slack={report['mean_slack']:.6g} "
          f"identical=({report['identical_lhs']:.3g}, {report['identical_rhs']:.3g})")
    for failure in report["failures"]:
        print(json.dumps(failure), file=sys.stderr)
    return EXIT_VIOLATION if report["violations"] else EXIT_OK


def _cmd_export(args) -> int:
    cfg = load_config(args.config)
    out = args.out or f"features_round{args.round}_layer{args.layer}.csv"
    n = runner.export_at_round(cfg, args.round, args.layer, out)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vhlsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a configured experiment")
    p.add_argument("config")
    p.add_argument("--metrics", help="override output.metrics")
    p.add_argument("--workers", type=int, help="client threads per round")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("theory-check", help="randomised margin/Wasserstein bound checks")
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replay-dir", default=None, help="where to write failing instances")
    p.set_defaults(func=_cmd_theory)

    p = sub.add_parser("export-features", help="dump hidden features after R rounds")
    p.add_argument("config")
    p.add_argument("--round", type=int, required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
