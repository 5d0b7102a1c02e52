"""Command line: ``convexmenu {train,eval,baseline,oracle,gradcheck}``.

Exit codes: 0 success, 1 validation or check failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import kernels
from .baselines import BASELINES, run_baseline
from .config import ConfigError, load_config
from .problems import MechanismProblem
from .runner import evaluate_checkpoint, run_experiment
from .training import TrainingAborted, train
from .verify import ORACLE_CHECKS, check_convexity, check_gradients

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def _progress(row: dict) -> None:
    if row["eu_validation"] is not None:
        print(f"iter {row['iter']:>6}  loss {row['loss']:+.5f}  eu_val {row['eu_validation']:.5f}  "
              f"beta {row['beta']:.1f}  {row['wallclock_s']:.0f}s", file=sys.stderr, flush=True)


def _config(args):
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.seed is not None:
        # an automatic run name follows the new seed; an explicit one is kept
        name = None if _auto_name(cfg) else cfg.run.name
        cfg = cfg.replace(run=dataclasses.replace(cfg.run, seed=args.seed, name=name)).resolved()
    if args.out is not None:
        cfg = cfg.replace(run=dataclasses.replace(cfg.run, out_dir=args.out))
    return cfg


def _auto_name(cfg) -> bool:
    return cfg.run.name == f"{cfg.make_problem().setting_id}_seed{cfg.run.seed}"


def cmd_train(args) -> int:
    cfg = _config(args)
    progress = None if args.quiet else _progress
    if args.no_eval:
        result = train(cfg, cfg.run_dir, resume=args.resume, progress=progress)
        _print_json({"checkpoint": str(result.checkpoint), "best_iter": result.state.best_iter,
                     "best_eu_validation": result.state.best_eu})
        return EXIT_OK
    report = run_experiment(cfg, resume=args.resume, regret=not args.no_regret, progress=progress)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate_checkpoint(args.checkpoint, args.samples, args.seed, regret=not args.no_regret,
                                 which=args.which)
    if args.report is not None:
        report.write(args.report)
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_baseline(args) -> int:
    try:
        problem = MechanismProblem.from_setting_id(args.setting)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        out = run_baseline(args.name, problem, args.samples, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out["setting"] = problem.setting_id
    _print_json(out)
    return EXIT_OK


def cmd_oracle(args) -> int:
    names = list(ORACLE_CHECKS) if args.check == "all" else [args.check]
    ok = True
    for name in names:
        res = ORACLE_CHECKS[name]()
        print(res.line(), flush=True)
        ok &= res.passed
    return EXIT_OK if ok else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    results = [check_gradients(seed=args.seed)]
    if not args.skip_convexity:
        results.append(check_convexity(seed=args.seed))
    for res in results:
        print(res.line(), flush=True)
        if args.verbose:
            _print_json(res.details)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="convexmenu",
                                 description="Learn convex menu pricing rules for mechanism design.")
    ap.add_argument("--version", action="version", version=f"%(prog)s 0.1.0 ({kernels.BACKEND} kernels)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a pricing network, then evaluate it and run baselines")
    p.add_argument("--config", help="TOML config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--out", help="override run.out_dir")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--no-eval", action="store_true", help="train only, skip test evaluation and baselines")
    p.add_argument("--no-regret", action="store_true", help="skip the regret estimate")
    p.add_argument("--quiet", action="store_true", help="no progress lines on stderr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, help="test profiles (default: recorded config)")
    p.add_argument("--seed", type=int, help="test seed (default: recorded config)")
    p.add_argument("--which", choices=("best", "last"), default="best")
    p.add_argument("--no-regret", action="store_true")
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="expected designer utility of an analytic baseline")
    p.add_argument("--name", required=True, choices=sorted(BASELINES))
    p.add_argument("--setting", required=True, help="setting id such as U_1_2, B_1_10_cd0.5, U_3_10_revI")
    p.add_argument("--samples", type=int, default=2**18)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("oracle", help="brute-force reference checks")
    p.add_argument("check", choices=sorted(ORACLE_CHECKS) + ["all"])
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("gradcheck", help="finite-difference gradient and convexity checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-convexity", action="store_true")
    p.add_argument("--verbose", action="store_true", help="print per-case errors")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)  # exits with status 2 on bad usage
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_FAIL
    except TrainingAborted as exc:
        where = f" (checkpoint: {exc.checkpoint})" if exc.checkpoint else ""
        print(f"training aborted: {exc}{where}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
