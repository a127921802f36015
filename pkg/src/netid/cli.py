"""Command line entry point: ``netid run-id | run-control | check | report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .checks import MUTATIONS, QUICK, run_suite
from .control import ControlError
from .experiments import run_control, run_identification, summarize
from .identify import NumericalError
from .plant import PowerFlowError
from .scenario import ConfigError, Scenario, load_scenario

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def _out_dir(scen: Scenario) -> Path:
    return Path(scen.out) if scen.out else Path("runs") / f"{scen.name}-seed{scen.seed}"


def _load(args, mode: str) -> Scenario:
    scen = load_scenario(args.config).with_overrides(seed=args.seed, ticks=args.ticks, out=args.out)
    if scen.mode != mode:
        raise ConfigError("mode", f"expected \"{mode}\" for this command, got \"{scen.mode}\"")
    return scen


def identify_summary(pred_error: np.ndarray, rounds, regrets) -> dict:
    window = min(100, pred_error.size)
    return {
        "ticks": int(pred_error.size),
        "initial_error": float(np.mean(pred_error[:window])),
        "final_error": float(np.mean(pred_error[-window:])),
        "sublevel_violations": int(sum(r.sublevel_violation for r in rounds)),
        "regret": {str(r.T): r.value for r in regrets},
    }


def cmd_run_id(args) -> int:
    scen = _load(args, "identify")
    if not scen.identify.regret_at:
        scen = replace(scen, identify=replace(scen.identify, regret_at=(scen.ticks,)))
    run = run_identification(scen)
    out = _out_dir(scen)
    out.mkdir(parents=True, exist_ok=True)
    paths = io.artifact_paths(out)
    io.write_rounds(paths[io.ROUNDS_CSV], run.rounds, run.pred_error)
    io.write_regret(paths[io.REGRET_CSV], run.regrets)
    io.write_theta(paths[io.THETA_CSV], run.problem.layout.split_theta(run.identifier.theta))
    summary = {"mode": "identify", "name": scen.name, "seed": scen.seed, **identify_summary(run.pred_error, run.rounds, run.regrets)}
    io.write_summary(paths[io.SUMMARY_JSON], summary)
    _print_summary(summary, out)
    return EXIT_OK


def cmd_run_control(args) -> int:
    scen = _load(args, "control")
    run = run_control(scen)
    out = _out_dir(scen)
    out.mkdir(parents=True, exist_ok=True)
    paths = io.artifact_paths(out)
    traj = run.trajectory
    io.write_trajectory(paths[io.TRAJECTORY_CSV], traj, run.pbar)
    io.write_rounds(paths[io.ROUNDS_CSV], traj.rounds)
    io.write_theta(paths[io.THETA_CSV], run.layout.split_theta(traj.final_theta))
    summary = {
        "mode": "control", "name": scen.name, "seed": scen.seed, **run.summary(),
        "domain_clamps": traj.domain_clamps, "sublevel_violations": traj.sublevel_violations,
    }
    io.write_summary(paths[io.SUMMARY_JSON], summary)
    _print_summary(summary, out)
    return EXIT_OK


def _print_summary(summary: dict, out: Path | None = None):
    for key, value in summary.items():
        print(f"{key:<26} {value}")
    if out is not None:
        print(f"{'artifacts':<26} {out}")


def cmd_check(args) -> int:
    results = run_suite(args.mutation, QUICK)
    for r in results:
        print(f"{r.line()}  [{r.seconds:.1f}s]")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_FAIL
    print("all properties pass")
    return EXIT_OK


def recompute_summary(run_dir) -> dict:
    """Summary rebuilt from the CSV artifacts alone."""
    paths = io.artifact_paths(run_dir)
    if paths[io.TRAJECTORY_CSV].is_file():
        traj, pbar = io.read_trajectory(paths[io.TRAJECTORY_CSV])
        return summarize(traj, pbar)
    if paths[io.ROUNDS_CSV].is_file():
        rounds, pred = io.read_rounds(paths[io.ROUNDS_CSV])
        if pred is None:
            raise ValueError(f"{paths[io.ROUNDS_CSV]} has no prediction-error column")
        regrets = io.read_regret(paths[io.REGRET_CSV]) if paths[io.REGRET_CSV].is_file() else []
        return identify_summary(pred, rounds, regrets)
    raise FileNotFoundError(f"no run artifacts in {run_dir}")


def cmd_report(args) -> int:
    summary = recompute_summary(args.dir)
    _print_summary(summary)
    stored_path = io.artifact_paths(args.dir)[io.SUMMARY_JSON]
    if stored_path.is_file():
        stored = io.read_summary(stored_path)
        diff = [k for k, v in summary.items() if k in stored and stored[k] != v]
        print("matches stored summary" if not diff else f"differs from stored summary in: {', '.join(diff)}")
        if diff:
            return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fun, help_ in (
        ("run-id", cmd_run_id, "identification-only run"),
        ("run-control", cmd_run_control, "closed-loop voltage regulation run"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="scenario TOML file")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--ticks", type=int, help="override the number of ticks")
        p.set_defaults(func=fun)
    p = sub.add_parser("check", help="run the property suite")
    p.add_argument("--mutation", choices=MUTATIONS, default="none", help="inject a known defect")
    p.set_defaults(func=cmd_check)
    p = sub.add_parser("report", help="recompute a run summary from its CSV files")
    p.add_argument("dir", help="run output directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, PowerFlowError, ControlError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
