"""Command-line entry point: ``ksf {simulate,montecarlo,evaluate,convert-calib}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

from . import calib, config, metrics, montecarlo

log = logging.getLogger("ksf")


def _load(args) -> config.ExperimentConfig:
    cfg = config.load_config(args.config) if args.config else config.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if args.out is not None:
        cfg.out = args.out
    return cfg.validate()


def cmd_simulate(args) -> int:
    cfg = _load(args)
    t0 = time.perf_counter()
    out = montecarlo.simulate_run(cfg, 0, cfg.out, write_truth=True)
    wall = time.perf_counter() - t0
    res = out.result
    rep = metrics.evaluate_files(os.path.join(cfg.out, "trajectory.tum"),
                                 os.path.join(cfg.out, "truth.tum"))
    print(f"frames: {len(res.epochs)}  keyframes: {len(out.keyframes)}  wall: {wall:.1f} s "
          f"(sim length {cfg.trajectory.duration:.1f} s)")
    print(f"final position error: {out.final_position_error:.4f} m")
    print(f"ATE {rep.ate:.4f} m  RRE {rep.rre:.4f} deg/m  RTE {rep.rte:.3f} %")
    return 0


def cmd_montecarlo(args) -> int:
    cfg = _load(args)
    report, _ = montecarlo.run_montecarlo(cfg, jobs=args.jobs, out_dir=cfg.out)
    print(f"successful runs: {report.successes}/{report.runs}")
    for c, v in report.last_window.items():
        print(f"NEES {c} (last 10 s): {v:.3f}")
    print(f"position RMSE at end: {report.rmse['position'][-1]:.4f} m")
    print(f"outputs in {os.path.join(cfg.out, 'aggregate')}")
    return 0 if report.successes == report.runs else 3


def cmd_evaluate(args) -> int:
    rep = metrics.evaluate_files(args.estimate, args.truth, tuple(args.intervals), args.max_dt)
    print(f"matched poses: {rep.matched}")
    print(f"ATE {rep.ate:.6f} m")
    if rep.relative.empty:
        print("RRE/RTE: trajectory shorter than every distance interval")
    else:
        print(f"RRE {rep.rre:.6f} deg/m")
        print(f"RTE {rep.rte:.6f} %")
    return 0


def cmd_convert(args) -> int:
    frag = calib.dump_fragment(calib.convert_tumvi(calib.read_calib_file(args.input)))
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(frag)
    else:
        sys.stdout.write(frag)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ksf", description="Keyframe-based structureless VIO filter")
    p.add_argument("--print-default-config", action="store_true",
                   help="print the default experiment configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    def common(sp, runs=False):
        sp.add_argument("--config", help="YAML experiment configuration")
        sp.add_argument("--seed", type=int, help="base seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        if runs:
            sp.add_argument("--runs", type=int, help="number of runs (overrides the config)")

    s = sub.add_parser("simulate", help="one simulated run with trajectory and state output")
    common(s)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("montecarlo", help="Monte-Carlo NEES/RMSE campaign")
    common(m, runs=True)
    m.add_argument("--jobs", type=int, default=1, help="worker processes")
    m.set_defaults(func=cmd_montecarlo)

    e = sub.add_parser("evaluate", help="ATE/RRE/RTE of a TUM trajectory against ground truth")
    e.add_argument("estimate")
    e.add_argument("truth")
    e.add_argument("--intervals", type=float, nargs="+", default=list(metrics.DEFAULT_INTERVALS))
    e.add_argument("--max-dt", type=float, default=0.005)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("convert-calib", help="TUM-VI calibration to a config fragment")
    c.add_argument("input")
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_convert)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_default_config:
        sys.stdout.write(config.default_config_text())
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (config.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
