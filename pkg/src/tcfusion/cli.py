"""``fusionctl``: simulate datasets, run configurations, score and compare runs.

Exit codes: 0 success, 2 malformed or missing input, 3 numerical failure.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .filter import DataGapError
from .metrics import compare, position_errors, rmse, score_detection, score_multipath
from .pipeline import NumericalError, RunConfig, run
from .simulator import PRESETS, Scenario, simulate

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _scenario(arg, seed):
    if arg in PRESETS:
        scen = Scenario.preset(arg)
    else:
        scen = Scenario.from_dict(io.read_json(arg))
    if seed is not None:
        scen.cfg["seed"] = seed
    return scen


def cmd_simulate(args):
    seed = args.seed
    if os.environ.get("FUSION_SEED") is not None:
        seed = int(os.environ["FUSION_SEED"])
    ds = simulate(_scenario(args.scenario, seed))
    out = io.write_dataset(ds, args.out)
    n_slip = sum(1 for e in ds.gnss.schedule.events if e.type == "cycle_slip")
    print(f"wrote {out} ({len(ds.gnss.t)} GNSS epochs, {len(ds.features)} frames, {n_slip} slips)")
    return EXIT_OK


def cmd_run(args):
    cfg = RunConfig.from_json(args.config)
    if args.out:
        cfg.out = args.out
    if not cfg.out:
        raise io.InputError("config has no 'out' directory")
    res = run(cfg)
    m = res.metrics
    print(f"{cfg.mode}: {m['epochs']} epochs, 3D RMSE {_fmt(m['rmse']['3D'])} m, fix rate {m['fix_rate']:.3f}")
    print(f"outputs in {cfg.out}")
    return EXIT_OK


def cmd_score(args):
    run_dir = Path(args.run)
    reports = io.read_edm_reports(run_dir / "edm_reports.jsonl")
    labels = io.read_jsonl(args.labels)
    out = {"detection": score_detection(reports, labels), "multipath": score_multipath(reports, labels)}
    out["detection"].pop("missed")
    truth = Path(args.labels).parent / "truth_trajectory.csv"
    if truth.is_file() and (run_dir / "trajectory.csv").is_file():
        _, err = position_errors(io.read_trajectory_csv(run_dir / "trajectory.csv"), io.read_truth_csv(truth))
        out["rmse"] = rmse(err)
    text = json.dumps(out, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_compare(args):
    rows = compare([r for r in args.runs.split(",") if r])
    cols = ["run", "mode", "rmse_E", "rmse_N", "rmse_U", "rmse_3D", "fix_rate", "missed_rate", "false_alarms"]
    print("\t".join(cols))
    for r in rows:
        print("\t".join(_fmt(r[c]) for c in cols))
    return EXIT_OK


def _fmt(x):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.4f}"
    return str(x)


def build_parser():
    p = argparse.ArgumentParser(prog="fusionctl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("simulate", help="generate a dataset directory")
    s.add_argument("--scenario", required=True, help=f"scenario JSON or preset ({', '.join(PRESETS)})")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)
    r = sub.add_parser("run", help="run one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="override the output directory")
    r.set_defaults(func=cmd_run)
    c = sub.add_parser("score", help="score a run against truth labels")
    c.add_argument("--run", required=True)
    c.add_argument("--labels", required=True)
    c.add_argument("--out")
    c.set_defaults(func=cmd_score)
    m = sub.add_parser("compare", help="tabulate metrics of several runs")
    m.add_argument("--runs", required=True, help="comma-separated run directories")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"fusionctl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.InputError, DataGapError, ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"fusionctl: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
