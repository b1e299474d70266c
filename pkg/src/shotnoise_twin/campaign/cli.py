"""
Command line entry point.

    shotnoise-twin [--config FILE] [--seed N] [--out DIR] [--runs N] <recipe> [options]

Each recipe writes into ``<out>/<recipe>/``: one CSV per table, a
``summary.json`` with fit parameters and check verdicts, the effective
``config.json`` and per-dataset trace CSVs.  ``report`` collects the
summaries already present under ``<out>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from ..calibration import OutOfRangeError
from ..ensemble import CloudState
from ..imaging import render_frame, write_traces_csv
from . import config as config_mod
from . import recipes
from .runner import run_rng

log = logging.getLogger("shotnoise_twin")

RECIPES = ("scan-noise", "correlate", "calibrate", "stabilize")


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path, table: recipes.Table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(data), fh, indent=2, sort_keys=True)
        fh.write("\n")


def dump_frames(result: recipes.RecipeResult, cfg, directory) -> int:
    """
    Render 16-bit frames for the first ``cfg.frame_dump_runs`` runs of every dataset.

    Frames are drawn from the recorded ground truth with their own random
    stream, so dumping never changes the simulated numbers.
    """
    n = 0
    os.makedirs(directory, exist_ok=True)
    for label, traces in result.traces.items():
        for tr in traces:
            if tr.run >= cfg.frame_dump_runs or tr.n_atoms is None:
                continue
            img_cfg = cfg.f1 if tr.series == "F1" else cfg.f2
            rng = run_rng(cfg.seed, f"frames:{result.name}:{label}:{tr.series}", tr.run)
            for k, atoms in enumerate(tr.n_atoms):
                frame = render_frame(CloudState(int(atoms), tr.temperature), img_cfg, cfg.rois,
                                     cfg.truth_surface, rng)
                frame.save_pgm(os.path.join(directory, f"{label}_run{tr.run:04d}_{tr.series}_{k:03d}.pgm"))
                n += 1
    return n


def write_result(result: recipes.RecipeResult, cfg, out_dir) -> str:
    directory = os.path.join(out_dir, result.name)
    os.makedirs(directory, exist_ok=True)
    for stem, table in result.tables.items():
        write_table(os.path.join(directory, f"{stem}.csv"), table)
    for stem, traces in result.traces.items():
        write_traces_csv(os.path.join(directory, f"{stem}.csv"), traces)
    summary = dict(result.summary)
    summary["recipe"] = result.name
    summary["seed"] = cfg.seed
    write_json(os.path.join(directory, "summary.json"), summary)
    cfg.save(os.path.join(directory, "config.json"))
    if cfg.frame_dump_runs > 0:
        n = dump_frames(result, cfg, os.path.join(directory, "frames"))
        log.info("wrote %d frames", n)
    return directory


def collect_report(out_dir) -> dict:
    report = {}
    for name in sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []:
        path = os.path.join(out_dir, name, "summary.json")
        if os.path.isfile(path):
            with open(path, encoding="utf-8") as fh:
                s = json.load(fh)
            report[s.get("recipe", name)] = {"seed": s.get("seed"), "checks": s.get("checks", {}),
                                             "failure": s.get("failure")}
    return report


def write_report(out_dir) -> tuple[str, dict]:
    report = collect_report(out_dir)
    if not report:
        raise FileNotFoundError(f"no recipe summaries found under {out_dir}")
    table = recipes.Table(["recipe", "check", "verdict"])
    for name, entry in report.items():
        for check, verdict in sorted(entry["checks"].items()):
            table.rows.append([name, check, "n/a" if verdict is None else ("pass" if verdict else "fail")])
    write_table(os.path.join(out_dir, "report.csv"), table)
    write_json(os.path.join(out_dir, "report.json"), report)
    return os.path.join(out_dir, "report.csv"), report


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shotnoise-twin", description=__doc__.split("\n\n")[0].strip())
    ap.add_argument("--config", help="JSON campaign config; unspecified fields keep their defaults")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--runs", type=int, help="runs per dataset (overrides the config)")
    ap.add_argument("--workers", type=int, help="worker processes; results do not depend on it")
    ap.add_argument("--frames", type=int, metavar="N", help="dump 16-bit PGM frames of the first N runs per dataset")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan-noise", help="imaging noise versus pulse duration")
    p.add_argument("--disable-loss", action="store_true", help="switch off imaging-induced atom loss")
    p.add_argument("--t-grid", type=float, nargs="+", metavar="MS", help="pulse durations in ms")

    p = sub.add_parser("correlate", help="F1/F2 correlation noise for fixed loss settings")
    p.add_argument("--survivals", type=float, nargs="+", metavar="P")

    p = sub.add_parser("calibrate", help="iterative calibration of the feedback gains")
    p.add_argument("--survival", type=float, metavar="P", help="target fraction of the free-running atom number")
    p.add_argument("--perturb", type=float, metavar="S", help="relative spread of the initial gain guess")

    p = sub.add_parser("stabilize", help="feedback-stabilized datasets versus the shot-noise band")
    p.add_argument("--survivals", type=float, nargs="+", metavar="P")

    sub.add_parser("report", help="collect the check verdicts of all summaries under --out")
    return ap


def effective_config(args) -> config_mod.CampaignConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.CampaignConfig()
    top = {k: v for k, v in (("seed", args.seed), ("out", args.out), ("runs", args.runs),
                               ("workers", args.workers), ("frame_dump_runs", args.frames)) if v is not None}
    cfg = replace(cfg, **top)
    cmd = args.command
    if cmd == "scan-noise":
        ns = cfg.noise_scan
        if args.disable_loss:
            ns = replace(ns, disable_loss=True)
        if args.t_grid:
            ns = replace(ns, t_grid=list(args.t_grid))
        cfg = replace(cfg, noise_scan=ns)
    elif cmd == "correlate" and args.survivals:
        cfg = replace(cfg, correlation=replace(cfg.correlation, survivals=list(args.survivals)))
    elif cmd == "calibrate":
        cc = cfg.calibrate
        if args.survival is not None:
            cc = replace(cc, survival=args.survival)
        if args.perturb is not None:
            cc = replace(cc, gain_perturbation=args.perturb)
        cfg = replace(cfg, calibrate=cc)
    elif cmd == "stabilize" and args.survivals:
        cfg = replace(cfg, stabilize=replace(cfg.stabilize, survivals=list(args.survivals)))
    return cfg


def run_recipe(cfg, command: str) -> recipes.RecipeResult:
    if command == "scan-noise":
        return recipes.recipe_noise_scan(cfg)
    if command == "correlate":
        return recipes.recipe_correlation(cfg)
    if command == "calibrate":
        return recipes.recipe_calibrate(cfg)
    if command == "stabilize":
        return recipes.recipe_stabilize(cfg)
    raise ValueError(f"unknown recipe {command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
        if args.command == "report":
            path, report = write_report(cfg.out)
            for name, entry in report.items():
                for check, verdict in sorted(entry["checks"].items()):
                    print(f"{name:<11} {check:<48} {'n/a' if verdict is None else ('pass' if verdict else 'fail')}")
            print(f"wrote {path}")
            return 0
        result = run_recipe(cfg, args.command)
        directory = write_result(result, cfg, cfg.out)
    except (ValueError, OutOfRangeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    checks = result.summary.get("checks", {})
    for check, verdict in sorted(checks.items()):
        print(f"{check:<48} {'n/a' if verdict is None else ('pass' if verdict else 'fail')}")
    print(f"wrote {directory}")
    return 1 if "failure" in result.summary else 0


if __name__ == "__main__":
    sys.exit(main())
