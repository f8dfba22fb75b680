"""Command line runner: ``slamim run`` and ``slamim compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .graph import WindowConfig
from .pipeline import PipelineConfig, run_scored
from .sim import PRESETS
from .sim.score import RunSummary

log = logging.getLogger("slamim")

OUTPUTS = ("estimates.csv", "faults.csv", "integrity.csv", "summary.txt")
PLOTS = ("plot_error.dat", "plot_pl.dat", "plot_gps_status.dat")
RUN_KEYS = ("scenario", "preset", "suite", "pfa", "pmd", "kappa", "eta", "window", "seed", "out")
BETTER_LOW = ("rmse", "error_std", "mean_pl", "violation_rate")


class CliError(Exception):
    pass


def _run_parser(sub):
    p = sub.add_parser("run", help="simulate (or load) a scenario and run the estimator")
    p.add_argument("--config", help="JSON run config; its keys override the flags")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--scenario", help="JSON scenario file")
    src.add_argument("--preset", choices=sorted(PRESETS), help="built-in scenario")
    p.add_argument("--suite", choices=("gps_only", "gps_vision"), default="gps_vision")
    p.add_argument("--pfa", type=float, default=0.01)
    p.add_argument("--pmd", type=float, default=0.05)
    p.add_argument("--kappa", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=0.3)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    p.add_argument("--out", default="out")
    p.add_argument("--monte-carlo", type=int, default=0, metavar="N",
                   help="N seeded runs starting at --seed, each in its own subdirectory")
    p.add_argument("--workers", type=int, default=1)


def build_parser():
    ap = argparse.ArgumentParser(prog="slamim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _run_parser(sub)
    c = sub.add_parser("compare", help="compare two scored run directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.add_argument("--out", help="write the comparison here as well")
    return ap


# --------------------------------------------------------------------------
# run

def resolve_run_config(args) -> dict:
    cfg = {k: getattr(args, k, None) for k in RUN_KEYS}
    if args.config:
        try:
            with open(args.config) as f:
                extra = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(extra) - set(RUN_KEYS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(extra)
    if cfg["scenario"] and cfg["preset"]:
        raise CliError("give either a scenario file or a preset, not both")
    if not cfg["scenario"] and not cfg["preset"]:
        cfg["preset"] = "urban_canyon"
    if cfg["scenario"] and not Path(cfg["scenario"]).is_file():
        raise CliError(f"scenario file not found: {cfg['scenario']}")
    for k in ("pfa", "pmd", "kappa", "eta"):
        if not 0 < float(cfg[k]) < 1:
            raise CliError(f"{k} must lie in (0, 1)")
    if int(cfg["window"]) < 1:
        raise CliError("window must be >= 1")
    return cfg


def make_scenario(cfg):
    if cfg["scenario"]:
        try:
            scn = io.load_scenario(cfg["scenario"])
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise CliError(f"bad scenario file {cfg['scenario']}: {exc}") from exc
        if cfg["seed"] is not None:
            scn = replace(scn, seed=int(cfg["seed"]))
    else:
        scn = PRESETS[cfg["preset"]](int(cfg["seed"] or 0))
    if cfg["suite"] == "gps_only":
        scn = replace(scn, render=False)
    return scn


def execute(cfg, out: Path) -> RunSummary:
    scn = make_scenario(cfg)
    pcfg = PipelineConfig(suite=cfg["suite"], window=WindowConfig(T=int(cfg["window"])),
                          p_fa=float(cfg["pfa"]), p_md=float(cfg["pmd"]), kappa=float(cfg["kappa"]),
                          eta=float(cfg["eta"]), seed=scn.seed)
    results, bundles, summary = run_scored(scn, pcfg)
    write_outputs(out, scn, cfg, results, bundles, summary)
    return summary


def write_outputs(out: Path, scn, cfg, results, bundles, summary):
    out.mkdir(parents=True, exist_ok=True)
    vision = cfg["suite"] == "gps_vision"
    io.write_estimates(out / "estimates.csv", results)
    io.write_faults(out / "faults.csv", results, vision=vision)
    io.write_integrity(out / "integrity.csv", results)
    head = f"scenario = {scn.name}\nseed = {scn.seed}\nsuite = {cfg['suite']}\nepochs = {len(results)}\n"
    (out / "summary.txt").write_text(head + summary.to_text())
    t = np.array([r.t for r in results])
    err = np.array([np.linalg.norm(r.state.vehicle.pos - b.truth.vehicle.pos) for r, b in zip(results, bundles)])
    io.write_plot(out / "plot_error.dat", t, err)
    io.write_plot(out / "plot_pl.dat", t, [r.report.pl for r in results])
    io.write_plot(out / "plot_gps_status.dat", t, [float(np.mean(r.gps_status)) for r in results])
    if vision:
        vs = [float(np.mean(r.superpixel_status)) if r.superpixel_status is not None else np.nan for r in results]
        io.write_plot(out / "plot_vision_status.dat", t, vs)
    verify_outputs(out, len(results))


def verify_outputs(out: Path, n_epochs):
    missing = [n for n in OUTPUTS + PLOTS if not (out / n).is_file()]
    if missing:
        raise CliError(f"outputs not written: {missing}")
    for name in ("estimates.csv", "integrity.csv"):
        tab = io.read_table(out / name)
        if len(tab.get("epoch", [])) != n_epochs:
            raise CliError(f"{name} does not parse back to {n_epochs} epochs")
    io.read_table(out / "faults.csv")
    read_summary(out)
    for p in out.glob("plot_*.dat"):
        data = np.loadtxt(p, ndmin=2)
        if data.shape != (n_epochs, 2):
            raise CliError(f"{p.name} is not a two-column file with {n_epochs} rows")


def read_summary(directory):
    path = Path(directory) / "summary.txt"
    try:
        text = path.read_text()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    meta = dict((s.strip() for s in line.split("=", 1)) for line in text.splitlines() if "=" in line)
    return meta, RunSummary.from_text(text)


def cmd_run(args) -> int:
    cfg = resolve_run_config(args)
    out = Path(cfg["out"])
    n = int(getattr(args, "monte_carlo", 0) or 0)
    if n <= 0:
        s = execute(cfg, out)
        print(s.to_text(), end="")
        return 0
    base = int(cfg["seed"] or 0)
    cfgs = [dict(cfg, seed=base + i) for i in range(n)]

    def one(c):
        return execute(c, out / f"seed_{int(c['seed']):04d}")

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as ex:
        sums = list(ex.map(one, cfgs))
    keys = ("rmse", "error_std", "mean_pl", "gps_precision", "gps_recall", "violation_rate", "vision_hit_rate")
    lines = [f"runs = {n}"]
    for k in keys:
        v = np.array([getattr(s, k) for s in sums], dtype=float)
        lines.append(f"{k}_mean = {np.nanmean(v) if np.isfinite(v).any() else float('nan')}")
    (out / "monte_carlo.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# --------------------------------------------------------------------------
# compare

def compare(dir_a, dir_b) -> str:
    meta_a, a = read_summary(dir_a)
    meta_b, b = read_summary(dir_b)
    for k in ("scenario", "seed", "epochs"):
        if meta_a.get(k) != meta_b.get(k):
            raise CliError(f"runs differ in {k}: {meta_a.get(k)} vs {meta_b.get(k)}")
    la, lb = meta_a.get("suite", "a"), meta_b.get("suite", "b")
    rows = [f"{'metric':<16}{la:>14}{lb:>14}{'delta':>12}  better"]
    for k in BETTER_LOW:
        va, vb = getattr(a, k), getattr(b, k)
        d = vb - va
        better = "same" if d == 0 else (la if va < vb else lb)
        rows.append(f"{k:<16}{va:>14.4f}{vb:>14.4f}{d:>12.4f}  {better}")
    return "\n".join(rows) + "\n"


def cmd_compare(args) -> int:
    text = compare(args.run_a, args.run_b)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return cmd_run(args) if args.command == "run" else cmd_compare(args)
    except CliError as exc:
        print(f"slamim: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"slamim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
