"""File formats: graymap frames, ASCII grids, per-epoch CSVs, scenario configs and
bundle export for replay."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, FisheyeFrame
from .core import OverallState, SatelliteState, VehicleState
from .gnss import PseudorangeSet, VisionCoefficients
from .graph import Control

# --------------------------------------------------------------------------
# images and grids


def read_pgm(path) -> np.ndarray:
    """Plain (P2) or raw (P5) graymap as a float grid."""
    with Image.open(path) as im:
        if im.format != "PPM" or im.mode not in ("L", "I", "I;16", "I;16B"):
            raise ValueError(f"{path}: not a portable graymap")
        return np.asarray(im, dtype=float)


def write_pgm(path, intensities):
    img = np.clip(np.rint(np.asarray(intensities, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")


def read_grid(path) -> np.ndarray:
    """Whitespace separated ASCII reals; ``nan`` marks missing values."""
    return np.atleast_2d(np.loadtxt(path, dtype=float))


def write_grid(path, grid, fmt="%.6g"):
    np.savetxt(path, np.asarray(grid, dtype=float), fmt=fmt)


def load_frame(image_path, depth_path=None, timestamp=0.0) -> FisheyeFrame:
    img = read_pgm(image_path)
    if depth_path is None:
        return FisheyeFrame(img, timestamp)
    d = read_grid(depth_path)
    d = np.where(d > 0, d, np.nan)
    return FisheyeFrame(img, timestamp, d, True)


def write_sky_mask(path_pbm, mask, path_grid=None):
    """Sky pixels are written white (bit 0), non-sky black, as in the bitmap convention."""
    Image.fromarray(np.asarray(mask.is_sky, dtype=bool)).save(path_pbm, format="PPM")
    if path_grid is not None:
        write_grid(path_grid, mask.probability, fmt="%.4f")


def read_sky_bitmap(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


# --------------------------------------------------------------------------
# per-epoch CSVs

def _num(x):
    return repr(float(x))


def _writer(path, header):
    f = open(path, "w", newline="")
    w = csv.writer(f)
    w.writerow(header)
    return f, w


def write_pseudoranges(path, sets):
    f, w = _writer(path, ["epoch", "prn", "rho", "cn0"])
    with f:
        for i, s in enumerate(sets):
            for p, r, c in zip(s.prn, s.rho, s.cn0):
                w.writerow([i, int(p), _num(r), _num(c)])


def read_pseudoranges(path, times=None) -> list:
    rows: dict[int, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.setdefault(int(row["epoch"]), []).append((int(row["prn"]), float(row["rho"]), float(row["cn0"])))
    out = []
    for i in sorted(rows):
        prn, rho, cn0 = zip(*rows[i])
        t = float(times[i]) if times is not None else float(i)
        out.append(PseudorangeSet(prn, rho, cn0, epoch=t))
    return out


ESTIMATE_HEADER = ["epoch", "t", "x", "y", "z", "clk", "vx", "vy", "vz", "roll", "pitch", "yaw",
                   "cost", "iterations"]


def write_estimates(path, results):
    f, w = _writer(path, ESTIMATE_HEADER)
    with f:
        for r in results:
            v = r.state.vehicle
            w.writerow([r.index, r.t, *v.pos, v.clk_bias, *v.vel, *v.att, r.cost, r.iterations])


def write_faults(path, results, vision=True):
    """One row per measurement: kind (gps/superpixel), id, status; plus the mode bitstring."""
    f, w = _writer(path, ["epoch", "kind", "id", "status"])
    with f:
        for r in results:
            prn = r.prn if r.prn is not None else range(len(r.gps_status))
            for p, s in zip(prn, r.gps_status):
                w.writerow([r.index, "gps", int(p), f"{s:.6f}"])
            if vision and r.superpixel_status is not None:
                for sp, s in zip(r.superpixels, r.superpixel_status):
                    w.writerow([r.index, "superpixel", sp.id, f"{s:.6f}"])
            w.writerow([r.index, "mode", "", "".join(str(int(b)) for b in r.fault_mode)])


INTEGRITY_HEADER = ["epoch", "zeta", "chi2_threshold", "slope2", "pl", "n_b"]


def write_integrity(path, results):
    f, w = _writer(path, INTEGRITY_HEADER)
    with f:
        for r in results:
            rep = r.report
            w.writerow([r.index, rep.zeta, rep.chi2_threshold, rep.slope2, rep.pl, rep.n_b])


def read_table(path) -> dict:
    """Numeric CSV columns as arrays (non-numeric columns are skipped)."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    out = {}
    for k in rows[0].keys() if rows else []:
        try:
            out[k] = np.array([float(r[k]) for r in rows])
        except ValueError:
            continue
    return out


def write_plot(path, x, y):
    np.savetxt(path, np.column_stack([x, y]), fmt="%.6f")


# --------------------------------------------------------------------------
# scenario configuration

def scenario_to_config(scn) -> dict:
    """Config dict of a scenario. Constellation and facades are not serialised;
    they come back from the preset named after the scenario."""
    from .sim import PRESETS

    cfg = {"preset": scn.name} if scn.name in PRESETS else {}
    cfg.update({
        "name": scn.name, "duration": scn.duration, "rate": scn.rate, "origin": list(scn.origin),
        "waypoints": [list(w) for w in scn.waypoints], "speed": scn.speed, "seed": scn.seed,
        "multipath": [asdict(m) for m in scn.multipath],
        "illumination": [dict(asdict(f), region=list(f.region)) for f in scn.illumination],
        "noise": asdict(scn.noise), "coeffs": asdict(scn.coeffs), "render": scn.render,
    })
    return cfg


def scenario_from_config(cfg: dict):
    """Build a scenario from a config dict.

    ``preset`` (optional) selects the starting point; every other key
    overrides the matching scenario field. Constellation and facades come
    from the preset only.
    """
    from dataclasses import replace

    from .sim import PRESETS
    from .sim.scenario import IlluminationFault, MultipathFault, NoiseLevels, Scenario

    cfg = dict(cfg)
    preset = cfg.pop("preset", None)
    seed = int(cfg.pop("seed", 0))
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        scn = PRESETS[preset](seed)
    else:
        scn = Scenario(seed=seed)
    kw = {}
    known = {f.name for f in fields(Scenario)}
    for k, v in cfg.items():
        if k not in known:
            raise ValueError(f"unknown scenario key {k!r}")
        if k == "multipath":
            v = [MultipathFault(**m) for m in v]
        elif k == "illumination":
            v = [IlluminationFault(**dict(m, region=tuple(m["region"]))) for m in v]
        elif k == "noise":
            v = NoiseLevels(**v)
        elif k == "coeffs":
            v = VisionCoefficients(**v)
        elif k == "intr":
            v = CameraIntrinsics(**v)
        elif k in ("origin",):
            v = tuple(v)
        elif k == "waypoints":
            v = [tuple(w) for w in v]
        kw[k] = v
    return replace(scn, **kw)


def load_scenario(path):
    with open(path) as f:
        return scenario_from_config(json.load(f))


def save_scenario(path, scn):
    with open(path, "w") as f:
        json.dump(scenario_to_config(scn), f, indent=2)


# --------------------------------------------------------------------------
# bundle export / replay

def export_bundles(directory, bundles):
    """Write bundles as CSVs plus one graymap (and depth grid) per frame."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    bundles = list(bundles)
    write_pseudoranges(d / "pseudoranges.csv", [b.pseudoranges for b in bundles])
    f, w = _writer(d / "epochs.csv", ["epoch", "t", "dt", "ax", "ay", "az", "wx", "wy", "wz",
                                      *[f"truth{i}" for i in range(11)]])
    with f:
        for b in bundles:
            w.writerow([b.index, _num(b.t), _num(b.dt), *map(_num, b.control.accel), *map(_num, b.control.rates),
                        *map(_num, b.truth.vehicle.to_vector())])
    f, w = _writer(d / "satellites.csv", ["epoch", "prn", "kind", *[f"s{i}" for i in range(8)]])
    with f:
        for b in bundles:
            for s in b.ephemeris_prior:
                w.writerow([b.index, s.prn, "prior", *map(_num, s.to_vector())])
            for s in b.truth.satellites:
                w.writerow([b.index, s.prn, "truth", *map(_num, s.to_vector())])
    labels = {}
    for b in bundles:
        labels[b.index] = {"multipath": {str(k): v for k, v in b.labels.get("multipath", {}).items()},
                           "nlos": list(map(int, b.labels.get("nlos", []))),
                           "illumination": [[list(r), o] for r, o in b.labels.get("illumination", [])]}
        if b.frame is not None:
            write_pgm(d / f"frame_{b.index:04d}.pgm", b.frame.intensities)
            if b.inverse_depth is not None:
                write_grid(d / f"depth_{b.index:04d}.txt", np.nan_to_num(b.inverse_depth, nan=0.0))
            if b.sky_truth is not None:
                Image.fromarray(np.asarray(b.sky_truth, bool)).save(d / f"sky_{b.index:04d}.pbm", format="PPM")
    with open(d / "labels.json", "w") as f:
        json.dump(labels, f)


def load_bundles(directory) -> list:
    from .sim.scenario import EpochBundle

    d = Path(directory)
    ep = read_table(d / "epochs.csv")
    times = ep["t"]
    prs = read_pseudoranges(d / "pseudoranges.csv", times)
    sats: dict = {}
    with open(d / "satellites.csv", newline="") as f:
        for row in csv.DictReader(f):
            v = np.array([float(row[f"s{i}"]) for i in range(8)])
            sats.setdefault((int(row["epoch"]), row["kind"]), []).append(
                SatelliteState.from_vector(v, prn=int(row["prn"])))
    with open(d / "labels.json") as f:
        labels = json.load(f)
    out = []
    for j, i in enumerate(ep["epoch"].astype(int)):
        truth = OverallState(VehicleState.from_vector([ep[f"truth{k}"][j] for k in range(11)]),
                             sats.get((i, "truth"), []))
        ctrl = Control([ep[k][j] for k in ("ax", "ay", "az")], [ep[k][j] for k in ("wx", "wy", "wz")])
        img = d / f"frame_{i:04d}.pgm"
        frame = FisheyeFrame(read_pgm(img), float(times[j])) if img.exists() else None
        dep = d / f"depth_{i:04d}.txt"
        inv = None
        if dep.exists():
            inv = read_grid(dep)
            inv = np.where(inv > 0, inv, np.nan)
        skyp = d / f"sky_{i:04d}.pbm"
        sky = read_sky_bitmap(skyp) if skyp.exists() else None
        lab = labels.get(str(i), {})
        lab = {"multipath": {int(k): v for k, v in lab.get("multipath", {}).items()},
               "nlos": lab.get("nlos", []),
               "illumination": [(tuple(r), o) for r, o in lab.get("illumination", [])]}
        out.append(EpochBundle(i, float(times[j]), truth, prs[j], sats.get((i, "prior"), []), ctrl,
                               float(ep["dt"][j]), frame, inv, sky, lab))
    return out
