"""Run scoring against simulator truth: accuracy, protection levels and FDI."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..fdi import voting_superpixels


@dataclass
class RunSummary:
    n_epochs: int
    rmse: float
    error_std: float
    mean_pl: float
    gps_precision: float
    gps_recall: float
    violation_rate: float
    vision_hit_rate: float = float("nan")
    vision_epochs: int = 0
    gps_tp: int = 0
    gps_fp: int = 0
    gps_fn: int = 0

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "RunSummary":
        vals = {}
        for line in text.splitlines():
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = v
        kw = {}
        for f in fields(cls):
            if f.name in vals:
                kw[f.name] = int(vals[f.name]) if f.type in (int, "int") else float(vals[f.name])
        return cls(**kw)


def position_errors(estimates, truths) -> np.ndarray:
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    tru = np.asarray(truths, dtype=float).reshape(-1, 3)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth sequences differ in length")
    return np.linalg.norm(est - tru, axis=1)


def gps_fdi_counts(statuses, prns, faulty, kappa=0.5):
    """(tp, fp, fn) of ``status > kappa`` against the set of faulty PRNs, summed over epochs."""
    tp = fp = fn = 0
    for s, p, bad in zip(statuses, prns, faulty):
        flag = np.asarray(s) > kappa
        truth = np.isin(np.asarray(p), list(bad))
        tp += int(np.sum(flag & truth))
        fp += int(np.sum(flag & ~truth))
        fn += int(np.sum(~flag & truth))
    return tp, fp, fn


def _ratio(a, b):
    return a / b if b else float("nan")


def offset_map(bundle) -> np.ndarray | None:
    """Illumination offset applied to a bundle's frame, rebuilt from its labels."""
    if bundle.frame is None:
        return None
    out = np.zeros(bundle.frame.shape)
    H, W = out.shape
    for (u0, v0, u1, v1), off in bundle.labels.get("illumination", []):
        out[max(v0, 0):min(v1, H), max(u0, 0):min(u1, W)] += off
    return out


def corrupted_superpixels(superpixels, kf_offsets, cur_offsets, min_fraction=0.5) -> np.ndarray:
    """Boolean per superpixel: more than ``min_fraction`` of its valid pairs see
    a different illumination offset in the keyframe and the current frame."""
    out = np.zeros(len(superpixels), dtype=bool)
    H, W = cur_offsets.shape
    for k, sp in enumerate(superpixels):
        if sp.warped is None:
            continue
        ok = np.isfinite(sp.received) & np.isfinite(sp.expected)
        if not ok.any():
            continue
        px = sp.pixels[ok]
        wu = np.rint(sp.warped[ok]).astype(int)
        wu[:, 0] = np.clip(wu[:, 0], 0, W - 1)
        wu[:, 1] = np.clip(wu[:, 1], 0, H - 1)
        d = kf_offsets[px[:, 1], px[:, 0]] - cur_offsets[wu[:, 1], wu[:, 0]]
        out[k] = np.mean(d != 0) > min_fraction
    return out


def vision_hits(results, bundles):
    """(hits, faulted epochs): epochs where a corrupted superpixel exists and one of
    them holds the maximum vision fault status."""
    by_index = {b.index: b for b in bundles}
    hits = total = 0
    for r in results:
        if r.superpixel_status is None or r.keyframe_epoch is None:
            continue
        cur, kf = by_index[r.index], by_index.get(r.keyframe_epoch)
        if kf is None or cur.frame is None or kf.frame is None:
            continue
        if not (cur.labels.get("illumination") or kf.labels.get("illumination")):
            continue
        bad = corrupted_superpixels(r.superpixels, offset_map(kf), offset_map(cur))
        if not bad.any():
            continue
        total += 1
        # penalty values of non-voting superpixels are not measurements
        vote = np.zeros(len(bad), dtype=bool)
        vote[voting_superpixels(r.superpixels)] = True
        s = np.asarray(r.superpixel_status)
        clean = vote & ~bad
        if (bad & vote).any():
            top = np.max(s[bad & vote])
            hits += int(top > 0 and (not clean.any() or top > np.max(s[clean])))
    return hits, total


def score_run(results, bundles, kappa=0.5, fdi_start=30) -> RunSummary:
    """Score a run. ``results`` are per-epoch pipeline outputs aligned with ``bundles``.

    GPS FDI is scored from epoch ``fdi_start`` on (the open-sky calibration
    window has no status). The violation rate counts epochs with a non-empty
    fault mode whose 3D error exceeds the PL.
    """
    results, bundles = list(results), list(bundles)
    if len(results) != len(bundles):
        raise ValueError(f"{len(results)} results for {len(bundles)} bundles")
    err = position_errors([r.state.vehicle.pos for r in results], [b.truth.vehicle.pos for b in bundles])
    pl = np.array([r.report.pl for r in results])
    nb = np.array([r.report.n_b for r in results])
    sel = [i for i, b in enumerate(bundles) if b.index >= fdi_start]
    tp, fp, fn = gps_fdi_counts([results[i].gps_status for i in sel],
                                [bundles[i].pseudoranges.prn for i in sel],
                                [set(bundles[i].labels.get("multipath", {})) for i in sel], kappa)
    bounded = nb > 0
    hits, total = vision_hits(results, bundles)
    return RunSummary(
        n_epochs=len(results),
        rmse=float(np.sqrt(np.mean(err ** 2))) if len(err) else float("nan"),
        error_std=float(np.std(err)) if len(err) else float("nan"),
        mean_pl=float(pl.mean()) if len(pl) else float("nan"),
        gps_precision=_ratio(tp, tp + fp),
        gps_recall=_ratio(tp, tp + fn),
        violation_rate=float(np.mean(err[bounded] > pl[bounded])) if bounded.any() else 0.0,
        vision_hit_rate=_ratio(hits, total),
        vision_epochs=total,
        gps_tp=tp, gps_fp=fp, gps_fn=fn,
    )
