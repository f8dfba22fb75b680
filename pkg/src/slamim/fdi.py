"""Fault detection and isolation.

GPS: each residual is scored against an empirical Gaussian fitted in open
sky. Vision: superpixels of the keyframe vote on a received-vs-expected
intensity line fitted by RANSAC; a superpixel whose line explains nobody
else is flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats
from skimage.segmentation import slic

from .camera import CameraIntrinsics, FisheyeFrame, RelativePose, bilinear, project_valid, warp

MIN_CALIBRATION = 30
DEFAULT_PENALTY = 0.5
FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class EmpiricalGaussian:
    mean: float
    std: float
    n: int = MIN_CALIBRATION

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    @classmethod
    def fit(cls, samples) -> "EmpiricalGaussian":
        x = np.asarray(samples, dtype=float).ravel()
        x = x[np.isfinite(x)]
        if x.size < MIN_CALIBRATION:
            raise ValueError(f"need >= {MIN_CALIBRATION} samples, got {x.size}")
        return cls(float(x.mean()), float(x.std(ddof=1)), int(x.size))


def gps_fault_status(residual, dist: EmpiricalGaussian):
    z = (np.asarray(residual, dtype=float) - dist.mean) / dist.std
    r = 4.0 * (stats.norm.cdf(z) - 0.5) ** 2
    return float(r) if r.ndim == 0 else r


class GpsFaultMonitor:
    """Per-satellite calibration followed by status scoring.

    Residuals from the first ``calibration_epochs`` epochs (open sky) build
    one empirical Gaussian per PRN. Until a PRN is calibrated its status is
    ``uncalibrated_status``.
    """

    def __init__(self, calibration_epochs=MIN_CALIBRATION, uncalibrated_status=DEFAULT_PENALTY):
        if calibration_epochs < MIN_CALIBRATION:
            raise ValueError(f"calibration window must hold >= {MIN_CALIBRATION} epochs")
        self.calibration_epochs = calibration_epochs
        self.uncalibrated_status = uncalibrated_status
        self._samples: dict[int, list] = {}
        self.dists: dict[int, EmpiricalGaussian] = {}
        self._epochs = 0

    def update(self, prns, residuals) -> np.ndarray:
        prns = np.asarray(prns, dtype=int)
        residuals = np.asarray(residuals, dtype=float)
        calibrating = self._epochs < self.calibration_epochs
        self._epochs += 1
        out = np.full(len(prns), self.uncalibrated_status)
        for i, (p, r) in enumerate(zip(prns, residuals)):
            if calibrating:
                self._samples.setdefault(int(p), []).append(r)
                continue
            if p not in self.dists and len(self._samples.get(int(p), [])) >= MIN_CALIBRATION:
                self.dists[int(p)] = EmpiricalGaussian.fit(self._samples[int(p)])
            if p in self.dists:
                out[i] = gps_fault_status(r, self.dists[int(p)])
        return out


# --------------------------------------------------------------------------
# superpixels

@dataclass
class Superpixel:
    id: int
    pixels: np.ndarray                # (M, 2) integer (x, y) keyframe coordinates
    received: np.ndarray | None = None   # I_kf(u)
    expected: np.ndarray | None = None   # I_t(pi(w(u)))
    warped: np.ndarray | None = None     # pi(w(u)) in the current frame

    @property
    def size(self):
        return len(self.pixels)

    def pairs(self):
        """Finite (received, expected) pairs as an (m, 2) array."""
        if self.received is None or self.expected is None:
            return np.zeros((0, 2))
        ok = np.isfinite(self.received) & np.isfinite(self.expected)
        return np.column_stack([self.received[ok], self.expected[ok]])


def segment_superpixels(frame, non_sky, target_count=64, min_size=20, compactness=0.1):
    """SLIC clustering in (intensity, x, y) restricted to non-sky pixels.

    Returns (superpixels, label image); label 0 marks sky or discarded pixels.
    Clusters are 4-connected and smaller ones than ``min_size`` are dropped.
    """
    image = frame.intensities if isinstance(frame, FisheyeFrame) else np.asarray(frame, float)
    mask = getattr(non_sky, "is_sky", None)
    mask = ~mask if mask is not None else np.asarray(non_sky, dtype=bool)
    labels = np.zeros(image.shape, dtype=int)
    if mask.sum() < min_size:
        return [], labels
    # masked SLIC seeds differently from the plain grid, so only mask when needed
    raw = slic(image / 255.0, n_segments=target_count, compactness=compactness, channel_axis=None,
               start_label=1, mask=None if mask.all() else mask, enforce_connectivity=True)
    raw[~mask] = 0
    out = []
    for i in np.unique(raw[raw > 0]):
        # SLIC connectivity is 8-neighbour; split into 4-connected pieces
        comp, n = ndimage.label(raw == i, structure=FOUR)
        for c in range(1, n + 1):
            yy, xx = np.nonzero(comp == c)
            if len(yy) < min_size:
                continue
            sid = len(out) + 1
            labels[yy, xx] = sid
            out.append(Superpixel(sid, np.column_stack([xx, yy])))
    return out, labels


def attach_intensity_pairs(superpixels, kf: FisheyeFrame, cur: FisheyeFrame, pose: RelativePose,
                           intr: CameraIntrinsics):
    """Fill received/expected intensities by warping keyframe pixels into ``cur``."""
    d = kf.inverse_depth
    for spx in superpixels:
        x, y = spx.pixels[:, 0], spx.pixels[:, 1]
        dep = d[y, x]
        ok = np.isfinite(dep) & (dep > 0)
        rec = np.full(spx.size, np.nan)
        exp = np.full(spx.size, np.nan)
        wu = np.full((spx.size, 2), np.nan)
        if ok.any():
            uv = spx.pixels[ok].astype(float)
            p = warp(pose, uv, dep[ok], intr)
            uc, valid = project_valid(p, intr)
            val = bilinear(cur.intensities, uc)
            val[~valid] = np.nan
            rec[ok] = kf.intensities[y[ok], x[ok]]
            exp[ok] = val
            wu[ok] = uc
        spx.received, spx.expected, spx.warped = rec, exp, wu
    return superpixels


# --------------------------------------------------------------------------
# piecewise RANSAC

def _outliers(pairs, line, tol):
    a, b = line
    return np.abs(pairs[:, 1] - (a * pairs[:, 0] + b)) > tol


def ransac_line(pairs, inlier_tol, iters=100, rng=None):
    """Line y = a x + b maximising the inlier count (vertical distance <= tol).

    Degenerate scatters (every point identical) give the unit-slope line
    through that point.
    """
    pairs = np.asarray(pairs, dtype=float)
    if len(pairs) < 2:
        raise ValueError("need at least two intensity pairs")
    rng = np.random.default_rng(rng)
    if np.all(pairs == pairs[0]):
        return 1.0, pairs[0, 1] - pairs[0, 0]
    n = len(pairs)
    # all hypotheses at once: iters x 2 distinct sample indices
    i = rng.integers(0, n, size=iters)
    j = (i + rng.integers(1, n, size=iters)) % n
    p, q = pairs[i], pairs[j]
    dx = q[:, 0] - p[:, 0]
    good = dx != 0
    best, best_count = None, -1
    if good.any():
        a = (q[good, 1] - p[good, 1]) / dx[good]
        b = p[good, 1] - a * p[good, 0]
        res = np.abs(pairs[None, :, 1] - (a[:, None] * pairs[None, :, 0] + b[:, None]))
        counts = (res <= inlier_tol).sum(axis=1)
        h = int(np.argmax(counts))
        best, best_count = (float(a[h]), float(b[h])), int(counts[h])
    if best is None:
        # every sampled pair shared its x value; fall back to unit slope
        return 1.0, float(np.median(pairs[:, 1] - pairs[:, 0]))
    inl = ~_outliers(pairs, best, inlier_tol)
    if inl.sum() >= 2 and np.ptp(pairs[inl, 0]) > 0:
        refit = tuple(np.polyfit(pairs[inl, 0], pairs[inl, 1], 1))
        if n - int(_outliers(pairs, refit, inlier_tol).sum()) >= best_count:
            best = refit
    return float(best[0]), float(best[1])


def piecewise_ransac(superpixels, j, inlier_tol, iters=100, rng=None):
    """Outlier fractions of every superpixel under the line fitted on superpixel ``j``
    (``j`` is a list index)."""
    line = ransac_line(superpixels[j].pairs(), inlier_tol, iters, rng)
    out = np.zeros(len(superpixels))
    for k, spx in enumerate(superpixels):
        P = spx.pairs()
        out[k] = _outliers(P, line, inlier_tol).mean() if len(P) else 0.0
    return out


def vision_fault_status(superpixels, inlier_tol, iters=100, min_consensus=4,
                        penalty=DEFAULT_PENALTY, min_pairs=10, include_self=False, rng=None):
    """Product of outlier fractions per superpixel.

    A superpixel always fits its own line, so its own fraction is near zero
    and would annihilate every product; ``include_self`` keeps it anyway.
    Only superpixels with at least ``min_pairs`` valid intensity pairs vote;
    when fewer than ``min_consensus`` remain every status is ``penalty``.
    Returns an array aligned with ``superpixels``; non-voting superpixels get
    ``penalty``.
    """
    rng = np.random.default_rng(rng)
    usable = voting_superpixels(superpixels, min_pairs)
    status = np.full(len(superpixels), float(penalty))
    if len(usable) < min_consensus:
        return status
    sub = [superpixels[i] for i in usable]
    for jj, i in enumerate(usable):
        nu = piecewise_ransac(sub, jj, inlier_tol, iters, rng)
        if not include_self:
            nu = np.delete(nu, jj)
        status[i] = float(np.prod(nu))
    return status


def voting_superpixels(superpixels, min_pairs=10):
    """Indices of superpixels holding enough valid pairs to take part in the vote."""
    return [i for i, s in enumerate(superpixels) if len(s.pairs()) >= max(min_pairs, 2)]


def paint_status(labels, superpixels, status, fill=DEFAULT_PENALTY):
    """Per-pixel status grid from per-superpixel values."""
    grid = np.full(labels.shape, float(fill))
    lut = np.full(labels.max() + 1, float(fill))
    for spx, s in zip(superpixels, status):
        lut[spx.id] = s
    m = labels > 0
    grid[m] = lut[labels[m]]
    return grid


@dataclass
class FaultRecord:
    gps_status: np.ndarray
    vision_status: np.ndarray
    fault_mode: np.ndarray
    kappa: float = 0.5
    superpixel_status: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("gps_status", "vision_status"):
            v = np.asarray(getattr(self, name), dtype=float)
            if np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} outside [0, 1]")
            setattr(self, name, v)

    @property
    def n_b(self):
        return int(np.count_nonzero(self.fault_mode))


def assemble_fault_mode(gps_status, vision_status, kappa=0.5, n_model_rows=0) -> np.ndarray:
    """b = [1{r > kappa}, 0 (motion/orbit/landmark priors), 1{s > kappa}]."""
    g = np.asarray(gps_status, dtype=float)
    v = np.asarray(vision_status, dtype=float)
    return np.concatenate([(g > kappa).astype(int), np.zeros(int(n_model_rows), dtype=int),
                           (v > kappa).astype(int)])
