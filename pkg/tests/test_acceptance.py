"""Acceptance gate. Every test records one pass/fail line with its pinned tolerance
(printed again in the terminal summary) and then asserts it.

The 100-seed preset runs behind criteria 5 and 8 take most of the time (roughly
30 s per seed on one core).
"""

import time
from dataclasses import replace

import numpy as np
import pytest

import toy
from slamim import integrity
from slamim.camera import CameraIntrinsics, project, unproject
from slamim.core import position_selector
from slamim.graph import WindowConfig, linearize_window, optimize_window, pack_window
from slamim.pipeline import Pipeline, PipelineConfig, run_scored
from slamim.sim import generate, plaza_preset, urban_canyon_preset
from slamim.sim.montecarlo import SnapshotHarness, chi2_calibration, open_sky_geometries, pl_bounding
from slamim.sky import SkyConfig, otsu_objective, otsu_threshold, sky_probability

N_SEEDS = 100


# --------------------------------------------------------------------------
# 1. camera round trip

def test_c01_camera_round_trip(gate):
    intr = CameraIntrinsics(250.0, 260.0, 320.0, 240.0, 0.8, 640, 480)
    rng = np.random.default_rng(1)
    u = np.column_stack([rng.uniform(0, intr.width - 1, 10_000), rng.uniform(0, intr.height - 1, 10_000)])
    d = rng.uniform(0.01, 5.0, 10_000)
    t0 = time.perf_counter()
    err = np.max(np.abs(project(unproject(u, d, intr), intr) - u))
    dt = time.perf_counter() - t0
    ok = gate(1, err < 1e-6 and dt < 1.0, f"max |project(unproject(u,d)) - u| = {err:.2e} px (< 1e-6), {dt:.3f} s (< 1 s)")
    assert ok


# --------------------------------------------------------------------------
# 2. analytic vs finite-difference Jacobians

def test_c02_jacobians(gate):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = {}
    for anchored in (False, True):
        problem, truth = toy.make_toy(rng, n_sats=5, n_pix=50, T=2, anchored=anchored)
        theta = pack_window(problem, toy.perturbed(truth, rng, pos=2.0, att=0.003))
        lin = linearize_window(problem, theta)
        fd = toy.fd_jacobian(problem, theta, lin.photometric_active)
        C = lin.C.toarray()
        for name, slices in lin.groups.items():
            rows = np.concatenate([np.arange(s.start, s.stop) for s in slices])
            scale = np.max(np.abs(fd[rows])) or 1.0
            rel = np.max(np.abs(C[rows] - fd[rows])) / scale
            worst[name] = max(worst.get(name, 0.0), rel)
    dt = time.perf_counter() - t0
    rel = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in sorted(worst.items()))
    ok = gate(2, rel < 1e-5 and dt < 10.0, f"max relative FD mismatch {rel:.1e} (< 1e-5; {detail}), {dt:.1f} s (< 10 s)")
    assert ok


# --------------------------------------------------------------------------
# 3. estimator consistency

def _crlb_rmse(results, bundles):
    """RMS of the per-epoch WLS position standard deviation from the same pseudorange variances."""
    tr = []
    for r, b in zip(results, bundles):
        v = b.truth.vehicle
        G = np.array([np.r_[-(s.pos - v.pos) / np.linalg.norm(s.pos - v.pos), 1.0] for s in b.truth.satellites])
        info = G.T @ (G / r.sigma[:, None] ** 2)
        tr.append(np.trace(np.linalg.inv(info)[:3, :3]))
    return float(np.sqrt(np.mean(tr)))


def test_c03_estimator_consistency(gate):
    scn = urban_canyon_preset(0).without_faults()
    clean = replace(scn.noise_free(), render=False)
    cfg = PipelineConfig(suite="gps_only")
    bundles = list(generate(clean))
    pipe = Pipeline(cfg, clean.intr, clean.R_enu, clean.coeffs,
                    initial_prior=(bundles[0].truth.vehicle.to_vector(), cfg.initial_cov()))
    err_clean = max(np.linalg.norm(pipe.step(b).state.vehicle.pos - b.truth.vehicle.pos) for b in bundles)

    # photometric factors on exactly bilinear images
    rng = np.random.default_rng(3)
    problem, truth = toy.make_toy(rng, n_sats=6, T=1, n_pix=50)
    res = optimize_window(problem, toy.perturbed(truth, rng), WindowConfig(T=1, max_iters=50))
    err_toy = float(np.linalg.norm(res.states[0].vehicle.pos - truth[0].vehicle.pos))

    ratios = {}
    for suite in ("gps_only", "gps_vision"):
        results, bundles, summary = run_scored(scn, PipelineConfig(suite=suite, seed=scn.seed))
        ratios[suite] = (summary.rmse, _crlb_rmse(results, bundles))
    ok_noise = all(r < 3.0 * c for r, c in ratios.values())
    noisy = "; ".join(f"{k} RMSE {r:.2f} m vs 3 x {c:.2f} m" for k, (r, c) in ratios.items())
    ok = gate(3, err_clean < 1e-3 and err_toy < 1e-3 and ok_noise,
              f"noise-free max error {err_clean:.1e} m, vision toy {err_toy:.1e} m (< 1e-3); {noisy}")
    assert ok


# --------------------------------------------------------------------------
# 4. chi-square calibration

@pytest.fixture(scope="module")
def harness():
    return SnapshotHarness(open_sky_geometries(0))


def test_c04_chi2_calibration(gate, harness):
    t0 = time.perf_counter()
    cal = chi2_calibration(n=1000, seed=0, harness=harness)
    dt = time.perf_counter() - t0
    ok = gate(4, cal.mean_ok and cal.fa_ok and dt < 300.0,
              f"mean zeta {cal.mean:.3f} vs k={cal.k} (within 5%), false alarms {cal.fa_rate:.4f} vs 0.01 "
              f"(within 3 sigma = {3 * cal.fa_sigma:.4f}), {dt:.0f} s (< 300 s)")
    assert ok


# --------------------------------------------------------------------------
# 5 and 8. seeded preset runs

@pytest.fixture(scope="module")
def preset_runs():
    out = {"gps_only": [], "gps_vision": []}
    for seed in range(N_SEEDS):
        scn = urban_canyon_preset(seed)
        for suite in out:
            _, _, s = run_scored(scn, PipelineConfig(suite=suite, seed=seed))
            out[suite].append(s)
    return out


def test_c05_fdi(gate, preset_runs):
    runs = preset_runs["gps_vision"]
    tp = sum(s.gps_tp for s in runs)
    fp = sum(s.gps_fp for s in runs)
    fn = sum(s.gps_fn for s in runs)
    recall, precision = tp / (tp + fn), tp / (tp + fp)
    epochs = sum(s.vision_epochs for s in runs)
    hits = sum(round(s.vision_hit_rate * s.vision_epochs) for s in runs if s.vision_epochs)
    hit_rate = hits / epochs
    ok = gate(5, recall >= 0.9 and precision >= 0.9 and hit_rate >= 0.9,
              f"GPS recall {recall:.3f}, precision {precision:.3f} (>= 0.9 at kappa 0.5); "
              f"vision hit rate {hit_rate:.3f} over {epochs} faulted epochs (>= 0.9); {len(runs)} runs")
    assert ok


def test_c08_fusion_benefit(gate, preset_runs):
    a, b = preset_runs["gps_only"], preset_runs["gps_vision"]
    better = [v.rmse < g.rmse and v.mean_pl < g.mean_pl for g, v in zip(a, b)]
    n = int(np.sum(better))
    ok = gate(8, n >= 95 and len(better) == N_SEEDS,
              f"gps_vision lower RMSE and mean PL in {n}/{len(better)} runs (>= 95); mean RMSE "
              f"{np.mean([s.rmse for s in a]):.2f} vs {np.mean([s.rmse for s in b]):.2f} m, mean PL "
              f"{np.mean([s.mean_pl for s in a]):.2f} vs {np.mean([s.mean_pl for s in b]):.2f} m")
    assert ok


# --------------------------------------------------------------------------
# 6. worst-case slope

def test_c06_worst_slope(gate):
    rng = np.random.default_rng(6)
    worst_excess, worst_gap = 0.0, 0.0
    for _ in range(20):
        l = int(rng.integers(3, 21))
        n = int(rng.integers(l + 4, 61))
        nb = int(rng.integers(1, 4))
        sys = integrity.linearize(rng.standard_normal((n, l)), rng.uniform(0.5, 2.0, n))
        rows = np.sort(rng.choice(n, size=nb, replace=False))
        mode = np.zeros(n, dtype=int)
        mode[rows] = 1
        g2 = integrity.failure_slope(sys, mode)
        alpha = position_selector(l)
        F = rng.standard_normal((100_000, nb))
        F /= np.linalg.norm(F, axis=1, keepdims=True)
        eps = F @ (alpha @ sys.K[:, rows]).T
        R = -sys.C @ sys.K[:, rows]
        R[rows, np.arange(nb)] += 1.0
        q = np.sum(eps ** 2, axis=1) / np.sum((F @ R.T) ** 2, axis=1)
        worst_excess = max(worst_excess, q.max() / g2 - 1.0)
        worst_gap = max(worst_gap, 1.0 - q.max() / g2)
    ok = gate(6, worst_excess <= 1e-9 and worst_gap <= 0.01,
              f"sampled max / eigenvalue: excess {max(worst_excess, 0):.1e} (<= 1e-9), shortfall {worst_gap:.1e} "
              f"(<= 1%) over 20 systems x 1e5 directions")
    assert ok


# --------------------------------------------------------------------------
# 7. PL bounding

def test_c07_pl_bounding(gate, harness):
    res = pl_bounding(n=500, seed=7, harness=harness)
    ok = gate(7, res.ok, f"bounded fraction {res.bounded_fraction:.3f} (>= {res.required:.3f} = 0.95 - 3 sigma); "
                         f"error <= PL ignoring alarms {res.inside_fraction:.3f}; 500 faulted trials")
    assert ok


# --------------------------------------------------------------------------
# 9. sky detection

def _accuracy(scn, frames=None):
    cfg = SkyConfig(center=(scn.intr.cx, scn.intr.cy), eta=0.3, loc_scale=110.0)
    acc = []
    for b in generate(scn):
        if frames is None or b.index in frames:
            acc.append(np.mean(sky_probability(b.frame, cfg).is_sky == b.sky_truth))
    return np.array(acc)


def test_c09_sky_detection(gate):
    plaza = _accuracy(plaza_preset(0))
    canyon = _accuracy(urban_canyon_preset(0), frames=set(range(0, 100, 10)))
    ok = gate(9, plaza.mean() >= 0.95,
              f"plaza pixel accuracy {plaza.mean():.3f} (min frame {plaza.min():.3f}; >= 0.95 at eta 0.3); "
              f"canyon preset {canyon.mean():.3f} (informational)")
    assert ok


# --------------------------------------------------------------------------
# 10. Otsu oracle

def test_c10_otsu_oracle(gate):
    rng = np.random.default_rng(10)
    agree = 0
    for _ in range(100):
        shape = tuple(rng.integers(8, 40, size=2))
        v = rng.integers(0, 256, size=shape).astype(float)
        thr = otsu_threshold(v)
        best, best_obj = toy.exhaustive_otsu(v)
        same_split = any(np.array_equal(v <= thr, v <= k) for k in best)
        agree += int(same_split and abs(otsu_objective(v, thr) - best_obj) <= 1e-9)
    ok = gate(10, agree == 100, f"{agree}/100 random images split exactly as the exhaustive-scan minimiser")
    assert ok
