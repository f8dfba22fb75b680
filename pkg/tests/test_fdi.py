import numpy as np
import pytest
from scipy import ndimage

from slamim.fdi import (DEFAULT_PENALTY, EmpiricalGaussian, FaultRecord, GpsFaultMonitor, Superpixel,
                        assemble_fault_mode, gps_fault_status, paint_status, piecewise_ransac, ransac_line,
                        segment_superpixels, vision_fault_status, voting_superpixels)


def sp_from_pairs(i, received, expected):
    received = np.asarray(received, float)
    return Superpixel(i, np.zeros((len(received), 2), dtype=int), received, np.asarray(expected, float))


def clean_superpixels(rng, n, m=40, noise=0.0, lo=40, hi=200):
    out = []
    for i in range(n):
        x = rng.uniform(lo, hi, m)
        out.append(sp_from_pairs(i + 1, x, x + rng.normal(scale=noise, size=m) if noise else x))
    return out


# --------------------------------------------------------------------------
# GPS

def test_gps_status_examples():
    d = EmpiricalGaussian(2.0, 3.0)
    assert gps_fault_status(2.0, d) == 0.0
    assert gps_fault_status(1e6, d) == pytest.approx(1.0)
    # standard normal table: Phi(1.96) = 0.975
    assert gps_fault_status(2.0 + 1.96 * 3.0, d) == pytest.approx(0.9025079984544842, abs=1e-12)
    assert gps_fault_status(2.0 - 1.96 * 3.0, d) == pytest.approx(0.9025079984544842, abs=1e-12)


def test_gps_status_range(rng):
    r = gps_fault_status(rng.normal(scale=50, size=1000), EmpiricalGaussian(0.0, 1.0))
    assert np.all((r >= 0) & (r <= 1))


def test_empirical_gaussian_fit(rng):
    x = rng.normal(5, 2, 5000)
    d = EmpiricalGaussian.fit(x)
    assert d.mean == pytest.approx(5, abs=0.1) and d.std == pytest.approx(2, abs=0.1)
    with pytest.raises(ValueError):
        EmpiricalGaussian.fit(x[:10])
    with pytest.raises(ValueError):
        EmpiricalGaussian(0.0, 0.0)


def test_monitor_calibrates_then_scores(rng):
    mon = GpsFaultMonitor(calibration_epochs=30)
    prns = [3, 7, 9]
    for _ in range(30):
        out = mon.update(prns, rng.normal(size=3))
        assert np.all(out == DEFAULT_PENALTY)
    out = mon.update(prns, [0.0, 100.0, 0.0])
    assert out[1] > 0.99 and out[0] < 0.1
    # a PRN never seen during calibration keeps the penalty
    assert mon.update([11], [0.0])[0] == DEFAULT_PENALTY


# --------------------------------------------------------------------------
# superpixels

def test_two_halves_recovered():
    img = np.zeros((40, 80))
    img[:, 40:] = 200.0
    spx, labels = segment_superpixels(img, np.ones_like(img, bool), target_count=2, compactness=0.1)
    assert len(spx) == 2
    parts = {tuple(np.unique(labels[:, :40])), tuple(np.unique(labels[:, 40:]))}
    assert len(parts) == 2 and all(len(p) == 1 for p in parts)


def test_constant_image_gives_grid_tiles():
    img = np.full((64, 64), 100.0)
    spx, labels = segment_superpixels(img, np.ones_like(img, bool), target_count=16, min_size=1)
    assert 12 <= len(spx) <= 20
    for s in spx:
        x, y = s.pixels[:, 0], s.pixels[:, 1]
        box = (np.ptp(x) + 1) * (np.ptp(y) + 1)
        assert s.size >= 0.7 * box


def test_skyline_clusters_connected_and_non_sky():
    from slamim.sim import generate, urban_canyon_preset
    scn = urban_canyon_preset(0)
    b = [b for b in generate(scn) if b.index == 80][0]
    non_sky = ~b.sky_truth
    spx, labels = segment_superpixels(b.frame, non_sky, target_count=64)
    assert len(spx) > 10
    four = ndimage.generate_binary_structure(2, 1)
    for s in spx:
        m = labels == s.id
        assert not np.any(m & b.sky_truth)
        assert ndimage.label(m, structure=four)[1] == 1


# --------------------------------------------------------------------------
# RANSAC

def test_perfect_consensus(rng):
    spx = clean_superpixels(rng, 6)
    for j in range(6):
        assert np.all(piecewise_ransac(spx, j, 3.0, rng=rng) == 0)


def test_offset_block_is_an_outlier(rng):
    spx = clean_superpixels(rng, 6)
    spx[4].expected = spx[4].expected + 50
    nu = piecewise_ransac(spx, 0, 3.0, rng=rng)
    assert nu[4] == 1.0
    assert np.all(np.delete(nu, 4) < 0.05)


def test_fractions_match_brute_force(rng):
    spx = clean_superpixels(rng, 6, m=200, noise=2.0)
    nu = piecewise_ransac(spx, 0, 6.0, iters=200, rng=rng)
    for k, s in enumerate(spx):
        brute = np.mean(np.abs(s.expected - s.received) > 6.0)   # the generating line is y = x
        assert abs(nu[k] - brute) <= 0.05


def test_ransac_line_recovers_line_with_outliers(rng):
    x = rng.uniform(0, 255, 300)
    y = 0.8 * x + 12 + rng.normal(scale=1.0, size=300)
    y[:60] = rng.uniform(0, 255, 60)
    a, b = ransac_line(np.column_stack([x, y]), 3.0, iters=200, rng=0)
    assert a == pytest.approx(0.8, abs=0.02) and b == pytest.approx(12, abs=2)
    with pytest.raises(ValueError):
        ransac_line(np.zeros((1, 2)), 1.0)


# --------------------------------------------------------------------------
# vision status

def test_consistent_superpixels_have_zero_status(rng):
    s = vision_fault_status(clean_superpixels(rng, 7), 3.0, rng=rng)
    assert np.all(s == 0)


def test_single_corrupted_superpixel(rng):
    spx = clean_superpixels(rng, 7, noise=0.5)
    spx[2].expected = spx[2].expected * 0.5
    s = vision_fault_status(spx, 3.0, rng=rng)
    assert s[2] > 0.9
    assert np.all(np.delete(s, 2) < 0.05)


def test_literal_product_with_own_fraction(rng):
    spx = clean_superpixels(rng, 7, noise=0.5)
    spx[2].expected = spx[2].expected * 0.5
    s = vision_fault_status(spx, 3.0, include_self=True, rng=rng)
    assert s[2] < 0.05


def test_too_few_superpixels_get_penalty(rng):
    s = vision_fault_status(clean_superpixels(rng, 2), 3.0, min_consensus=4)
    assert np.all(s == 0.5)


def test_sparse_superpixels_do_not_vote(rng):
    spx = clean_superpixels(rng, 6) + [sp_from_pairs(99, [10.0, 20.0], [10.0, 20.0])]
    assert voting_superpixels(spx) == list(range(6))
    s = vision_fault_status(spx, 3.0, rng=rng)
    assert s[-1] == DEFAULT_PENALTY


def test_paint_status():
    labels = np.array([[0, 1], [2, 2]])
    spx = [Superpixel(1, np.array([[1, 0]])), Superpixel(2, np.array([[0, 1], [1, 1]]))]
    g = paint_status(labels, spx, [0.2, 0.9])
    assert np.allclose(g, [[DEFAULT_PENALTY, 0.2], [0.9, 0.9]])


# --------------------------------------------------------------------------
# fault mode

def test_fault_mode_examples():
    assert list(assemble_fault_mode([0.9, 0.1], [], 0.5)) == [1, 0]
    assert list(assemble_fault_mode([0.9, 0.1], [0.2, 0.7], 0.5, n_model_rows=3)) == [1, 0, 0, 0, 0, 0, 1]
    rec = FaultRecord(np.array([0.1, 0.2]), np.array([0.3]), assemble_fault_mode([0.1, 0.2], [0.3]))
    assert rec.n_b == 0
    with pytest.raises(ValueError):
        FaultRecord(np.array([1.5]), np.array([]), np.zeros(1))


def test_fault_mode_flags_injected_satellites():
    from slamim.sim import generate, urban_canyon_preset
    scn = urban_canyon_preset(0)
    b = [b for b in generate(scn.noise_free()) if b.index == 85][0]
    bad = set(b.labels["multipath"])
    assert len(b.pseudoranges.prn) == 7 and len(bad) == 3
    status = np.array([0.95 if p in bad else 0.05 for p in b.pseudoranges.prn])
    mode = assemble_fault_mode(status, [], 0.5)
    assert set(np.asarray(b.pseudoranges.prn)[mode == 1]) == bad
