import numpy as np
import pytest

from slamim.sim.montecarlo import (BoundingResult, CalibrationResult, SnapshotHarness, Trial,
                                   binomial_band, open_sky_geometries, prior_cov)


@pytest.fixture(scope="module")
def harness():
    return SnapshotHarness(open_sky_geometries(0, duration=5.0))


def test_prior_cov_shape():
    P = prior_cov()
    assert P.shape == (11, 11) and P[0, 0] == 4.0 and P[10, 10] == pytest.approx(1e-4)


def test_trial_bookkeeping():
    t = Trial(zeta=5.0, threshold=4.0, k=3, error=9.0, pl=2.0, lambda_th=10.0)
    assert t.alarm and t.bounded
    t = Trial(zeta=1.0, threshold=4.0, k=3, error=9.0, pl=2.0, lambda_th=10.0)
    assert not t.alarm and not t.bounded


def test_fault_free_trial(harness):
    t = harness.trial(np.random.default_rng(0))
    assert t.k == len(harness.geometries[0].prn)
    assert t.pl == 0.0 and np.isfinite(t.zeta) and t.error < 20.0


def _zeta_shift(harness, lam, n=200):
    # paired draws: same geometry and noise with and without the injected fault
    d = [harness.trial(np.random.default_rng(s), (1,), lam).zeta
         - harness.trial(np.random.default_rng(s), (1,), 0.0).zeta for s in range(n)]
    return float(np.mean(d))


def test_worst_direction_noncentrality(harness):
    """A small fault along the worst direction shifts zeta by its noncentrality."""
    assert _zeta_shift(harness, 4.0) == pytest.approx(4.0, abs=1.5)


def test_large_fault_rejected_by_huber(harness):
    # the robust weights discount a large fault, leaving more of it in the residual
    assert _zeta_shift(harness, 40.0, n=60) > 40.0


def test_faulted_trial_has_positive_pl(harness):
    t = harness.trial(np.random.default_rng(2), (0, 3), 5.0)
    assert t.pl > 0 and t.fault_rows == (0, 3)


def test_calibration_result_flags():
    z = np.full(1000, 7.0)
    r = CalibrationResult(z, 7, 18.48, 0.01)
    assert r.mean_ok and not r.fa_ok          # zero false alarms is 3 sigma below 1 %


def test_bounding_required():
    trials = [Trial(0.0, 1.0, 3, 0.0, 1.0, 1.0)] * 500
    r = BoundingResult(trials, 0.05)
    assert r.bounded_fraction == 1.0 and r.ok
    assert r.required == pytest.approx(0.95 - 3 * np.sqrt(0.95 * 0.05 / 500))


def test_binomial_band():
    lo, hi = binomial_band(0.5, 100)
    assert (lo, hi) == pytest.approx((0.35, 0.65))
