"""Single-epoch Monte Carlo harness for the integrity monitor.

Each trial redraws every random input of a one-epoch problem around a known
truth (vehicle prior, orbital-model prior, pseudorange noise), optionally adds
pseudorange biases along the worst-case direction of a known fault mode, runs
the estimator and evaluates the test statistic and protection level exactly as
the pipeline does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .. import integrity
from ..core import OverallState, SatelliteState, VehicleState
from ..gnss import VisionCoefficients, pseudorange_covariance
from ..graph import (EpochMeasurements, MEstimator, WindowConfig, WindowProblem, linearize_window,
                     optimize_window, pack_window, row_weights)
from .scenario import EPHEMERIS_STD, generate, open_sky_scenario

# vehicle prior std: pos, clk, vel, drift, att
PRIOR_STD = (2.0, 3.0, 0.5, 0.1, 0.01)


def prior_cov(std=PRIOR_STD):
    s = np.concatenate([np.full(3, std[0]), [std[1]], np.full(3, std[2]), [std[3]], np.full(3, std[4])])
    return np.diag(s ** 2)


@dataclass
class Geometry:
    """Truth of one epoch: vehicle, satellites and C/N0."""

    vehicle: VehicleState
    satellites: list
    cn0: np.ndarray
    prn: np.ndarray
    R_enu: np.ndarray


def open_sky_geometries(seed=0, duration=60.0):
    scn = open_sky_scenario(seed, duration)
    out = []
    for b in generate(scn.noise_free()):
        out.append(Geometry(b.truth.vehicle, b.truth.satellites, b.pseudoranges.cn0,
                            b.pseudoranges.prn, scn.R_enu))
    return out


def _gps_rows(lin):
    return np.arange(lin.n)[lin.groups["gps"][0]]


@dataclass
class Trial:
    zeta: float
    threshold: float
    k: int
    error: float
    pl: float
    lambda_th: float
    noncentrality: float = 0.0
    fault_rows: tuple = ()

    @property
    def alarm(self):
        return self.zeta > self.threshold

    @property
    def bounded(self):
        """No hazardously misleading information: either alarmed or inside the PL."""
        return self.alarm or self.error <= self.pl


class SnapshotHarness:
    def __init__(self, geometries, coeffs: VisionCoefficients | None = None, p_fa=0.01, p_md=0.05,
                 estimator: MEstimator | None = None, window: WindowConfig | None = None,
                 prior_std=PRIOR_STD):
        if not geometries:
            raise ValueError("no geometries")
        self.geometries = list(geometries)
        self.coeffs = coeffs or VisionCoefficients()
        self.p_fa, self.p_md = p_fa, p_md
        self.estimator = estimator or MEstimator()
        self.window = window or WindowConfig(T=1)
        self.P0 = prior_cov(prior_std)
        self.L0 = np.linalg.cholesky(self.P0)
        self.sat_cov = np.diag(EPHEMERIS_STD ** 2)

    def _sigma(self, g):
        return np.sqrt(pseudorange_covariance(g.cn0, np.ones(len(g.cn0)), self.coeffs))

    def _problem(self, g, rng, status):
        sigma = self._sigma(g)
        truth_v = g.vehicle.to_vector()
        mean = truth_v + self.L0 @ rng.standard_normal(len(truth_v))
        sat_prior = np.array([s.to_vector() + EPHEMERIS_STD * rng.standard_normal(8) for s in g.satellites])
        rho = np.array([np.linalg.norm(s.pos - g.vehicle.pos) + g.vehicle.clk_bias - s.clk_bias
                        for s in g.satellites])
        rho = rho + sigma * rng.standard_normal(len(rho))
        ep = EpochMeasurements(t=0.0, prn=g.prn, rho=rho, sigma=sigma, sat_prior=sat_prior,
                               sat_prior_cov=self.sat_cov, gps_status=status)
        problem = WindowProblem([ep], mean, self.P0, np.eye(11), g.R_enu, use_vision=False)
        return problem, sigma, mean, sat_prior

    def _system(self, problem, states, beta=0.0):
        theta = pack_window(problem, states)
        lin = linearize_window(problem, theta)
        W = row_weights(lin, self.estimator)
        return integrity.linearize(lin.C.toarray(), W, beta, residual=lin.e, groups=lin.groups), lin

    def _truth_state(self, g):
        return OverallState(g.vehicle, [SatelliteState.from_vector(s.to_vector(), prn=s.prn)
                                        for s in g.satellites])

    def worst_direction(self, g, fault_sats, status):
        """Unit whitened fault vector (over ``fault_sats``) maximising the failure slope,
        evaluated at the truth linearization; also returns the noncentrality per unit norm."""
        problem, *_ = self._problem(g, np.random.default_rng(0), status)
        sys, lin = self._system(problem, [self._truth_state(g)])
        rows = _gps_rows(lin)[list(fault_sats)]
        m_eps, M_zeta = integrity.slope_matrices(sys, rows)
        G = M_zeta @ m_eps
        w, U = np.linalg.eigh(G @ G.T)
        f_zeta = U[:, -1]
        f = M_zeta @ f_zeta                       # fault in whitened pseudorange units
        R = -sys.C @ sys.K[:, rows]
        R[rows, np.arange(len(rows))] += 1.0
        lam_unit = float(np.sum((R @ f) ** 2)) / float(f @ f)
        return f / np.linalg.norm(f), lam_unit

    def trial(self, rng, fault_sats=(), lam=0.0) -> Trial:
        g = self.geometries[rng.integers(len(self.geometries))]
        n = len(g.prn)
        status = np.zeros(n)
        status[list(fault_sats)] = 1.0
        problem, sigma, mean, sat_prior = self._problem(g, rng, status)
        if fault_sats:
            f, lam_unit = self.worst_direction(g, fault_sats, status)
            scale = np.sqrt(lam / lam_unit) if lam_unit > 0 else 0.0
            problem.epochs[0].rho[list(fault_sats)] += scale * f * sigma[list(fault_sats)]
        init = [OverallState(VehicleState.from_vector(mean),
                             [SatelliteState.from_vector(v, prn=p) for v, p in zip(sat_prior, g.prn)])]
        res = optimize_window(problem, init, self.window, self.estimator)
        sys, lin = self._system(problem, res.states, 0.0)
        mode = np.zeros(sys.n, dtype=int)
        if fault_sats:
            mode[_gps_rows(lin)[list(fault_sats)]] = 1
        rep = integrity.evaluate(sys, mode, self.p_fa, self.p_md)
        err = float(np.linalg.norm(res.states[0].vehicle.pos - g.vehicle.pos))
        return Trial(rep.zeta, rep.chi2_threshold, rep.k, err, rep.pl, rep.lambda_th, lam, tuple(fault_sats))


@dataclass
class CalibrationResult:
    zeta: np.ndarray
    k: int
    threshold: float
    p_fa: float
    mean_ok: bool = field(init=False)
    fa_ok: bool = field(init=False)

    def __post_init__(self):
        self.mean_ok = abs(self.mean - self.k) <= 0.05 * self.k
        self.fa_ok = abs(self.fa_rate - self.p_fa) <= 3 * self.fa_sigma

    @property
    def mean(self):
        return float(np.mean(self.zeta))

    @property
    def fa_rate(self):
        return float(np.mean(self.zeta > self.threshold))

    @property
    def fa_sigma(self):
        return float(np.sqrt(self.p_fa * (1 - self.p_fa) / len(self.zeta)))


def chi2_calibration(n=1000, seed=0, harness: SnapshotHarness | None = None) -> CalibrationResult:
    """Fault-free trials: zeta should follow chi-square with k degrees of freedom."""
    h = harness or SnapshotHarness(open_sky_geometries(seed))
    rng = np.random.default_rng(seed)
    trials = [h.trial(rng) for _ in range(n)]
    ks = {t.k for t in trials}
    if len(ks) != 1:
        raise ValueError(f"redundancy varies across trials: {sorted(ks)}")
    return CalibrationResult(np.array([t.zeta for t in trials]), ks.pop(), trials[0].threshold, h.p_fa)


@dataclass
class BoundingResult:
    trials: list
    p_md: float

    @property
    def bounded_fraction(self):
        return float(np.mean([t.bounded for t in self.trials]))

    @property
    def inside_fraction(self):
        """Fraction with error <= PL regardless of the alarm."""
        return float(np.mean([t.error <= t.pl for t in self.trials]))

    @property
    def required(self):
        p = 1 - self.p_md
        return p - 3 * np.sqrt(p * (1 - p) / len(self.trials))

    @property
    def ok(self):
        return self.bounded_fraction >= self.required


def pl_bounding(n=500, seed=0, max_faults=2, lam_range=(0.0, 3.0),
                harness: SnapshotHarness | None = None) -> BoundingResult:
    """Faulted trials along the worst-case direction of a correctly identified mode.

    The noncentrality of each injected fault is drawn uniformly in
    ``lam_range`` times lambda_th, so trials span undetectable to clearly
    detected faults.
    """
    h = harness or SnapshotHarness(open_sky_geometries(seed))
    rng = np.random.default_rng(seed)
    n_sat = len(h.geometries[0].prn)
    lam_th = integrity.solve_lambda_th(h.p_fa, h.p_md, n_sat)[1]
    out = []
    for _ in range(n):
        nb = int(rng.integers(1, max_faults + 1))
        sats = tuple(sorted(rng.choice(n_sat, size=nb, replace=False)))
        lam = float(rng.uniform(*lam_range)) * lam_th
        out.append(h.trial(rng, sats, lam))
    return BoundingResult(out, h.p_md)


def binomial_band(p, n, sigmas=3.0):
    s = np.sqrt(p * (1 - p) / n)
    return p - sigmas * s, p + sigmas * s


def chi2_quantile(p, k):
    return float(stats.chi2.ppf(p, k))
