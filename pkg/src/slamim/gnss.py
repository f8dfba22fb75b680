"""GPS pseudorange model, C/N0 + sky aware variance and circular-orbit
satellite propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, camera_to_world, project_valid
from .core import SatelliteState, VehicleState
from .sky import SkyMask

MU_EARTH = 3.986004418e14  # m^3/s^2
GPS_SEMI_MAJOR = 26_560e3
MIN_RANGE = 1e6
P_SKY_FLOOR = 1e-3


class GeometryError(ValueError):
    pass


@dataclass
class PseudorangeSet:
    prn: np.ndarray
    rho: np.ndarray
    cn0: np.ndarray
    epoch: float = 0.0

    def __post_init__(self):
        self.prn = np.asarray(self.prn, dtype=int)
        self.rho = np.asarray(self.rho, dtype=float)
        self.cn0 = np.asarray(self.cn0, dtype=float)
        if not (self.prn.shape == self.rho.shape == self.cn0.shape):
            raise ValueError("prn, rho and cn0 must have equal length")
        if np.any(self.rho <= 0):
            raise ValueError("pseudoranges must be positive")
        if np.any((self.cn0 < 10) | (self.cn0 > 60)):
            raise ValueError("C/N0 outside [10, 60] dB-Hz")

    def __len__(self):
        return len(self.prn)


@dataclass(frozen=True)
class VisionCoefficients:
    b_los: float = 4.0
    a_los: float = 1.0e5
    b_nlos: float = 40.0
    a_nlos: float = 1.0e6
    eta: float = 0.3

    def __post_init__(self):
        if min(self.b_los, self.a_los, self.b_nlos, self.a_nlos) <= 0:
            raise ValueError("coefficients must be positive")
        if not (self.b_nlos > self.b_los and self.a_nlos > self.a_los):
            raise ValueError("NLOS coefficients must exceed LOS coefficients")


@dataclass(frozen=True)
class Ephemeris:
    """Circular-orbit elements plus a linear clock model for one satellite."""

    prn: int
    semi_major: float
    inclination: float
    raan: float
    arg_lat0: float
    rate: float | None = None
    clk_bias: float = 0.0
    clk_drift: float = 0.0

    @property
    def mean_motion(self) -> float:
        if self.rate is not None:
            return self.rate
        return float(np.sqrt(MU_EARTH / self.semi_major ** 3))

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.mean_motion


def db_to_linear(cn0_dbhz):
    return 10.0 ** (np.asarray(cn0_dbhz, dtype=float) / 10.0)


def predict_pseudorange(x: VehicleState, y: SatelliteState) -> float:
    rng = float(np.linalg.norm(y.pos - x.pos))
    if rng <= MIN_RANGE:
        raise GeometryError(f"receiver-satellite range {rng:.1f} m is degenerate")
    return rng + x.clk_bias - y.clk_bias


def pseudorange_covariance(cn0, p_sky_at_sat, coeffs: VisionCoefficients):
    """Pseudorange variance from C/N0 (dB-Hz) and the sky probability at the
    satellite's image projection. Returns sqrt(b + a / cn0_linear) as the
    variance, exactly as the model is written."""
    p = np.maximum(np.asarray(p_sky_at_sat, dtype=float), P_SKY_FLOOR)
    los = p > coeffs.eta
    b = np.where(los, coeffs.b_los, coeffs.b_nlos) / p
    a = np.where(los, coeffs.a_los, coeffs.a_nlos) / p
    var = np.sqrt(b + a / db_to_linear(cn0))
    return float(var) if var.ndim == 0 else var


def _orbit_frame(eph: Ephemeris, u):
    cO, sO = np.cos(eph.raan), np.sin(eph.raan)
    ci, si = np.cos(eph.inclination), np.sin(eph.inclination)
    cu, su = np.cos(u), np.sin(u)
    r_hat = np.array([cO * cu - sO * su * ci, sO * cu + cO * su * ci, su * si])
    t_hat = np.array([-cO * su - sO * cu * ci, -sO * su + cO * cu * ci, cu * si])
    return r_hat, t_hat


def propagate_satellite(eph: Ephemeris, t: float) -> SatelliteState:
    """Circular Keplerian state at time ``t``.

    The orbit is expressed directly in the world frame (Earth rotation is not
    modelled).
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    n = eph.mean_motion
    u = eph.arg_lat0 + n * t
    r_hat, t_hat = _orbit_frame(eph, u)
    pos = eph.semi_major * r_hat
    vel = eph.semi_major * n * t_hat
    return SatelliteState(pos=pos, clk_bias=eph.clk_bias + eph.clk_drift * t, vel=vel,
                          clk_drift=eph.clk_drift, prn=eph.prn)


def ephemeris_for_direction(prn, receiver_ecef, R_enu, az, el, t_ref,
                            inclination=np.radians(55.0), semi_major=GPS_SEMI_MAJOR,
                            clk_bias=0.0, clk_drift=0.0, ascending=True) -> Ephemeris:
    """Build circular-orbit elements putting the satellite at (az, el) from the
    receiver at time ``t_ref`` (az from north, clockwise; radians)."""
    rx = np.asarray(receiver_ecef, dtype=float)
    d_enu = np.array([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)])
    d = R_enu @ d_enu
    # |rx + s d| = a  ->  s^2 + 2 s (rx.d) + |rx|^2 - a^2 = 0
    b = rx @ d
    s = -b + np.sqrt(b * b - (rx @ rx - semi_major ** 2))
    r_hat = (rx + s * d) / semi_major
    si = np.sin(inclination)
    if abs(r_hat[2]) > si:
        raise GeometryError("direction not reachable with this inclination")
    u = np.arcsin(r_hat[2] / si)
    if not ascending:
        u = np.pi - u
    # solve for RAAN from the x/y components
    cu, su, ci = np.cos(u), np.sin(u), np.cos(inclination)
    # [x, y] = Rot(raan) @ [cu, su*ci]
    raan = np.arctan2(r_hat[1], r_hat[0]) - np.arctan2(su * ci, cu)
    n = np.sqrt(MU_EARTH / semi_major ** 3)
    return Ephemeris(prn=prn, semi_major=semi_major, inclination=inclination, raan=raan,
                     arg_lat0=u - n * t_ref, clk_bias=clk_bias, clk_drift=clk_drift)


def azimuth_elevation(sat_pos, rx_pos, R_enu):
    d = R_enu.T @ (np.asarray(sat_pos, float) - np.asarray(rx_pos, float))
    d = d / np.linalg.norm(d)
    return float(np.arctan2(d[0], d[1])), float(np.arcsin(np.clip(d[2], -1.0, 1.0)))


def satellite_los_probability(y: SatelliteState, x: VehicleState, mask: SkyMask,
                              intr: CameraIntrinsics, R_enu) -> float:
    """Sky probability sampled where the satellite lands in the image.

    The camera is rigidly mounted looking up, so the satellite direction is
    rotated into the camera frame with the full vehicle attitude.
    """
    los = y.pos - x.pos
    _, el = azimuth_elevation(y.pos, x.pos, R_enu)
    if el <= 0:
        return 0.0
    R_wc = camera_to_world(x.att, R_enu)
    d_cam = R_wc.T @ (los / np.linalg.norm(los))
    u, ok = project_valid(d_cam, intr)
    if not ok:
        return 0.0
    return mask.sample(u)


def snapshot_fix(rho, sat_pos, sat_clk, sigma=None, x0=None, iters=10):
    """Iterative weighted least-squares position/clock fix.

    Returns (pos, clk_bias, covariance 4x4).
    """
    rho = np.asarray(rho, float)
    sat_pos = np.asarray(sat_pos, float)
    sat_clk = np.asarray(sat_clk, float)
    w = np.ones_like(rho) if sigma is None else 1.0 / np.asarray(sigma, float) ** 2
    x = np.zeros(4) if x0 is None else np.asarray(x0, float).copy()
    for _ in range(iters):
        diff = sat_pos - x[:3]
        rng = np.linalg.norm(diff, axis=1)
        pred = rng + x[3] - sat_clk
        G = np.column_stack([-diff / rng[:, None], np.ones_like(rng)])
        N = G.T @ (w[:, None] * G)
        dx = np.linalg.solve(N, G.T @ (w * (rho - pred)))
        x += dx
        if np.linalg.norm(dx) < 1e-6:
            break
    diff = sat_pos - x[:3]
    rng = np.linalg.norm(diff, axis=1)
    G = np.column_stack([-diff / rng[:, None], np.ones_like(rng)])
    cov = np.linalg.inv(G.T @ (w[:, None] * G))
    return x[:3], float(x[3]), cov
