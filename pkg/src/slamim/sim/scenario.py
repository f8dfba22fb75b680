"""Scenario description, epoch generation and the canonical presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..camera import CameraIntrinsics, FisheyeFrame
from ..core import OverallState, SatelliteState, VehicleState, enu_rotation, wrap_angle
from ..gnss import (GeometryError, PseudorangeSet, VisionCoefficients, azimuth_elevation, db_to_linear,
                    ephemeris_for_direction, propagate_satellite)
from ..graph import Control
from .scene import Renderer, Scene, canyon_walls, plaza_walls

EARTH_RADIUS = 6_371_000.0


def geodetic_to_ecef(lat_deg, lon_deg, h=0.0):
    """Spherical-Earth position (the simulator has no ellipsoid)."""
    lat, lon = np.radians(lat_deg), np.radians(lon_deg)
    r = EARTH_RADIUS + h
    return r * np.array([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])


@dataclass
class MultipathFault:
    prn: int
    start: float
    end: float
    magnitude: float
    ramp: float = 5.0

    def bias(self, t):
        if t < self.start or t > self.end:
            return 0.0
        return self.magnitude * min(1.0, (t - self.start) / self.ramp)


@dataclass
class IlluminationFault:
    """Additive intensity offset on an image rectangle (u0, v0, u1, v1).

    With ``alternate`` the sign flips every epoch, so consecutive frames
    disagree inside the region.
    """

    start: float
    end: float
    delta: float
    region: tuple
    alternate: bool = True

    def offset(self, t, epoch_index):
        if t < self.start or t > self.end:
            return 0.0
        if self.alternate and epoch_index % 2:
            return -self.delta
        return self.delta

    def mask(self, shape):
        H, W = shape
        u0, v0, u1, v1 = self.region
        m = np.zeros((H, W), dtype=bool)
        m[max(v0, 0):min(v1, H), max(u0, 0):min(u1, W)] = True
        return m


@dataclass
class NoiseLevels:
    pseudorange: bool = True          # draw pseudorange noise from the LOS variance model
    photometric: float = 2.0          # intensity std
    accel: float = 0.05               # control accelerometer noise, m/s^2
    rate: float = 1e-3                # control rate noise, rad/s
    clock_drift: float = 0.05         # clock drift random walk, m/s per epoch
    depth: float = 0.02               # relative inverse-depth noise
    ephemeris: bool = True            # satellite truth offset from the broadcast model
    cn0: float = 0.5                  # dB

    @classmethod
    def zero(cls):
        return cls(pseudorange=False, photometric=0.0, accel=0.0, rate=0.0, clock_drift=0.0,
                   depth=0.0, ephemeris=False, cn0=0.0)


# diagonal standard deviations of the orbital-model prior (pos, clk, vel, drift)
EPHEMERIS_STD = np.array([1.0, 1.0, 1.0, 1.0, 1e-3, 1e-3, 1e-3, 1e-3])


@dataclass
class Scenario:
    name: str = "scenario"
    duration: float = 100.0
    rate: float = 1.0
    origin: tuple = (40.1, -88.2)             # lat, lon (deg) of the local frame
    waypoints: list = field(default_factory=lambda: [(0.0, 0.0), (500.0, 0.0)])
    speed: float = 5.0
    speed_swing: float = 0.05                  # relative sinusoidal speed variation
    clock_bias: float = 100.0
    clock_drift: float = 0.5
    constellation: list = field(default_factory=list)
    walls: list = field(default_factory=list)
    multipath: list = field(default_factory=list)
    illumination: list = field(default_factory=list)
    noise: NoiseLevels = field(default_factory=NoiseLevels)
    coeffs: VisionCoefficients = field(default_factory=VisionCoefficients)
    intr: CameraIntrinsics = field(default_factory=lambda: CameraIntrinsics(92.0, 92.0, 159.5, 119.5, 0.8, 320, 240))
    cn0_base: float = 30.0
    cn0_slope: float = 20.0
    nlos_drop: float = 10.0
    sky_loc_scale: float | None = 110.0
    render: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.rate <= 0:
            raise ValueError("duration and rate must be positive")
        for f in list(self.multipath) + list(self.illumination):
            if f.start < 0 or f.end > self.duration + 1e-9 or f.start > f.end:
                raise ValueError("fault window outside the scenario duration")
        if len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")

    @property
    def n_epochs(self):
        return int(round(self.duration * self.rate))

    @property
    def dt(self):
        return 1.0 / self.rate

    @property
    def ref_ecef(self):
        return geodetic_to_ecef(*self.origin)

    @property
    def R_enu(self):
        return enu_rotation(self.ref_ecef)

    def without_faults(self) -> "Scenario":
        return replace(self, multipath=[], illumination=[])

    def noise_free(self) -> "Scenario":
        return replace(self, noise=NoiseLevels.zero())


@dataclass
class EpochBundle:
    index: int
    t: float
    truth: OverallState
    pseudoranges: PseudorangeSet
    ephemeris_prior: list
    control: Control
    dt: float
    frame: FisheyeFrame | None
    inverse_depth: np.ndarray | None
    sky_truth: np.ndarray | None
    labels: dict


# --------------------------------------------------------------------------
# trajectory

def _path(scn: Scenario, n):
    """Positions/velocities/attitudes in local ENU consistent with the Euler motion model."""
    dt = scn.dt
    wp = np.asarray(scn.waypoints, dtype=float)
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    t = np.arange(n + 1) * dt
    speed = scn.speed * (1.0 + scn.speed_swing * np.sin(2 * np.pi * t / 20.0))

    pos = np.zeros((n + 1, 3))
    vel = np.zeros((n + 1, 3))
    att = np.zeros((n + 1, 3))
    s = 0.0
    pos[0, :2] = wp[0]
    for i in range(n + 1):
        k = min(np.searchsorted(cum, s, side="right") - 1, len(seg) - 1)
        heading = seg[k] / max(seg_len[k], 1e-9)
        vel[i, :2] = heading * speed[i]
        att[i, 2] = np.arctan2(heading[1], heading[0])
        if i < n:
            pos[i + 1] = pos[i] + vel[i] * dt
            s += speed[i] * dt
    return t, pos, vel, att


def _truth_states(scn: Scenario, rng):
    n = scn.n_epochs
    dt = scn.dt
    t, pos, vel, att = _path(scn, n)
    R = scn.R_enu
    ref = scn.ref_ecef
    clk = np.zeros(n + 1)
    drift = np.zeros(n + 1)
    clk[0], drift[0] = scn.clock_bias, scn.clock_drift
    for i in range(n):
        clk[i + 1] = clk[i] + drift[i] * dt
        drift[i + 1] = drift[i] + scn.noise.clock_drift * rng.standard_normal()
    vehicles = [VehicleState(pos=ref + R @ pos[i], clk_bias=clk[i], vel=R @ vel[i],
                             clk_drift=drift[i], att=att[i]) for i in range(n + 1)]
    controls = []
    for i in range(n):
        a = (vel[i + 1] - vel[i]) / dt
        w = wrap_angle(att[i + 1] - att[i]) / dt
        controls.append((R @ a, w))
    return t, vehicles, controls, pos


# --------------------------------------------------------------------------
# generation

def generate(scn: Scenario):
    """Yield one :class:`EpochBundle` per epoch (deterministic for a given seed)."""
    rng = np.random.default_rng(scn.seed)
    # image noise has its own stream so GNSS draws do not depend on ``render``
    img_rng = np.random.default_rng([scn.seed, 1])
    t_all, vehicles, controls, enu = _truth_states(scn, rng)
    R = scn.R_enu
    n_sat = len(scn.constellation)
    if scn.noise.ephemeris:
        eph_err = rng.standard_normal((n_sat, 8)) * EPHEMERIS_STD
    else:
        eph_err = np.zeros((n_sat, 8))
    scene = Scene(list(scn.walls))
    renderer = Renderer(scene, scn.intr) if scn.render else None
    mp = {f.prn: f for f in scn.multipath}
    nz = scn.noise

    for i in range(scn.n_epochs):
        t = float(t_all[i])
        veh = vehicles[i]
        priors, sats = [], []
        for k, eph in enumerate(scn.constellation):
            prior = propagate_satellite(eph, t)
            priors.append(prior)
            sats.append(SatelliteState.from_vector(prior.to_vector() + eph_err[k], prn=eph.prn))
        truth = OverallState(veh, sats)

        prn, rho, cn0 = [], [], []
        nlos, bias = [], {}
        for sat in sats:
            az, el = azimuth_elevation(sat.pos, veh.pos, R)
            d_enu = R.T @ (sat.pos - veh.pos)
            d_enu /= np.linalg.norm(d_enu)
            blocked = scene.occluded(enu[i], d_enu)
            c = scn.cn0_base + scn.cn0_slope * np.sin(max(el, 0.0))
            if blocked:
                c -= scn.nlos_drop
                nlos.append(sat.prn)
            c = float(np.clip(c + nz.cn0 * rng.standard_normal(), 10.0, 60.0))
            r = np.linalg.norm(sat.pos - veh.pos) + veh.clk_bias - sat.clk_bias
            if nz.pseudorange:
                var = np.sqrt(scn.coeffs.b_los + scn.coeffs.a_los / db_to_linear(c))
                r += np.sqrt(var) * rng.standard_normal()
            if sat.prn in mp:
                b = mp[sat.prn].bias(t)
                if b != 0.0:
                    bias[sat.prn] = b
                r += b
            prn.append(sat.prn)
            rho.append(r)
            cn0.append(c)
        pr = PseudorangeSet(prn, rho, cn0, epoch=t)

        a, w = controls[i - 1] if i > 0 else (np.zeros(3), np.zeros(3))
        ctrl = Control(a + nz.accel * rng.standard_normal(3), w + nz.rate * rng.standard_normal(3))

        frame = inv = sky = None
        illum = []
        if renderer is not None:
            ren = renderer.render(enu[i], veh.att)
            img = ren.intensities.copy()
            for f in scn.illumination:
                off = f.offset(t, i)
                if off != 0.0:
                    img[f.mask(img.shape)] += off
                    illum.append((f.region, off))
            if nz.photometric > 0:
                img = img + nz.photometric * img_rng.standard_normal(img.shape)
            img = np.clip(img, 0.0, 255.0)
            frame = FisheyeFrame(img, t)
            inv = ren.inverse_depth
            if nz.depth > 0:
                inv = inv * (1.0 + nz.depth * img_rng.standard_normal(inv.shape))
                inv = np.where(inv > 0, inv, np.nan)
            sky = ren.sky
        labels = {"multipath": bias, "nlos": nlos, "illumination": illum}
        yield EpochBundle(i, t, truth, pr, priors, ctrl, scn.dt if i > 0 else scn.dt, frame, inv, sky, labels)


def illumination_offset_map(scn: Scenario, t, epoch_index, shape):
    """Signed illumination offset per pixel applied to the frame at (t, index)."""
    out = np.zeros(shape)
    for f in scn.illumination:
        off = f.offset(t, epoch_index)
        if off:
            out[f.mask(shape)] += off
    return out


# --------------------------------------------------------------------------
# presets

# (prn, azimuth deg, elevation deg) at the reference epoch
CANYON_SKY = [
    (2, 30.0, 82.0),
    (5, 95.0, 40.0),
    (9, 265.0, 35.0),
    (17, 200.0, 77.0),
    (6, 0.0, 25.0),
    (12, 180.0, 20.0),
    (24, 330.0, 30.0),
]
CANYON_MULTIPATH = {6: 55.0, 12: 70.0, 24: 40.0}


def constellation_from_sky(ref_ecef, R_enu, sky, t_ref, rng=None):
    rng = np.random.default_rng(rng)
    out = []
    for prn, az, el in sky:
        clk = float(rng.uniform(-3e4, 3e4))
        drift = float(rng.uniform(-0.01, 0.01))
        # high-latitude sub-satellite points need a steeper orbit plane
        for inc in (55.0, 65.0, 75.0, 85.0, 89.5):
            try:
                eph = ephemeris_for_direction(prn, ref_ecef, R_enu, np.radians(az), np.radians(el), t_ref,
                                              inclination=np.radians(inc), clk_bias=clk, clk_drift=drift)
                break
            except GeometryError:
                continue
        else:
            raise GeometryError(f"no orbit reaches az={az} el={el}")
        out.append(eph)
    return out


def urban_canyon_preset(seed: int = 0) -> Scenario:
    """100 s drive: open sky until t=70 s, then a street canyon where three of
    seven satellites are blocked and suffer multipath, plus an illumination
    fault on one facade region."""
    geo = np.random.default_rng(2019)
    scn = Scenario(name="urban_canyon", seed=seed)
    ref, R = scn.ref_ecef, scn.R_enu
    road_ref = ref + R @ np.array([435.0, 0.0, 0.0])
    scn.constellation = constellation_from_sky(road_ref, R, CANYON_SKY, 85.0, geo)
    scn.walls = canyon_walls(350.0, 520.0, 12.0, (15.0, 35.0), geo)
    scn.multipath = [MultipathFault(p, 70.0, 100.0, m) for p, m in CANYON_MULTIPATH.items()]
    scn.illumination = [IlluminationFault(70.0, 100.0, 45.0, (60, 170, 95, 205))]
    return scn


def plaza_preset(seed: int = 0, duration: float = 10.0) -> Scenario:
    """Slow drive inside a ring of buildings: sky is a disk around the image centre."""
    geo = np.random.default_rng(7)
    scn = Scenario(name="plaza", seed=seed, duration=duration, speed=1.0,
                   waypoints=[(-5.0, 0.0), (5.0, 0.0)])
    road_ref = scn.ref_ecef
    scn.constellation = constellation_from_sky(road_ref, scn.R_enu, CANYON_SKY, duration / 2, geo)
    scn.walls = plaza_walls((0.0, 0.0), 22.0, (20.0, 26.0), geo)
    return scn


def open_sky_scenario(seed=0, duration=60.0) -> Scenario:
    geo = np.random.default_rng(2019)
    scn = Scenario(name="open_sky", seed=seed, duration=duration, render=False)
    scn.constellation = constellation_from_sky(scn.ref_ecef, scn.R_enu, CANYON_SKY, duration / 2, geo)
    return scn
