"""Small hand-built window problems shared by the graph, integrity and acceptance tests."""

import numpy as np

from slamim.camera import CameraIntrinsics, camera_to_world, project, unproject
from slamim.core import OverallState, SatelliteState, VehicleState, enu_rotation
from slamim.gnss import GeometryError, ephemeris_for_direction, propagate_satellite
from slamim.graph import (Control, EpochMeasurements, LandmarkSet, WindowProblem, linearize_window,
                          motion_model)
from slamim.sky import otsu_objective
from slamim.sim.scenario import geodetic_to_ecef

INTR = CameraIntrinsics(92.0, 92.0, 159.5, 119.5, 0.8, 320, 240)
SKY = [(0, 80), (70, 55), (140, 40), (210, 65), (300, 35), (20, 25), (250, 20), (110, 70)]


def smooth_image(a=100.0, bx=0.2, by=0.1, bxy=5e-4):
    """a + bx x + by y + bxy x y: reproduced exactly by bilinear sampling, so its
    interpolant is differentiable everywhere."""
    yy, xx = np.mgrid[0:INTR.height, 0:INTR.width]
    return a + bx * xx + by * yy + bxy * xx * yy


def make_toy(rng, n_sats=5, n_pix=50, T=2, anchored=False, image_fn=smooth_image):
    """Noise-free window at known truth, with ``n_pix`` keyframe landmarks.

    Every epoch carries the keyframe image, so photometric residuals vanish
    at truth only in the first epoch. Returns (problem, truth states per epoch).
    """
    ref = geodetic_to_ecef(40.1, -88.2, 200.0)
    R_enu = enu_rotation(ref)
    ephs = [_ephemeris(k + 1, ref, R_enu, az, el) for k, (az, el) in enumerate(SKY[:n_sats])]
    veh = VehicleState(ref + rng.normal(size=3), 50.0, R_enu @ [3.0, 1.0, 0.0], 0.2, rng.normal(scale=0.05, size=3))
    ctrl = Control(rng.normal(scale=0.1, size=3), rng.normal(scale=0.01, size=3))
    vehicles = [veh]
    for _ in range(T - 1):
        vehicles.append(motion_model(vehicles[-1], ctrl, 1.0))
    truth, epochs = [], []
    image = image_fn()
    for s, v in enumerate(vehicles):
        sats = [propagate_satellite(e, float(s)) for e in ephs]
        rho = np.array([np.linalg.norm(y.pos - v.pos) + v.clk_bias - y.clk_bias for y in sats])
        epochs.append(EpochMeasurements(
            t=float(s), prn=[e.prn for e in ephs], rho=rho, sigma=rng.uniform(2, 6, n_sats),
            sat_prior=np.array([y.to_vector() for y in sats]),
            sat_prior_cov=np.diag([2.0, 2.0, 2.0, 1.0, 0.01, 0.01, 0.01, 0.001]) ** 2,
            control=ctrl, dt=1.0, image=image if n_pix else None))
        truth.append(OverallState(v, [SatelliteState.from_vector(y.to_vector(), prn=y.prn) for y in sats]))
    lms = None
    if n_pix:
        kf = vehicles[0]
        Rwc = camera_to_world(kf.att, R_enu)
        ang = rng.uniform(0, 2 * np.pi, n_pix)
        rad = rng.uniform(20, 70, n_pix)
        uv = np.column_stack([INTR.cx + rad * np.cos(ang), INTR.cy + rad * np.sin(ang)])
        depth = rng.uniform(15, 40, n_pix)
        c = unproject(uv, 1.0 / depth, INTR)
        world = kf.pos + c @ Rwc.T
        ref_int = np.array([_sample(image, project(ci, INTR)) for ci in c])
        cov = np.tile(np.eye(3) * 0.5 ** 2, (n_pix, 1, 1))
        lms = LandmarkSet(prior=world, cov=cov, ref_intensity=ref_int, source_pixels=uv, keyframe_id=0,
                          anchor=c if anchored else None, anchor_cov=cov if anchored else None)
        for st in truth:
            st.landmarks = lms.as_pixel_landmarks()
    P0 = np.diag(np.r_[np.full(3, 3.0), 5.0, np.full(3, 0.5), 0.1, np.full(3, 0.02)] ** 2)
    Q = np.diag(np.r_[np.full(3, 0.5), 1.0, np.full(3, 0.3), 0.05, np.full(3, 0.01)] ** 2)
    problem = WindowProblem(epochs, veh.to_vector(), P0, Q, R_enu, intr=INTR if n_pix else None,
                            landmarks=lms, anchor_slot=0 if (anchored and n_pix) else None)
    return problem, truth


def _ephemeris(prn, ref, R_enu, az, el):
    for inc in (55.0, 65.0, 75.0, 89.5):
        try:
            return ephemeris_for_direction(prn, ref, R_enu, np.radians(az), np.radians(el), 0.0,
                                           inclination=np.radians(inc))
        except GeometryError:
            continue
    raise GeometryError(f"no orbit through az {az} el {el}")


def _sample(image, uv):
    from slamim.camera import bilinear
    return float(bilinear(image, uv))


def fd_jacobian(problem, theta, active):
    """Central differences with per-state steps (metres, seconds, radians)."""
    J = np.zeros((linearize_window(problem, theta, need_jac=False, active=active).n, len(theta)))
    for i in range(len(theta)):
        h = 1e-3
        local = i % problem.epoch_dim if i < len(problem.epochs) * problem.epoch_dim else None
        if local is not None and 8 <= local < 11:
            h = 1e-6
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        ep = linearize_window(problem, tp, need_jac=False, active=active).e
        em = linearize_window(problem, tm, need_jac=False, active=active).e
        J[:, i] = (ep - em) / (2 * h)
    return J


def perturbed(truth, rng, pos=10.0, att=0.01):
    out = []
    for st in truth:
        v = st.vehicle.to_vector()
        v[0:3] += rng.normal(size=3) * pos / np.sqrt(3)
        v[8:11] += rng.normal(size=3) * att
        out.append(OverallState(VehicleState.from_vector(v), [SatelliteState.from_vector(s.to_vector(), s.prn)
                                                              for s in st.satellites], list(st.landmarks)))
    return out


def exhaustive_otsu(values):
    """Brute force over every integer k; returns the midpoint of the optimal interval."""
    values = np.asarray(values, dtype=float).ravel()
    ks = np.arange(0, 256)
    obj = np.array([otsu_objective(values, k) if (values <= k).any() and (values > k).any() else np.inf
                    for k in ks])
    best = ks[np.isclose(obj, obj.min(), rtol=0, atol=1e-9)]
    return best, obj.min()
