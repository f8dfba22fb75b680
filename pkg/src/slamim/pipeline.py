"""Epoch loop: sliding-window estimation, fault detection, protection levels and
keyframe management."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import integrity
from .camera import CameraIntrinsics, FisheyeFrame, camera_to_world, project_valid, relative_pose, unproject
from .core import OverallState, POS, VEHICLE_DIM, VehicleState, euler_rotation_derivatives
from .fdi import (DEFAULT_PENALTY, GpsFaultMonitor, assemble_fault_mode, attach_intensity_pairs,
                  segment_superpixels, vision_fault_status)
from .gnss import VisionCoefficients, pseudorange_covariance, satellite_los_probability, snapshot_fix
from .graph import (EpochMeasurements, LandmarkSet, MEstimator, WindowConfig, WindowProblem,
                    linearize_window, motion_model, optimize_window, pack_window, predict_vehicle_prior,
                    row_weights)
from .sim.scenario import EPHEMERIS_STD
from .sky import NoThresholdError, SkyConfig, sky_probability

log = logging.getLogger(__name__)

SUITES = ("gps_only", "gps_vision")


@dataclass
class PipelineConfig:
    suite: str = "gps_vision"
    window: WindowConfig = field(default_factory=WindowConfig)
    estimator: MEstimator = field(default_factory=MEstimator)
    p_fa: float = 0.01
    p_md: float = 0.05
    kappa: float = 0.5
    eta: float = 0.3
    sky_loc_scale: float | None = 110.0
    sat_sky_loc_scale: float | None = 200.0   # satellite lookup prior; None reuses the pixel mask
    calibrate_coeffs: bool = True             # rescale coefficients by open-sky LOS p_sky at start-up
    blur_window: int = 3
    coeffs: VisionCoefficients | None = None
    calibration_epochs: int = 30
    keyframe_distance: float = 5.0
    keyframe_overlap: float = 0.6
    max_landmarks: int = 15
    min_landmarks: int = 10
    max_landmark_range: float = 60.0
    landmark_floor: float = 0.05
    gradient_percentile: float = 70.0
    photometric_omega: float = 4.0
    pyramid_sigmas: tuple = (4.0,)
    chi_bar_scope: str = "position"
    integrity_beta: float | None = 0.0    # None keeps the optimizer's final damping
    depth_rel_std: float = 0.02
    superpixels: int = 64
    min_superpixel: int = 20
    ransac_iters: int = 100
    ransac_tol: float | None = None           # default 3 x photometric_omega
    min_consensus: int = 4
    vision_penalty: float = DEFAULT_PENALTY
    vision_include_self: bool = False
    init_std: tuple = (10.0, 100.0, 10.0, 1.0, 0.02)   # pos, clk, vel, drift, att
    accel_std: float = 0.1
    rate_std: float = 2e-3
    drift_std: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ValueError(f"suite must be one of {SUITES}")
        for name in ("p_fa", "p_md", "kappa", "eta"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def vision(self):
        return self.suite == "gps_vision"

    def process_cov(self, dt):
        q = np.full(VEHICLE_DIM, 1e-4)
        q[4:7] = (self.accel_std * dt) ** 2
        q[7] = self.drift_std ** 2
        q[8:11] = (self.rate_std * dt) ** 2 + 1e-8
        return np.diag(q)

    def initial_cov(self):
        p, c, v, d, a = self.init_std
        return np.diag([p * p] * 3 + [c * c] + [v * v] * 3 + [d * d] + [a * a] * 3)


@dataclass
class Keyframe:
    epoch: int
    frame: FisheyeFrame
    pos: np.ndarray
    att: np.ndarray
    landmarks: LandmarkSet | None
    superpixels: list
    labels: np.ndarray
    P: np.ndarray | None = None       # vehicle covariance at the keyframe

    def refresh(self, pos, att, P, R_enu, shared_inflation=True):
        """Re-anchor landmark priors on an updated keyframe pose.

        The absolute prior of each landmark carries the keyframe pose
        uncertainty; since every landmark shares it, the shared part is
        inflated by the landmark count so that together they hold no more
        information about the pose than the keyframe itself.
        """
        self.pos, self.att, self.P = np.asarray(pos, float).copy(), np.asarray(att, float).copy(), P
        lms = self.landmarks
        if lms is None:
            return
        Rwc = camera_to_world(self.att, R_enu)
        lms.prior = self.pos + lms.anchor @ Rwc.T
        dE = euler_rotation_derivatives(self.att)
        L = len(lms)
        scale = float(L) if shared_inflation else 1.0
        for j in range(L):
            J = np.zeros((3, VEHICLE_DIM))
            J[:, POS] = np.eye(3)
            for a, dEa in enumerate(dE):
                J[:, 8 + a] = R_enu @ dEa @ lms.anchor[j]
            lms.cov[j] = scale * (J @ P @ J.T) + lms.anchor_cov[j]


@dataclass
class EpochResult:
    index: int
    t: float
    state: OverallState
    cost: float
    iterations: int
    gps_residual: np.ndarray
    gps_status: np.ndarray
    p_sky: np.ndarray
    sigma: np.ndarray
    report: integrity.IntegrityReport
    fault_mode: np.ndarray
    keyframe_epoch: int | None = None
    superpixels: list | None = field(default=None, repr=False)
    superpixel_status: np.ndarray | None = None
    landmark_status: np.ndarray | None = None
    n_landmarks: int = 0
    sky_mask: object = field(default=None, repr=False)
    prn: np.ndarray | None = None


def ephemeris_cov():
    return np.diag(EPHEMERIS_STD ** 2)


def calibrate_coefficients(coeffs: VisionCoefficients, p_sky_open) -> VisionCoefficients:
    """Scale all four coefficients by the median LOS sky probability seen in open sky.

    The sky probability of a clear line of sight is well below one, so
    coefficients meant for p_sky = 1 would overstate every LOS variance.
    """
    p = np.asarray(p_sky_open, dtype=float)
    p = p[p > coeffs.eta]
    if p.size == 0:
        return coeffs
    s = float(np.median(p))
    return replace(coeffs, b_los=coeffs.b_los * s, a_los=coeffs.a_los * s,
                   b_nlos=coeffs.b_nlos * s, a_nlos=coeffs.a_nlos * s)


class Pipeline:
    """Runs the estimator epoch by epoch over simulator bundles (or replayed data)."""

    def __init__(self, cfg: PipelineConfig, intr: CameraIntrinsics, R_enu, coeffs=None,
                 initial_prior=None):
        self.cfg = cfg
        self.intr = intr
        self.R_enu = np.asarray(R_enu, dtype=float)
        self.coeffs = coeffs or cfg.coeffs or VisionCoefficients(eta=cfg.eta)
        self.sky_cfg = SkyConfig(center=(intr.cx, intr.cy), eta=cfg.eta, blur_window=cfg.blur_window,
                                 loc_scale=cfg.sky_loc_scale)
        self.sat_sky_cfg = (self.sky_cfg if cfg.sat_sky_loc_scale is None
                            else replace(self.sky_cfg, loc_scale=cfg.sat_sky_loc_scale))
        self.rng = np.random.default_rng(cfg.seed)
        self.gps_monitor = GpsFaultMonitor(cfg.calibration_epochs)
        self.window: list[EpochMeasurements] = []
        self.window_idx: list[int] = []
        self.window_states: list[OverallState] = []
        self.filtered: dict[int, tuple] = {}      # epoch -> (vehicle vector, covariance)
        self.prev_status: dict[int, float] = {}
        self.chi_bar = 0.0
        self.keyframe: Keyframe | None = None
        self.results: list[EpochResult] = []
        self._blur_cache: dict = {}
        self._coeffs_calibrated = not cfg.calibrate_coeffs
        # (mean 11-vector, covariance); None derives it from the first epoch
        self._init_prior = initial_prior

    # ------------------------------------------------------------------
    def _sky(self, frame, sky_cfg=None):
        if frame is None:
            return None
        try:
            return sky_probability(frame, sky_cfg or self.sky_cfg)
        except NoThresholdError:
            return None

    def _predicted_vehicle(self, bundle):
        if not self.results:
            return None
        last = self.results[-1].state.vehicle
        return motion_model(last, bundle.control, bundle.dt)

    def _initial_prior(self, bundle, sat_prior):
        pos, clk, _ = snapshot_fix(bundle.pseudoranges.rho, sat_prior[:, 0:3], sat_prior[:, 3],
                                   x0=np.r_[self.R_enu[:, 2] * 6.4e6, 0.0])
        att = bundle.truth.vehicle.att     # initial alignment supplied by the platform
        mean = VehicleState(pos, clk, np.zeros(3), 0.0, att).to_vector()
        return mean, self.cfg.initial_cov()

    # ------------------------------------------------------------------
    def step(self, bundle) -> EpochResult:
        cfg = self.cfg
        i = bundle.index
        pr = bundle.pseudoranges
        prior_states = bundle.ephemeris_prior
        sat_prior = np.array([s.to_vector() for s in prior_states])
        use_vision = cfg.vision and bundle.frame is not None
        mask = self._sky(bundle.frame) if use_vision else None

        if self._init_prior is None:
            self._init_prior = self._initial_prior(bundle, sat_prior)
        pred = self._predicted_vehicle(bundle)
        guess_vehicle = pred if pred is not None else VehicleState.from_vector(self._init_prior[0])

        # pseudorange variance from C/N0 and the sky probability at each satellite
        if use_vision and mask is not None:
            sat_mask = mask if self.sat_sky_cfg is self.sky_cfg else self._sky(bundle.frame, self.sat_sky_cfg)
            p_sky = np.array([satellite_los_probability(s, guess_vehicle, sat_mask, self.intr, self.R_enu)
                              for s in prior_states])
            if not self._coeffs_calibrated:
                self.coeffs = calibrate_coefficients(self.coeffs, p_sky)
                self._coeffs_calibrated = True
        else:
            p_sky = np.ones(len(pr))
        sigma = np.sqrt(pseudorange_covariance(pr.cn0, p_sky, self.coeffs))
        status = np.array([self.prev_status.get(int(p), 0.0) for p in pr.prn])

        ep = EpochMeasurements(t=bundle.t, prn=pr.prn, rho=pr.rho, sigma=sigma, sat_prior=sat_prior,
                               sat_prior_cov=ephemeris_cov(), gps_status=status,
                               control=bundle.control, dt=bundle.dt,
                               image=bundle.frame.intensities if use_vision else None)
        init_state = OverallState(guess_vehicle, [s for s in prior_states], self._landmark_guess())
        self.window.append(ep)
        self.window_idx.append(i)
        self.window_states.append(init_state)
        while len(self.window) > cfg.window.T:
            self.window.pop(0)
            self.window_idx.pop(0)
            self.window_states.pop(0)

        first = self.window_idx[0]
        if first - 1 in self.filtered:
            xv, P = self.filtered[first - 1]
            mean, cov = predict_vehicle_prior(VehicleState.from_vector(xv), P, self.window[0].control,
                                              self.window[0].dt, cfg.process_cov(self.window[0].dt),
                                              self.chi_bar, cfg.chi_bar_scope)
        else:
            mean, cov = self._init_prior

        lms = self.keyframe.landmarks if (use_vision and self.keyframe is not None) else None
        if lms is not None:
            lms.status = np.array(self._landmark_status if self._landmark_status is not None
                                  else np.full(len(lms), cfg.vision_penalty))
        epochs = self.window
        if lms is not None:
            # photometric terms only for frames taken at or after the keyframe
            kf_epoch = self.keyframe.epoch
            epochs = [ep if idx >= kf_epoch else replace(ep, image=None)
                      for ep, idx in zip(self.window, self.window_idx)]
        slot = None
        if lms is not None and self.keyframe.epoch in self.window_idx:
            slot = self.window_idx.index(self.keyframe.epoch)
        problem = WindowProblem(epochs, mean, cov, cfg.process_cov(bundle.dt), self.R_enu,
                                intr=self.intr, landmarks=lms, chi_bar=self.chi_bar,
                                use_vision=use_vision, chi_bar_scope=cfg.chi_bar_scope, anchor_slot=slot)
        init = self.window_states
        if problem.has_vision:
            # coarse-to-fine: blurred images widen the photometric convergence basin
            for s in cfg.pyramid_sigmas:
                coarse = self._blurred_problem(problem, s)
                init = optimize_window(coarse, init, cfg.window, cfg.estimator).states
        res = optimize_window(problem, init, cfg.window, cfg.estimator)
        self.window_states = res.states
        if slot is not None:
            kv = res.states[slot].vehicle
            self.keyframe.refresh(kv.pos, kv.att, res.vehicle_covariance(slot), self.R_enu)
        est = res.states[-1]
        P_last = res.vehicle_covariance(-1)
        self.filtered[i] = (est.vehicle.to_vector(), P_last)
        self.filtered.pop(i - cfg.window.T - 2, None)

        # GPS fault status from this epoch's residuals
        x = est.vehicle
        resid = np.array([r - (np.linalg.norm(s.pos - x.pos) + x.clk_bias - s.clk_bias)
                          for r, s in zip(pr.rho, est.satellites)])
        gps_status = self.gps_monitor.update(pr.prn, resid)

        # vision fault status against the current keyframe
        spx_status = lm_status = None
        spx = None
        kf_epoch = None
        if use_vision and self.keyframe is not None and self.keyframe.landmarks is not None:
            kf = self.keyframe
            kf_epoch = kf.epoch
            pose = relative_pose(kf.pos, kf.att, x.pos, x.att, self.R_enu)
            # shallow copies keep this epoch's pairs after the next epoch refills them
            spx = [replace(sp) for sp in
                   attach_intensity_pairs(kf.superpixels, kf.frame, bundle.frame, pose, self.intr)]
            tol = cfg.ransac_tol if cfg.ransac_tol is not None else 3.0 * cfg.photometric_omega
            spx_status = vision_fault_status(spx, tol, cfg.ransac_iters, cfg.min_consensus,
                                             cfg.vision_penalty, include_self=cfg.vision_include_self,
                                             rng=self.rng)
            lut = np.full(len(spx) + 1, cfg.vision_penalty)
            lut[1:] = spx_status
            src = kf.landmarks.source_pixels.astype(int)
            lm_status = lut[kf.labels[src[:, 1], src[:, 0]]]

        # protection level from the current-epoch linearisation
        beta = res.beta if cfg.integrity_beta is None else min(res.beta, cfg.integrity_beta)
        report, mode = self._integrity(bundle, ep, est, lms, gps_status, lm_status, beta)
        self.chi_bar = report.pl
        self.prev_status = {int(p): float(s) for p, s in zip(pr.prn, gps_status)}
        self._landmark_status = lm_status

        out = EpochResult(index=i, t=bundle.t, state=est, cost=res.cost, iterations=res.iterations,
                          gps_residual=resid, gps_status=gps_status, p_sky=p_sky, sigma=sigma,
                          report=report, fault_mode=mode, keyframe_epoch=kf_epoch, superpixels=spx,
                          superpixel_status=spx_status, landmark_status=lm_status,
                          n_landmarks=0 if lms is None else len(lms), sky_mask=mask, prn=pr.prn)
        self.results.append(out)

        if use_vision:
            self._maybe_keyframe(bundle, est, P_last, mask)
        return out

    _landmark_status = None

    def _blurred(self, image, sigma):
        key = (id(image), sigma)
        out = self._blur_cache.get(key)
        if out is None:
            out = ndimage.gaussian_filter(image, sigma, mode="nearest")
            self._blur_cache[key] = out
            if len(self._blur_cache) > 4 * (self.cfg.window.T + 1):
                self._blur_cache.pop(next(iter(self._blur_cache)))
        return out

    def _blurred_problem(self, problem, sigma):
        lms = problem.landmarks
        kf_img = self._blurred(self.keyframe.frame.intensities, sigma)
        src = lms.source_pixels.astype(int)
        coarse_lms = replace(lms, ref_intensity=kf_img[src[:, 1], src[:, 0]])
        epochs = [ep if ep.image is None else replace(ep, image=self._blurred(ep.image, sigma))
                  for ep in problem.epochs]
        return replace(problem, epochs=epochs, landmarks=coarse_lms)

    def _landmark_guess(self):
        kf = self.keyframe
        if kf is None or kf.landmarks is None:
            return []
        # keep the refined positions while the keyframe is unchanged
        if self.window_states and self._lm_keyframe == kf.epoch:
            lms = self.window_states[-1].landmarks
            if len(lms) == len(kf.landmarks):
                return [l for l in lms]
        self._lm_keyframe = kf.epoch
        for st in self.window_states:
            st.landmarks = kf.landmarks.as_pixel_landmarks()
        return kf.landmarks.as_pixel_landmarks()

    _lm_keyframe = None

    # ------------------------------------------------------------------
    def _integrity(self, bundle, ep, est, lms, gps_status, lm_status, beta):
        cfg = self.cfg
        i = bundle.index
        if i - 1 in self.filtered:
            xv, P = self.filtered[i - 1]
            mean, cov = predict_vehicle_prior(VehicleState.from_vector(xv), P, bundle.control, bundle.dt,
                                              cfg.process_cov(bundle.dt), self.chi_bar,
                                              cfg.chi_bar_scope)
        else:
            mean, cov = self._init_prior
        single = WindowProblem([ep], mean, cov, cfg.process_cov(bundle.dt), self.R_enu, intr=self.intr,
                               landmarks=lms, chi_bar=self.chi_bar, use_vision=lms is not None,
                               chi_bar_scope=cfg.chi_bar_scope)
        theta = pack_window(single, [est])
        lin = linearize_window(single, theta)
        W = row_weights(lin, cfg.estimator)
        sys = integrity.linearize(lin.C.toarray(), W, beta, residual=lin.e, groups=lin.groups)

        # fault mode in row order: GPS and photometric rows can be flagged
        mode = np.zeros(lin.n, dtype=int)
        g = lin.groups["gps"][0]
        mode[g] = (gps_status > cfg.kappa).astype(int)
        n_model = lin.n - len(gps_status)
        pix_flags = np.zeros(0)
        if "photometric" in lin.groups and lm_status is not None:
            ph = lin.groups["photometric"][0]
            active = lin.photometric_active[0]
            pix_flags = lm_status[active]
            mode[ph] = (pix_flags > cfg.kappa).astype(int)
            n_model -= len(active)
        b_t = assemble_fault_mode(gps_status, pix_flags, cfg.kappa, n_model)
        assert b_t.sum() == mode.sum()
        report = integrity.evaluate(sys, mode, cfg.p_fa, cfg.p_md, epoch=bundle.t)
        return report, b_t

    # ------------------------------------------------------------------
    def _maybe_keyframe(self, bundle, est, P, mask):
        cfg = self.cfg
        x = est.vehicle
        if self.keyframe is not None and self.keyframe.landmarks is not None:
            moved = float(np.linalg.norm(x.pos - self.keyframe.pos))
            R_wc = camera_to_world(x.att, self.R_enu)
            q = (self.keyframe.landmarks.prior - x.pos) @ R_wc
            uv, ok = project_valid(q, self.intr)
            H, W = self.intr.shape
            ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
            overlap = float(ok.mean())
            if moved <= cfg.keyframe_distance and overlap >= cfg.keyframe_overlap:
                return
        if mask is None or bundle.inverse_depth is None:
            return
        kf = self._make_keyframe(bundle, est, P, mask)
        if kf is not None:
            self.keyframe = kf
            self._landmark_status = None

    def _make_keyframe(self, bundle, est, P, mask):
        cfg = self.cfg
        depth = bundle.inverse_depth
        non_sky = ~mask.is_sky
        # interior pixels only: bilinear samples must not straddle a depth edge
        inner = ndimage.binary_erosion(non_sky, iterations=2)
        inner &= ndimage.binary_erosion(np.isfinite(depth), iterations=2)
        H, W = depth.shape
        border = np.zeros_like(inner)
        border[5:H - 5, 5:W - 5] = True
        with np.errstate(invalid="ignore"):
            near = depth > 1.0 / cfg.max_landmark_range
        cand = inner & border & near
        if cand.sum() < cfg.min_landmarks:
            return None
        grad = mask.gradient
        thr = np.percentile(grad[cand], cfg.gradient_percentile)
        pick = cand & (grad > thr)
        yy, xx = np.nonzero(pick)
        if len(xx) < 2:
            return None
        n = min(cfg.max_landmarks, len(xx))
        sel = np.sort(self.rng.choice(len(xx), size=n, replace=False))
        uv = np.column_stack([xx[sel], yy[sel]]).astype(float)
        d = depth[yy[sel], xx[sel]]
        x = est.vehicle
        R_wc = camera_to_world(x.att, self.R_enu)
        pc = unproject(uv, d, self.intr)
        rng_ = np.linalg.norm(pc, axis=1)
        rays = (pc / rng_[:, None]) @ R_wc.T
        # keyframe-relative uncertainty: inverse-depth noise along the ray plus a floor
        rel = np.empty((n, 3, 3))
        for j in range(n):
            rel[j] = ((rng_[j] * cfg.depth_rel_std) ** 2 * np.outer(rays[j], rays[j])
                      + cfg.landmark_floor ** 2 * np.eye(3))
        frame = bundle.frame
        lms = LandmarkSet(prior=x.pos + pc @ R_wc.T, cov=rel.copy(),
                          ref_intensity=frame.intensities[yy[sel], xx[sel]],
                          source_pixels=uv, keyframe_id=bundle.index,
                          status=np.full(n, cfg.vision_penalty), omega=cfg.photometric_omega,
                          anchor=pc, anchor_cov=rel)
        spx, labels = segment_superpixels(frame, non_sky, cfg.superpixels, cfg.min_superpixel)
        kf = Keyframe(bundle.index, frame.as_keyframe(depth), x.pos.copy(), x.att.copy(), lms,
                      spx, labels)
        kf.refresh(x.pos, x.att, P, self.R_enu)
        return kf


def run(bundles, cfg: PipelineConfig, intr, R_enu, coeffs=None, initial_prior=None):
    pipe = Pipeline(cfg, intr, R_enu, coeffs, initial_prior)
    for b in bundles:
        pipe.step(b)
    return pipe.results


def run_scored(scn, cfg: PipelineConfig, keep_masks=False):
    """Simulate ``scn``, run the pipeline over it and score against truth.

    Returns (results, bundles, summary). Sky masks are dropped unless
    ``keep_masks`` since long runs would hold one per epoch.
    """
    from .sim import generate, score_run

    if cfg.suite == "gps_only" and scn.render:
        scn = replace(scn, render=False)
    pipe = Pipeline(cfg, scn.intr, scn.R_enu, scn.coeffs)
    bundles, results = [], []
    for b in generate(scn):
        r = pipe.step(b)
        if not keep_masks:
            r.sky_mask = None
        results.append(r)
        bundles.append(b)
        log.debug("epoch %d pl %.2f", b.index, r.report.pl)
    summary = score_run(results, bundles, kappa=cfg.kappa, fdi_start=cfg.calibration_epochs)
    return results, bundles, summary
