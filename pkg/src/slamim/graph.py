"""Sliding-window robust graph optimisation over vehicle, satellite and
pixel-landmark states.

Residuals follow the convention r = h(theta) - z, so the stacked Jacobian is
the measurement Jacobian dh/dtheta. Every residual block is whitened by its
noise model; fault statuses and Huber weights enter only through the
diagonal weight matrix W, which keeps the whitened Jacobian C reusable by the
integrity monitor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .camera import CameraIntrinsics, bilinear, project_jacobian, project_valid
from .core import (ATT, CLK, DRIFT, LANDMARK_DIM, POS, SATELLITE_DIM, VEHICLE_DIM, VEL,
                   Dimensions, OverallState, PixelLandmark, SatelliteState, VehicleState,
                   euler_rotation_derivatives, euler_to_rotation, wrap_angle)

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, msg, condition=np.inf):
        super().__init__(f"{msg} (condition estimate {condition:.3e})")
        self.condition = condition


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MEstimator:
    """Huber M-estimator on whitened residual norms.

    Vector blocks of dimension d use the threshold c*sqrt(d) on the block norm,
    so a d-dimensional block at the nominal noise level stays in the
    quadratic region just like a scalar one. ``kind='quadratic'`` disables
    the robustification.
    """

    kind: str = "huber"
    c: float = 1.345

    def __post_init__(self):
        if self.kind not in ("huber", "quadratic"):
            raise ValueError(f"unknown M-estimator {self.kind!r}")
        if self.c <= 0:
            raise ValueError("tuning constant must be positive")

    def loss(self, r, dim=1):
        r = np.abs(np.asarray(r, dtype=float))
        if self.kind == "quadratic":
            return 0.5 * r * r
        thr = self.c * np.sqrt(dim)
        return np.where(r <= thr, 0.5 * r * r, thr * r - 0.5 * thr * thr)

    def weight(self, r, dim=1):
        r = np.abs(np.asarray(r, dtype=float))
        if self.kind == "quadratic":
            return np.ones_like(r)
        thr = self.c * np.sqrt(dim)
        return np.minimum(1.0, thr / np.maximum(r, 1e-300))


@dataclass(frozen=True)
class WindowConfig:
    T: int = 5
    max_iters: int = 30
    beta0: float = 1e-3
    beta_shrink: float = 0.2
    beta_grow: float = 10.0
    convergence_tol: float = 1e-6
    cost_tol: float = 1e-4          # relative decrease below which an accepted step ends the loop
    max_rejections: int = 6         # consecutive rejected steps treated as convergence

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("window length must be >= 1")
        if self.beta0 <= 0:
            raise ValueError("beta0 must be positive")
        if not (0 < self.beta_shrink < 1 < self.beta_grow):
            raise ValueError("need 0 < beta_shrink < 1 < beta_grow")
        if self.cost_tol < 0 or self.max_rejections < 1:
            raise ValueError("cost_tol must be >= 0 and max_rejections >= 1")


# --------------------------------------------------------------------------
# motion model

@dataclass
class Control:
    """Vehicle control input: ECEF acceleration and attitude rates."""

    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.accel = np.asarray(self.accel, dtype=float).reshape(3)
        self.rates = np.asarray(self.rates, dtype=float).reshape(3)


def motion_model(x_prev: VehicleState, u_R: Control | None, dt: float) -> VehicleState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    u_R = Control() if u_R is None else u_R
    return VehicleState(
        pos=x_prev.pos + x_prev.vel * dt,
        clk_bias=x_prev.clk_bias + x_prev.clk_drift * dt,
        vel=x_prev.vel + u_R.accel * dt,
        clk_drift=x_prev.clk_drift,
        att=x_prev.att + u_R.rates * dt,
    )


def motion_jacobian(dt: float) -> np.ndarray:
    G = np.eye(VEHICLE_DIM)
    G[POS, VEL] = dt * np.eye(3)
    G[CLK, DRIFT] = dt
    return G


def _motion_vec(xv, u_R: Control, dt):
    out = xv.copy()
    out[POS] = xv[POS] + xv[VEL] * dt
    out[CLK] = xv[CLK] + xv[DRIFT] * dt
    out[VEL] = xv[VEL] + u_R.accel * dt
    out[ATT] = xv[ATT] + u_R.rates * dt
    return out


def _vehicle_diff(a, b):
    d = a - b
    d[ATT] = wrap_angle(d[ATT])
    return d


def chi_bar_inflation(chi_bar, scope="position"):
    """Diagonal added to the motion covariance by the previous protection level.

    ``scope='all'`` adds chi_bar to every vehicle state; ``'position'`` only to
    the position block, the quantity the protection level bounds.
    """
    d = np.zeros(VEHICLE_DIM)
    if scope == "all":
        d[:] = chi_bar
    elif scope == "position":
        d[POS] = chi_bar
    else:
        raise ValueError(f"unknown chi_bar scope {scope!r}")
    return np.diag(d)


def predict_vehicle_prior(x_prev: VehicleState, P_prev, u_R: Control, dt, Q, chi_bar=0.0,
                          scope="position"):
    """Prediction prior for the next epoch: g(x_prev) with G P G^T + Q + chi_bar I."""
    G = motion_jacobian(dt)
    mean = motion_model(x_prev, u_R, dt).to_vector()
    cov = G @ P_prev @ G.T + Q + chi_bar_inflation(chi_bar, scope)
    return mean, cov


# --------------------------------------------------------------------------
# problem description

@dataclass
class EpochMeasurements:
    """Everything one epoch contributes to the window cost."""

    t: float
    prn: np.ndarray
    rho: np.ndarray
    sigma: np.ndarray             # per-satellite std; sigma**2 is the variance model value
    sat_prior: np.ndarray         # (N, 8) orbital-model prediction
    sat_prior_cov: np.ndarray     # (8, 8) or (N, 8, 8)
    gps_status: np.ndarray | None = None   # previous-epoch r-bar
    control: Control = field(default_factory=Control)
    dt: float = 1.0
    image: np.ndarray | None = None

    def __post_init__(self):
        self.prn = np.asarray(self.prn, dtype=int)
        self.rho = np.asarray(self.rho, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.sat_prior = np.asarray(self.sat_prior, dtype=float)
        n = len(self.prn)
        if n < 4:
            raise ValueError("at least 4 satellites required")
        if self.gps_status is None:
            self.gps_status = np.zeros(n)
        self.gps_status = np.asarray(self.gps_status, dtype=float)
        if np.any(~np.isfinite(self.sigma)) or np.any(self.sigma <= 0):
            raise ValueError("pseudorange sigmas must be positive and finite")

    @property
    def n_sats(self):
        return len(self.prn)


@dataclass
class LandmarkSet:
    """Keyframe pixels promoted to world-frame landmarks."""

    prior: np.ndarray             # (L, 3) world positions from the keyframe
    cov: np.ndarray               # (L, 3, 3)
    ref_intensity: np.ndarray     # (L,) I_kf(u_j)
    source_pixels: np.ndarray     # (L, 2)
    keyframe_id: object = None
    status: np.ndarray | None = None   # previous-epoch s-bar per landmark
    omega: float = 3.0                 # photometric residual std
    anchor: np.ndarray | None = None       # (L, 3) keyframe camera-frame points
    anchor_cov: np.ndarray | None = None   # (L, 3, 3) covariance relative to the keyframe pose

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float).reshape(-1, 3)
        L = len(self.prior)
        self.cov = np.asarray(self.cov, dtype=float).reshape(L, 3, 3)
        self.ref_intensity = np.asarray(self.ref_intensity, dtype=float).reshape(L)
        self.source_pixels = np.asarray(self.source_pixels, dtype=float).reshape(L, 2)
        if self.status is None:
            self.status = np.zeros(L)
        self.status = np.asarray(self.status, dtype=float)
        if (self.anchor is None) != (self.anchor_cov is None):
            raise ValueError("anchor points and anchor covariance go together")
        if self.anchor is not None:
            self.anchor = np.asarray(self.anchor, dtype=float).reshape(L, 3)
            self.anchor_cov = np.asarray(self.anchor_cov, dtype=float).reshape(L, 3, 3)

    def __len__(self):
        return len(self.prior)

    def as_pixel_landmarks(self, positions=None):
        pos = self.prior if positions is None else positions
        return [PixelLandmark(p, u, self.keyframe_id) for p, u in zip(pos, self.source_pixels)]


@dataclass
class WindowProblem:
    epochs: list
    vehicle_prior_mean: np.ndarray
    vehicle_prior_cov: np.ndarray
    process_cov: np.ndarray
    R_enu: np.ndarray
    intr: CameraIntrinsics | None = None
    landmarks: LandmarkSet | None = None
    chi_bar: float = 0.0
    use_vision: bool = True
    chi_bar_scope: str = "position"
    anchor_slot: int | None = None     # window epoch holding the keyframe pose

    def __post_init__(self):
        if not self.epochs:
            raise ValueError("empty window")
        n = self.epochs[0].n_sats
        if any(ep.n_sats != n for ep in self.epochs):
            raise ValueError("satellite count must be constant over the window")
        if self.has_vision and self.intr is None:
            raise ValueError("photometric terms need camera intrinsics")
        if self.anchor_slot is not None:
            if not 0 <= self.anchor_slot < len(self.epochs):
                raise ValueError("anchor slot outside the window")
            if self.has_vision and self.landmarks.anchor is None:
                raise ValueError("anchored landmarks need keyframe points")
        self._chol_cache = {}

    @property
    def n_sats(self):
        return self.epochs[0].n_sats

    @property
    def n_landmarks(self):
        return 0 if (self.landmarks is None or not self.use_vision) else len(self.landmarks)

    @property
    def has_vision(self):
        return self.use_vision and self.landmarks is not None and len(self.landmarks) > 0

    @property
    def epoch_dim(self):
        return VEHICLE_DIM + SATELLITE_DIM * self.n_sats

    @property
    def n_states(self):
        return len(self.epochs) * self.epoch_dim + LANDMARK_DIM * self.n_landmarks

    def dims(self, n_meas=None) -> Dimensions:
        return Dimensions(self.n_sats, self.n_landmarks, n_meas)

    def vehicle_index(self, s):
        return s * self.epoch_dim

    def sat_index(self, s, k):
        return s * self.epoch_dim + VEHICLE_DIM + SATELLITE_DIM * k

    def landmark_index(self, j):
        return len(self.epochs) * self.epoch_dim + LANDMARK_DIM * j


def _inv_chol(cov):
    """Whitening matrix L^-1 with cov = L L^T."""
    cov = np.asarray(cov, dtype=float)
    Lc = np.linalg.cholesky(cov)
    eye = np.broadcast_to(np.eye(cov.shape[-1]), cov.shape)
    return np.linalg.solve(Lc, eye)


# --------------------------------------------------------------------------
# residual blocks

@dataclass
class Linearization:
    """Whitened residuals and Jacobian of a window problem at one point."""

    e: np.ndarray                 # noise-whitened residual
    C: sp.csr_matrix | None       # whitened Jacobian
    status_scale: np.ndarray      # 1 / (status + 1) per row
    block: np.ndarray             # block id per row
    block_dim: np.ndarray         # dimension of each block
    groups: dict                  # name -> list of (row slice) per epoch
    photometric_active: list      # per epoch, indices of landmarks used

    @property
    def n(self):
        return len(self.e)


class _Builder:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []
        self.e, self.scale, self.block, self.block_dim = [], [], [], []
        self.n = 0
        self.nblocks = 0
        self.groups = {}

    def add(self, name, e, jac_parts, scale=1.0, block_dims=None):
        """Add residual rows. ``jac_parts`` is a list of (row_offsets, col_start, dense block)."""
        e = np.atleast_1d(np.asarray(e, dtype=float))
        m = len(e)
        start = self.n
        for r_off, c0, blk in jac_parts:
            blk = np.atleast_2d(blk)
            rr = np.asarray(r_off)[:, None] + np.zeros((1, blk.shape[1]), dtype=int)
            cc = c0 + np.arange(blk.shape[1])[None, :] + np.zeros((blk.shape[0], 1), dtype=int)
            self.rows.append((start + rr).ravel())
            self.cols.append(cc.ravel())
            self.vals.append(blk.ravel())
        self.e.append(e)
        self.scale.append(np.broadcast_to(np.asarray(scale, dtype=float), (m,)).copy())
        if block_dims is None:
            block_dims = [m]
        ids = np.repeat(np.arange(self.nblocks, self.nblocks + len(block_dims)), block_dims)
        self.block.append(ids)
        self.block_dim.extend(block_dims)
        self.nblocks += len(block_dims)
        self.groups.setdefault(name, []).append(slice(start, start + m))
        self.n += m

    def finish(self, n_states, need_jac, active):
        e = np.concatenate(self.e) if self.e else np.zeros(0)
        C = None
        if need_jac:
            C = sp.csr_matrix(
                (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))),
                shape=(self.n, n_states))
        return Linearization(e=e, C=C, status_scale=np.concatenate(self.scale),
                             block=np.concatenate(self.block),
                             block_dim=np.asarray(self.block_dim, dtype=int),
                             groups=self.groups, photometric_active=active)


def _whitener(problem: WindowProblem, key, cov):
    W = problem._chol_cache.get(key)
    if W is None:
        W = _inv_chol(cov)
        problem._chol_cache[key] = W
    return W


def linearize_window(problem: WindowProblem, theta, need_jac=True, active=None) -> Linearization:
    """Evaluate every residual block (and optionally the sparse Jacobian).

    ``active`` fixes which landmarks contribute photometric rows in each epoch;
    when None the set is determined here (landmarks whose reprojection is
    valid and inside the image).
    """
    theta = np.asarray(theta, dtype=float)
    b = _Builder()
    N = problem.n_sats

    # prior on the first window epoch
    Lw = _whitener(problem, "vprior", problem.vehicle_prior_cov)
    i0 = problem.vehicle_index(0)
    d = _vehicle_diff(theta[i0:i0 + VEHICLE_DIM], problem.vehicle_prior_mean)
    b.add("vehicle_prior", Lw @ d, [(np.arange(VEHICLE_DIM), i0, Lw)])

    Qc = problem.process_cov + chi_bar_inflation(problem.chi_bar, problem.chi_bar_scope)
    for s, ep in enumerate(problem.epochs):
        iv = problem.vehicle_index(s)
        xv = theta[iv:iv + VEHICLE_DIM]

        # motion link to the previous window epoch
        if s > 0:
            ip = problem.vehicle_index(s - 1)
            Lq = _whitener(problem, "Q", Qc)
            G = motion_jacobian(ep.dt)
            d = _vehicle_diff(xv, _motion_vec(theta[ip:ip + VEHICLE_DIM], ep.control, ep.dt))
            b.add("motion", Lq @ d, [(np.arange(VEHICLE_DIM), iv, Lq),
                                     (np.arange(VEHICLE_DIM), ip, -Lq @ G)])

        # pseudoranges
        isat = problem.sat_index(s, 0)
        sats = theta[isat:isat + SATELLITE_DIM * N].reshape(N, SATELLITE_DIM)
        los = sats[:, 0:3] - xv[POS]
        rng = np.linalg.norm(los, axis=1)
        h = rng + xv[CLK] - sats[:, 3]
        inv_s = 1.0 / ep.sigma
        e = (h - ep.rho) * inv_s
        parts = []
        if need_jac:
            u = los / rng[:, None]
            rows = np.arange(N)
            Jv = np.zeros((N, VEHICLE_DIM))
            Jv[:, POS] = -u * inv_s[:, None]
            Jv[:, CLK] = inv_s
            parts.append((rows, iv, Jv))
            for k in range(N):
                Js = np.zeros((1, SATELLITE_DIM))
                Js[0, 0:3] = u[k] * inv_s[k]
                Js[0, 3] = -inv_s[k]
                parts.append((np.array([k]), isat + SATELLITE_DIM * k, Js))
        b.add("gps", e, parts, scale=1.0 / (ep.gps_status + 1.0), block_dims=[1] * N)

        # orbital-model (ephemeris) priors
        cov = np.asarray(ep.sat_prior_cov, dtype=float)
        if cov.ndim == 2:
            Lo = _whitener(problem, ("eph", s, "shared"), cov)
            Lo = np.broadcast_to(Lo, (N, SATELLITE_DIM, SATELLITE_DIM))
        else:
            Lo = _whitener(problem, ("eph", s), cov)
        d = sats - ep.sat_prior
        e = np.einsum("kij,kj->ki", Lo, d).ravel()
        parts = [(np.arange(SATELLITE_DIM) + SATELLITE_DIM * k, isat + SATELLITE_DIM * k, Lo[k])
                 for k in range(N)] if need_jac else []
        b.add("ephemeris", e, parts, block_dims=[SATELLITE_DIM] * N)

    # landmark priors + photometric terms
    act_out = []
    if problem.has_vision:
        lms = problem.landmarks
        L = len(lms)
        il = problem.landmark_index(0)
        P = theta[il:il + LANDMARK_DIM * L].reshape(L, 3)
        if problem.anchor_slot is None:
            Lp = _whitener(problem, "lm", lms.cov)
            e = np.einsum("kij,kj->ki", Lp, P - lms.prior).ravel()
            parts = [(np.arange(3) + 3 * j, il + 3 * j, Lp[j]) for j in range(L)] if need_jac else []
        else:
            # p_j tied to the keyframe pose: p_j - (x_kf + R_wc(att_kf) c_j)
            Lp = _whitener(problem, "lm_anchor", lms.anchor_cov)
            ia = problem.vehicle_index(problem.anchor_slot)
            xa = theta[ia:ia + VEHICLE_DIM]
            Rwc = problem.R_enu @ euler_to_rotation(xa[ATT])
            d = P - xa[POS] - lms.anchor @ Rwc.T
            e = np.einsum("kij,kj->ki", Lp, d).ravel()
            parts = []
            if need_jac:
                dE = euler_rotation_derivatives(xa[ATT])
                dA = np.stack([-(lms.anchor @ (problem.R_enu @ dEa).T) for dEa in dE], axis=-1)  # (L,3,3)
                for j in range(L):
                    rows = np.arange(3) + 3 * j
                    Jv = np.zeros((3, VEHICLE_DIM))
                    Jv[:, POS] = -np.eye(3)
                    Jv[:, ATT] = dA[j]
                    parts.append((rows, il + 3 * j, Lp[j]))
                    parts.append((rows, ia, Lp[j] @ Jv))
        b.add("landmark", e, parts, block_dims=[3] * L)

        inv_w = 1.0 / lms.omega
        for s, ep in enumerate(problem.epochs):
            if ep.image is None:
                act_out.append(np.zeros(0, dtype=int))
                continue
            iv = problem.vehicle_index(s)
            xv = theta[iv:iv + VEHICLE_DIM]
            E = euler_to_rotation(xv[ATT])
            Rwc = problem.R_enu @ E
            q = (P - xv[POS]) @ Rwc          # rows are R_wc^T (p - x)
            uv, ok = project_valid(q, problem.intr)
            val, grad = bilinear(ep.image, uv, with_gradient=True)
            ok &= np.isfinite(val)
            if active is None:
                idx = np.flatnonzero(ok)
            else:
                idx = np.asarray(active[s], dtype=int)
                if not np.all(ok[idx]):
                    # a previously usable pixel left the image: signal an invalid point
                    e = np.full(len(idx), np.inf)
                    b.add("photometric", e, [], block_dims=[1] * len(idx) if len(idx) else [])
                    act_out.append(idx)
                    continue
            act_out.append(idx)
            if len(idx) == 0:
                continue
            e = (val[idx] - lms.ref_intensity[idx]) * inv_w
            parts = []
            if need_jac:
                Jp = project_jacobian(q[idx], problem.intr)            # (m, 2, 3)
                gJ = np.einsum("mi,mij->mj", grad[idx], Jp) * inv_w     # dr/dq
                rows = np.arange(len(idx))
                dp = gJ @ Rwc.T                                         # dq/dp = R_wc^T
                Jv = np.zeros((len(idx), VEHICLE_DIM))
                Jv[:, POS] = -dp
                dE = euler_rotation_derivatives(xv[ATT])
                rel = P[idx] - xv[POS]
                for a, dEa in enumerate(dE):
                    dq = rel @ (problem.R_enu @ dEa)
                    Jv[:, 8 + a] = np.einsum("mj,mj->m", gJ, dq)
                parts.append((rows, iv, Jv))
                for r, j in enumerate(idx):
                    parts.append((np.array([r]), il + 3 * j, dp[r:r + 1]))
            b.add("photometric", e, parts, scale=1.0 / (lms.status[idx] + 1.0),
                  block_dims=[1] * len(idx))
    return b.finish(problem.n_states, need_jac, act_out)


def robust_cost(lin: Linearization, est: MEstimator) -> float:
    if not np.all(np.isfinite(lin.e)):
        return np.inf
    z = lin.e * lin.status_scale
    norms = np.sqrt(np.bincount(lin.block, weights=z * z, minlength=len(lin.block_dim)))
    return float(np.sum(est.loss(norms, lin.block_dim)))


def row_weights(lin: Linearization, est: MEstimator) -> np.ndarray:
    """Diagonal of W: Huber block weight times the squared status scaling."""
    z = lin.e * lin.status_scale
    norms = np.sqrt(np.bincount(lin.block, weights=z * z, minlength=len(lin.block_dim)))
    wb = est.weight(norms, lin.block_dim)
    return wb[lin.block] * lin.status_scale ** 2


# --------------------------------------------------------------------------
# state packing

def pack_window(problem: WindowProblem, states) -> np.ndarray:
    theta = np.zeros(problem.n_states)
    for s, st in enumerate(states):
        iv = problem.vehicle_index(s)
        theta[iv:iv + VEHICLE_DIM] = st.vehicle.to_vector()
        for k, sat in enumerate(st.satellites):
            i = problem.sat_index(s, k)
            theta[i:i + SATELLITE_DIM] = sat.to_vector()
    if problem.has_vision:
        il = problem.landmark_index(0)
        lms = states[-1].landmarks
        if len(lms) == len(problem.landmarks):
            pos = np.array([lm.world_pos for lm in lms])
        else:
            pos = problem.landmarks.prior
        theta[il:] = pos.ravel()
    return theta


def unpack_window(problem: WindowProblem, theta) -> list:
    out = []
    N = problem.n_sats
    lm_list = []
    if problem.has_vision:
        il = problem.landmark_index(0)
        lm_list = problem.landmarks.as_pixel_landmarks(theta[il:].reshape(-1, 3))
    for s, ep in enumerate(problem.epochs):
        iv = problem.vehicle_index(s)
        veh = VehicleState.from_vector(theta[iv:iv + VEHICLE_DIM])
        sats = [SatelliteState.from_vector(theta[problem.sat_index(s, k):problem.sat_index(s, k) + SATELLITE_DIM],
                                           prn=int(ep.prn[k])) for k in range(N)]
        out.append(OverallState(veh, sats, [PixelLandmark(l.world_pos.copy(), l.source_pixel, l.keyframe_id)
                                            for l in lm_list]))
    return out


def _retract(problem, theta, delta):
    new = theta + delta
    for s in range(len(problem.epochs)):
        iv = problem.vehicle_index(s)
        new[iv + 8:iv + 11] = wrap_angle(new[iv + 8:iv + 11])
    return new


# --------------------------------------------------------------------------
# optimiser

@dataclass
class WindowResult:
    states: list
    theta: np.ndarray
    initial_cost: float
    cost: float
    iterations: int
    accepted: int
    beta: float
    converged: bool
    linearization: Linearization
    weights: np.ndarray
    problem: WindowProblem = field(repr=False, default=None)
    _normal_lu: object = field(repr=False, default=None)

    def vehicle_covariance(self, s=-1) -> np.ndarray:
        """Marginal covariance of one epoch's vehicle block, (C^T W C)^-1."""
        s = s % len(self.problem.epochs)
        iv = self.problem.vehicle_index(s)
        if self._normal_lu is None:
            C = self.linearization.C
            A = (C.T @ sp.diags(self.weights) @ C).tocsc()
            self._normal_lu = splu(A)
        rhs = np.zeros((self.problem.n_states, VEHICLE_DIM))
        rhs[iv:iv + VEHICLE_DIM] = np.eye(VEHICLE_DIM)
        X = self._normal_lu.solve(rhs)
        P = X[iv:iv + VEHICLE_DIM]
        return 0.5 * (P + P.T)


def assemble_cost(problem: WindowProblem, states, est: MEstimator | None = None):
    """Robust window cost at the given per-epoch states.

    Returns (linearization, cost); ``linearization.n`` is the residual count n.
    """
    est = est or MEstimator()
    theta = pack_window(problem, states)
    lin = linearize_window(problem, theta, need_jac=True)
    return lin, robust_cost(lin, est)


def _normal_solve(A, g):
    try:
        lu = splu(A.tocsc())
        x = lu.solve(g)
    except RuntimeError as exc:
        d = A.diagonal()
        cond = np.inf if np.min(np.abs(d)) == 0 else float(np.max(np.abs(d)) / np.min(np.abs(d)))
        raise OptimizationError(f"normal equations singular: {exc}", cond) from exc
    if not np.all(np.isfinite(x)):
        d = A.diagonal()
        raise OptimizationError("normal equations produced non-finite step",
                                float(np.max(np.abs(d)) / max(np.min(np.abs(d)), 1e-300)))
    return x


def optimize_window(problem: WindowProblem, init, cfg: WindowConfig | None = None,
                    est: MEstimator | None = None) -> WindowResult:
    """M-estimator weighted Levenberg-Marquardt over the window.

    Solves (C^T W C + beta diag(C^T C)) delta = -C^T W e with W refreshed from
    the current residuals each iteration; steps are accepted only when the
    robust cost decreases.
    """
    cfg = cfg or WindowConfig()
    est = est or MEstimator()
    theta = pack_window(problem, init) if not isinstance(init, np.ndarray) else init.copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("initial state is not finite")
    lin = linearize_window(problem, theta)
    active = lin.photometric_active
    cost0 = cost = robust_cost(lin, est)
    beta = cfg.beta0
    beta_used = beta       # damping of the last accepted step, reused by the integrity monitor
    accepted = rejected = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        w = row_weights(lin, est)
        C = lin.C
        A = (C.T @ sp.diags(w) @ C).tocsr()
        g = C.T @ (w * lin.e)
        D = np.asarray(C.multiply(C).sum(axis=0)).ravel()
        D = np.maximum(D, 1e-12 * max(D.max(), 1.0))
        delta = _normal_solve(A + beta * sp.diags(D), -g)
        step = float(np.linalg.norm(delta))
        trial = _retract(problem, theta, delta)
        lin_t = linearize_window(problem, trial, need_jac=False, active=active)
        cost_t = robust_cost(lin_t, est)
        if cost_t < cost:
            small = (cost - cost_t) <= cfg.cost_tol * max(cost, 1e-300)
            theta = trial
            cost = cost_t
            accepted += 1
            rejected = 0
            beta_used = beta
            beta = max(beta * cfg.beta_shrink, 1e-12)
            lin = linearize_window(problem, theta, active=active)
            if small:
                converged = True
                break
        else:
            rejected += 1
            beta = min(beta * cfg.beta_grow, 1e12)
            if rejected >= cfg.max_rejections:
                converged = True
                break
        if step < cfg.convergence_tol:
            converged = True
            break
    w = row_weights(lin, est)
    return WindowResult(states=unpack_window(problem, theta), theta=theta, initial_cost=cost0,
                        cost=cost, iterations=it, accepted=accepted, beta=beta_used,
                        converged=converged, linearization=lin, weights=w, problem=problem)


def jacobians(problem: WindowProblem, states):
    """Dense per-group Jacobian blocks {'H': gps, 'A': motion/orbit/landmark priors,
    'J': photometric} of the whitened residuals."""
    theta = pack_window(problem, states)
    lin = linearize_window(problem, theta)
    C = lin.C.toarray()

    def rows(names):
        idx = [np.arange(sl.start, sl.stop) for n in names for sl in lin.groups.get(n, [])]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    return {
        "H": C[rows(["gps"])],
        "A": C[rows(["vehicle_prior", "motion", "ephemeris", "landmark"])],
        "J": C[rows(["photometric"])],
    }
