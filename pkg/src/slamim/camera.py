"""Unified omnidirectional camera model, 3D warp and photometric residuals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import euler_to_rotation

PROJ_EPS = 1e-9


class ProjectionError(ValueError):
    """Point lies behind the unified-model projection surface."""


class InvalidDepthError(ValueError):
    """Inverse distance must be strictly positive."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    xi: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")

    @property
    def shape(self):
        return (self.height, self.width)


@dataclass
class FisheyeFrame:
    intensities: np.ndarray
    timestamp: float = 0.0
    inverse_depth: np.ndarray | None = None
    is_keyframe: bool = False

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=float)
        I = self.intensities
        if I.ndim != 2 or not np.all(np.isfinite(I)):
            raise ValueError("intensities must be a finite 2-D grid")
        if I.min() < 0 or I.max() > 255:
            raise ValueError("intensities must lie in [0, 255]")
        if self.is_keyframe != (self.inverse_depth is not None):
            raise ValueError("inverse depth must be present exactly for keyframes")
        if self.inverse_depth is not None:
            d = np.asarray(self.inverse_depth, dtype=float)
            if d.shape != I.shape:
                raise ValueError("inverse depth grid does not match the image")
            # NaN marks pixels without depth (sky); stored values must be > 0
            if np.any(d[np.isfinite(d)] <= 0):
                raise ValueError("stored inverse depths must be positive")
            self.inverse_depth = d

    @property
    def shape(self):
        return self.intensities.shape

    def as_keyframe(self, inverse_depth) -> "FisheyeFrame":
        return FisheyeFrame(self.intensities, self.timestamp, inverse_depth, True)


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls()


def camera_to_world(att, R_enu) -> np.ndarray:
    """Rotation taking camera-frame vectors to ECEF (camera rigidly = body)."""
    return R_enu @ euler_to_rotation(att)


def relative_pose(kf_pos, kf_att, cur_pos, cur_att, R_enu) -> RelativePose:
    """Pose mapping keyframe-camera coordinates into current-camera coordinates."""
    R_wk = camera_to_world(kf_att, R_enu)
    R_wc = camera_to_world(cur_att, R_enu)
    R = R_wc.T @ R_wk
    t = R_wc.T @ (np.asarray(kf_pos, float) - np.asarray(cur_pos, float))
    return RelativePose(R, t)


# --------------------------------------------------------------------------
# projection model

def _denominator(p, xi):
    return p[..., 2] + np.linalg.norm(p, axis=-1) * xi


def project(p, intr: CameraIntrinsics) -> np.ndarray:
    """Map camera-frame points (..., 3) to pixels (..., 2)."""
    p = np.asarray(p, dtype=float)
    den = _denominator(p, intr.xi)
    if np.any(den <= PROJ_EPS):
        raise ProjectionError("point not in front of the projection surface")
    return np.stack([intr.fx * p[..., 0] / den + intr.cx,
                     intr.fy * p[..., 1] / den + intr.cy], axis=-1)


def project_valid(p, intr: CameraIntrinsics):
    """Vectorised projection returning (pixels, valid) instead of raising."""
    p = np.asarray(p, dtype=float)
    den = _denominator(p, intr.xi)
    ok = den > PROJ_EPS
    safe = np.where(ok, den, 1.0)
    u = np.stack([intr.fx * p[..., 0] / safe + intr.cx,
                  intr.fy * p[..., 1] / safe + intr.cy], axis=-1)
    u[~ok] = np.nan
    return u, ok


def project_jacobian(p, intr: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(point), shape (..., 2, 3)."""
    p = np.asarray(p, dtype=float)
    nrm = np.linalg.norm(p, axis=-1)
    den = p[..., 2] + nrm * intr.xi
    # d(den)/dp = xi * p/|p| + e_z
    dden = intr.xi * p / nrm[..., None]
    dden[..., 2] += 1.0
    J = np.zeros(p.shape[:-1] + (2, 3))
    inv = 1.0 / den
    inv2 = inv * inv
    J[..., 0, 0] = intr.fx * inv
    J[..., 1, 1] = intr.fy * inv
    J[..., 0, :] -= (intr.fx * p[..., 0] * inv2)[..., None] * dden
    J[..., 1, :] -= (intr.fy * p[..., 1] * inv2)[..., None] * dden
    return J


def unproject(u, d, intr: CameraIntrinsics) -> np.ndarray:
    """Back-project pixels (..., 2) at inverse distance ``d`` to camera-frame points.

    Uses the round-trip-consistent unified-model inverse: (1 - xi^2) under the
    root and a direction vector [u_hat, v_hat, 1].
    """
    u = np.asarray(u, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise InvalidDepthError("inverse distance must be > 0")
    uh = (u[..., 0] - intr.cx) / intr.fx
    vh = (u[..., 1] - intr.cy) / intr.fy
    r2 = uh * uh + vh * vh
    xi = intr.xi
    disc = 1.0 + (1.0 - xi * xi) * r2
    if np.any(disc < 0):
        raise ProjectionError("pixel outside the valid unified-model domain")
    factor = (xi + np.sqrt(disc)) / (r2 + 1.0)
    ray = np.stack([factor * uh, factor * vh, factor - xi], axis=-1)
    return ray / d[..., None]


def warp(pose: RelativePose, u, d_kf, intr: CameraIntrinsics) -> np.ndarray:
    p = unproject(u, d_kf, intr)
    return p @ pose.rotation.T + pose.translation


# --------------------------------------------------------------------------
# image sampling

def bilinear(image, u, with_gradient: bool = False):
    """Sample ``image`` at continuous pixel coordinates (..., 2) = (x, y).

    Points whose 2x2 support leaves the image are returned as NaN. With
    ``with_gradient`` the exact derivative of the interpolant is returned too.
    """
    image = np.asarray(image, dtype=float)
    H, W = image.shape
    u = np.asarray(u, dtype=float)
    x = u[..., 0]
    y = u[..., 1]
    finite = np.isfinite(x) & np.isfinite(y)
    inside = finite & (x >= 0) & (y >= 0) & (x <= W - 1) & (y <= H - 1)
    xs = np.where(inside, x, 0.0)
    ys = np.where(inside, y, 0.0)
    x0 = np.minimum(np.floor(xs).astype(int), W - 2)
    y0 = np.minimum(np.floor(ys).astype(int), H - 2)
    fx = xs - x0
    fy = ys - y0
    I00 = image[y0, x0]
    I01 = image[y0, x0 + 1]
    I10 = image[y0 + 1, x0]
    I11 = image[y0 + 1, x0 + 1]
    top = I00 + fx * (I01 - I00)
    bot = I10 + fx * (I11 - I10)
    val = top + fy * (bot - top)
    val = np.where(inside, val, np.nan)
    if not with_gradient:
        return val
    gx = (1 - fy) * (I01 - I00) + fy * (I11 - I10)
    gy = bot - top
    grad = np.stack([gx, gy], axis=-1)
    grad[~inside] = np.nan
    return val, grad


def photometric_residuals(kf: FisheyeFrame, cur: FisheyeFrame, pose: RelativePose, u,
                          intr: CameraIntrinsics) -> np.ndarray:
    """Vectorised I_kf(u) - I_cur(pi(w(pose, u))); NaN where unavailable."""
    if kf.inverse_depth is None:
        raise ValueError("keyframe has no inverse depth")
    u = np.atleast_2d(np.asarray(u, dtype=float))
    ix = np.rint(u[:, 0]).astype(int)
    iy = np.rint(u[:, 1]).astype(int)
    H, W = kf.shape
    on_grid = (ix >= 0) & (iy >= 0) & (ix < W) & (iy < H)
    ix = np.clip(ix, 0, W - 1)
    iy = np.clip(iy, 0, H - 1)
    d = kf.inverse_depth[iy, ix]
    ok = on_grid & np.isfinite(d) & (d > 0)
    out = np.full(len(u), np.nan)
    if not np.any(ok):
        return out
    p = warp(pose, u[ok], d[ok], intr)
    uc, valid = project_valid(p, intr)
    ref = bilinear(kf.intensities, u[ok])
    val = bilinear(cur.intensities, uc)
    res = ref - val
    res[~valid] = np.nan
    out[ok] = res
    return out


def photometric_residual(kf: FisheyeFrame, cur: FisheyeFrame, pose: RelativePose, u,
                         intr: CameraIntrinsics) -> float:
    """Single-pixel photometric residual. NaN means the pixel must be dropped."""
    return float(photometric_residuals(kf, cur, pose, np.asarray(u, float)[None, :], intr)[0])


def pixel_grid(shape) -> np.ndarray:
    """All integer pixel coordinates (H*W, 2) in row-major order, as (x, y)."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W]
    return np.column_stack([xx.ravel(), yy.ravel()]).astype(float)


def should_make_keyframe(translation_since_kf: float, overlap: float,
                         max_translation: float = 5.0, min_overlap: float = 0.6) -> bool:
    return translation_since_kf > max_translation or overlap < min_overlap
