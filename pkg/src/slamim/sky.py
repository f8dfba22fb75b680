"""Hybrid sky detection: median blur, Sobel gradient, Otsu threshold and a
centre-weighted location prior fused into a per-pixel sky probability."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .camera import FisheyeFrame


class NoThresholdError(ValueError):
    """Raised when an image has fewer than two distinct intensities."""


@dataclass(frozen=True)
class SkyConfig:
    center: tuple[float, float]
    eta: float = 0.3
    blur_window: int = 3
    # None keeps the literal prior exp(-2|u-c|/|Pi|) with |Pi| the pixel count;
    # a length in pixels switches to the normalised variant exp(-2|u-c|/loc_scale)
    loc_scale: float | None = None

    def __post_init__(self):
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if self.blur_window < 3 or self.blur_window % 2 == 0:
            raise ValueError("blur_window must be odd and >= 3")
        if self.loc_scale is not None and self.loc_scale <= 0:
            raise ValueError("loc_scale must be positive")


@dataclass
class SkyMask:
    probability: np.ndarray
    is_sky: np.ndarray
    otsu_threshold: float
    gradient: np.ndarray | None = None

    def sample(self, u) -> float:
        """Nearest-neighbour lookup of the sky probability; 0 outside the image."""
        H, W = self.probability.shape
        x, y = int(np.rint(u[0])), int(np.rint(u[1]))
        if 0 <= x < W and 0 <= y < H:
            return float(self.probability[y, x])
        return 0.0


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        # ITU-R 601 luma
        image = image[..., :3] @ np.array([0.299, 0.587, 0.114])
    return image


def sobel_magnitude(image) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    sx = ndimage.sobel(image, axis=1, mode="nearest")
    sy = ndimage.sobel(image, axis=0, mode="nearest")
    return np.hypot(sx, sy)


def preprocess(frame, cfg: SkyConfig, return_gradient: bool = False):
    """Grayscale + median blur. The Sobel magnitude is only a diagnostic."""
    image = frame.intensities if isinstance(frame, FisheyeFrame) else frame
    gray = to_gray(image)
    if min(gray.shape) < cfg.blur_window:
        raise ValueError("image smaller than the blur window")
    blurred = ndimage.median_filter(gray, size=cfg.blur_window, mode="nearest")
    if return_gradient:
        return blurred, sobel_magnitude(blurred)
    return blurred


def location_prior(u, cfg: SkyConfig, domain_size: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    dist = np.linalg.norm(u - np.asarray(cfg.center, dtype=float), axis=-1)
    scale = domain_size if cfg.loc_scale is None else cfg.loc_scale
    return np.exp(-2.0 * dist / scale)


def otsu_objective(values, k) -> float:
    """Weighted within-class variance with I <= k in the lower class."""
    values = np.asarray(values, dtype=float).ravel()
    lo = values[values <= k]
    hi = values[values > k]
    n = values.size
    out = 0.0
    if lo.size:
        out += lo.size / n * lo.var()
    if hi.size:
        out += hi.size / n * hi.var()
    return out


def otsu_threshold(intensities) -> float:
    """Threshold minimising the weighted within-class variance.

    Candidates are the distinct observed intensities (pixels equal to the
    candidate join the lower class). Every threshold in
    [v_i, v_{i+1}) gives the same split, so the midpoint of the optimal
    interval is returned.
    """
    values = np.asarray(intensities, dtype=float).ravel()
    if values.size == 0:
        raise NoThresholdError("empty image")
    levels, counts = np.unique(values, return_counts=True)
    if levels.size < 2:
        raise NoThresholdError("image has a single intensity level")
    centred = levels - values.mean()
    n = values.size
    c_n = np.cumsum(counts)
    c_s = np.cumsum(counts * centred)
    c_q = np.cumsum(counts * centred * centred)
    tot_s, tot_q = c_s[-1], c_q[-1]
    # splits after levels[0..L-2]; the last level would leave the upper class empty
    n_lo = c_n[:-1]
    n_hi = n - n_lo
    s_lo, q_lo = c_s[:-1], c_q[:-1]
    s_hi, q_hi = tot_s - s_lo, tot_q - q_lo
    within = (q_lo - s_lo * s_lo / n_lo) + (q_hi - s_hi * s_hi / n_hi)
    within = np.maximum(within, 0.0) / n
    best = int(np.argmin(within))
    return 0.5 * (levels[best] + levels[best + 1])


def sky_probability(frame, cfg: SkyConfig) -> SkyMask:
    blurred, grad = preprocess(frame, cfg, return_gradient=True)
    thr = otsu_threshold(blurred)
    i_min, i_max = blurred.min(), blurred.max()
    H, W = blurred.shape
    yy, xx = np.mgrid[0:H, 0:W]
    p_loc = location_prior(np.stack([xx, yy], axis=-1), cfg, float(H * W))
    p = np.exp(-np.abs(blurred - thr) / abs(i_max - i_min)) * p_loc
    return SkyMask(probability=p, is_sky=p > cfg.eta, otsu_threshold=thr, gradient=grad)
