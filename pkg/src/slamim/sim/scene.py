"""World-anchored building facades and a ray-casting fish-eye renderer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..camera import CameraIntrinsics, pixel_grid, unproject
from ..core import euler_to_rotation

SKY_LEVEL = 215.0
SKY_SWING = 20.0
GROUND_LEVEL = 25.0
WALL_RANGE = (30.0, 150.0)


@dataclass(frozen=True)
class Wall:
    """Vertical textured rectangle above the 2-D segment p0 -> p1 (local ENU)."""

    p0: tuple
    p1: tuple
    height: float
    base: float = 90.0
    amp: float = 35.0
    phase: float = 0.0
    bottom: float = -3.0

    def __post_init__(self):
        lo, hi = WALL_RANGE
        if not (lo + self.amp <= self.base <= hi - self.amp):
            raise ValueError("wall texture must stay inside the facade intensity range")
        if self.height <= self.bottom:
            raise ValueError("wall top must lie above its bottom")


@dataclass
class Scene:
    walls: list

    def __post_init__(self):
        w = self.walls
        self._p0 = np.array([x.p0 for x in w], dtype=float).reshape(-1, 2)
        self._e = np.array([np.subtract(x.p1, x.p0) for x in w], dtype=float).reshape(-1, 2)
        self._len = np.linalg.norm(self._e, axis=1)
        self._top = np.array([x.height for x in w], dtype=float)
        self._bot = np.array([x.bottom for x in w], dtype=float)
        self._base = np.array([x.base for x in w], dtype=float)
        self._amp = np.array([x.amp for x in w], dtype=float)
        self._phase = np.array([x.phase for x in w], dtype=float)

    def intersect(self, origin, dirs):
        """Nearest facade hit for unit rays ``dirs`` (P, 3) from ``origin`` (ENU).

        Returns (distance, wall index, along-wall coordinate, height); distance
        is inf where nothing is hit.
        """
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        P = len(dirs)
        dist = np.full(P, np.inf)
        widx = np.full(P, -1)
        s_out = np.zeros(P)
        z_out = np.zeros(P)
        if not self.walls:
            return dist, widx, s_out, z_out
        o = np.asarray(origin, dtype=float)
        dx, dy = dirs[:, 0:1], dirs[:, 1:2]
        ex, ey = self._e[None, :, 0], self._e[None, :, 1]
        qx = self._p0[None, :, 0] - o[0]
        qy = self._p0[None, :, 1] - o[1]
        den = dx * ey - dy * ex
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (qx * ey - qy * ex) / den
            s = (qx * dy - qy * dx) / den
        z = o[2] + t * dirs[:, 2:3]
        ok = (np.abs(den) > 1e-12) & (t > 1e-6) & (s >= 0) & (s <= 1) & (z >= self._bot) & (z <= self._top)
        t = np.where(ok, t, np.inf)
        j = np.argmin(t, axis=1)
        dist = t[np.arange(P), j]
        hit = np.isfinite(dist)
        widx = np.where(hit, j, -1)
        s_out = np.where(hit, s[np.arange(P), j] * self._len[j], 0.0)
        z_out = np.where(hit, z[np.arange(P), j], 0.0)
        return dist, widx, s_out, z_out

    def texture(self, widx, s, z, footprint=None):
        """Smooth facade texture.

        ``footprint`` (m per pixel along the facade, per point) applies a
        Gaussian prefilter to each sinusoid so that components finer than the
        pixel grid fade out instead of aliasing.
        """
        ph = self._phase[widx]
        if footprint is None:
            att1 = att2 = 1.0
        else:
            fp = np.asarray(footprint, dtype=float)
            att1 = np.exp(-0.5 * (2 * np.pi * fp / 6.0) ** 2)
            att2 = np.exp(-0.5 * (2 * np.pi * fp / 9.0) ** 2)
        tex = (0.6 * att1 * np.sin(2 * np.pi * s / 7.0 + ph) * np.cos(2 * np.pi * z / 6.0 + 0.5 * ph)
               + 0.4 * att2 * np.sin(2 * np.pi * (s + 0.7 * z) / 9.0 + 2.0 * ph))
        return self._base[widx] + self._amp[widx] * tex

    def footprint(self, widx, dirs, dist, pixel_angle):
        """Facade length covered by one pixel, growing at grazing incidence."""
        e = self._e[widx] / self._len[widx, None]
        normal = np.column_stack([e[:, 1], -e[:, 0], np.zeros(len(e))])
        cos_inc = np.abs(np.sum(normal * dirs, axis=1))
        return dist * pixel_angle / np.maximum(cos_inc, 0.05)

    def occluded(self, origin, direction) -> bool:
        d, *_ = self.intersect(origin, np.asarray(direction, float)[None, :])
        return bool(np.isfinite(d[0]))


@dataclass
class Rendered:
    intensities: np.ndarray
    inverse_depth: np.ndarray
    sky: np.ndarray


class Renderer:
    """Upward fish-eye camera rendering of a :class:`Scene`.

    Rays come from the camera's own unified-model inverse, so rendered frames
    and the estimator share one geometry.
    """

    def __init__(self, scene: Scene, intr: CameraIntrinsics, antialias: bool = False):
        self.scene = scene
        self.intr = intr
        self.antialias = antialias
        uv = pixel_grid(intr.shape)
        self.rays = unproject(uv, np.ones(len(uv)), intr)          # unit vectors
        self.rays /= np.linalg.norm(self.rays, axis=1, keepdims=True)
        # angular pixel size from the spacing of neighbouring rays
        nb = unproject(uv + [1.0, 0.0], np.ones(len(uv)), intr)
        nb /= np.linalg.norm(nb, axis=1, keepdims=True)
        self.pixel_angle = np.arccos(np.clip(np.sum(self.rays * nb, axis=1), -1.0, 1.0))

    def render(self, cam_enu, att) -> Rendered:
        H, W = self.intr.shape
        dirs = self.rays @ euler_to_rotation(att).T
        dist, widx, s, z = self.scene.intersect(cam_enu, dirs)
        hit = np.isfinite(dist)
        up = dirs[:, 2]
        sky = ~hit & (up > 0)
        img = np.full(len(dirs), GROUND_LEVEL)
        img[sky] = SKY_LEVEL + SKY_SWING * up[sky]
        if hit.any():
            fp = None
            if self.antialias:
                fp = self.scene.footprint(widx[hit], dirs[hit], dist[hit], self.pixel_angle[hit])
            img[hit] = self.scene.texture(widx[hit], s[hit], z[hit], fp)
        inv = np.full(len(dirs), np.nan)
        inv[hit] = 1.0 / dist[hit]
        return Rendered(img.reshape(H, W), inv.reshape(H, W), sky.reshape(H, W))


def canyon_walls(x_start, x_end, half_width, heights, rng, base_range=(70.0, 110.0)):
    """Two facade rows along the east axis at north = +/- half_width."""
    walls = []
    for side in (1.0, -1.0):
        x = x_start
        while x < x_end:
            length = float(rng.uniform(18.0, 26.0))
            x1 = min(x + length, x_end)
            h = float(rng.uniform(*heights))
            base = float(rng.uniform(*base_range))
            walls.append(Wall((x, side * half_width), (x1, side * half_width), h, base=base,
                              amp=35.0, phase=float(rng.uniform(0, 2 * np.pi))))
            x = x1
    return walls


def plaza_walls(center, radius, heights, rng, segments=24, base_range=(70.0, 110.0)):
    """Closed ring of facades around ``center``: the sky is a disk in the image."""
    walls = []
    ang = np.linspace(0.0, 2 * np.pi, segments + 1)
    cx, cy = center
    for a0, a1 in zip(ang[:-1], ang[1:]):
        p0 = (cx + radius * np.cos(a0), cy + radius * np.sin(a0))
        p1 = (cx + radius * np.cos(a1), cy + radius * np.sin(a1))
        walls.append(Wall(p0, p1, float(rng.uniform(*heights)), base=float(rng.uniform(*base_range)),
                          amp=35.0, phase=float(rng.uniform(0, 2 * np.pi))))
    return walls
