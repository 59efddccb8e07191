"""Closed-form dynamic scenes and a reference volume renderer for them.

A scene is a list of primitives, each with its own support:

* ``Blob``: a sphere of radius ``r`` whose center follows a quadratic path
  ``c(t) = p0 + v t + a t^2``.  Density is ``sigma0 * (1 - s^2)^3`` with
  ``s = |x - c| / r`` (``hard=True`` gives a constant ``sigma0`` instead).
* ``Slab``: an axis-aligned box with a smoothly rounded density profile and
  a soft checker texture.  ``hard=True`` gives constant density and color.

Overlapping primitives add densities and mix colors by density.  The
oracle integrates along each ray piecewise between support boundaries
(midpoint rule), which makes hard primitives exact and smooth ones
second-order accurate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .render import Camera, generate_rays

# primitive rows for the numba kernel
_BLOB, _SLAB = 0, 1
_NPARAM = 16


@dataclass
class Blob:
    p0: tuple
    radius: float
    sigma0: float
    color: tuple
    v: tuple = (0.0, 0.0, 0.0)
    a: tuple = (0.0, 0.0, 0.0)
    hard: bool = False
    shade: float = 0.25  # amplitude of the smooth color variation over the ball

    def center(self, t: float) -> np.ndarray:
        return np.asarray(self.p0) + np.asarray(self.v) * t + np.asarray(self.a) * t * t

    def row(self, t: float) -> np.ndarray:
        r = np.zeros(_NPARAM)
        r[0] = _BLOB
        r[1:4] = self.center(t)
        r[4] = self.radius
        r[5] = self.sigma0
        r[6:9] = self.color
        r[9] = float(self.hard)
        r[10] = self.shade
        return r


@dataclass
class Slab:
    lo: tuple
    hi: tuple
    sigma0: float
    color_a: tuple
    color_b: tuple
    checker: float = 4.0  # checker periods per unit length
    hard: bool = False
    # optional motion of the whole box (x offset over time), used by curtains
    shift: tuple = (0.0, 0.0, 0.0)
    shift_fn: str = "none"  # "none" | "linear" | "pulse"
    pulse: tuple = (0.45, 0.55)

    def offset(self, t: float) -> np.ndarray:
        s = np.asarray(self.shift, dtype=np.float64)
        if self.shift_fn == "linear":
            return s * t
        if self.shift_fn == "pulse":
            a, b = self.pulse
            return s if a <= t <= b else np.zeros(3)
        return np.zeros(3)

    def row(self, t: float) -> np.ndarray:
        r = np.zeros(_NPARAM)
        off = self.offset(t)
        r[0] = _SLAB
        r[1:4] = np.asarray(self.lo) + off
        r[4:7] = np.asarray(self.hi) + off
        r[7] = self.sigma0
        r[8:11] = self.color_a
        r[11:14] = self.color_b
        r[14] = self.checker
        r[15] = float(self.hard)
        return r


@dataclass
class AnalyticScene:
    name: str
    primitives: list
    aabb: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    background: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def table(self, t: float) -> np.ndarray:
        if not self.primitives:
            return np.zeros((0, _NPARAM))
        return np.stack([p.row(t) for p in self.primitives])

    def density(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig, _ = _field_batch(x, self.table(t))
        return sig

    def color(self, x, t: float) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        _, col = _field_batch(x, self.table(t))
        return col


def render_oracle(scene: AnalyticScene, camera: Camera, c2w, t: float, N: int = 256,
                  near: float = 0.0, far: float = 1e3, pixels=None) -> np.ndarray:
    """RGBA image (H, W, 4) of the scene at time ``t``; alpha is the opacity.

    ``N`` sets the sample density: ``N`` samples per scene-box diagonal,
    spread over the support intervals each ray crosses.
    """
    rays = generate_rays(camera, c2w, pixels, t=t, near=near, far=far)
    aabb = np.asarray(scene.aabb, dtype=np.float64)
    density = N / float(np.linalg.norm(aabb[1] - aabb[0]))
    out = np.zeros((len(rays), 4))
    _render_kernel(rays.origins, rays.dirs, rays.near, rays.far, scene.table(t), density, out)
    out[:, :3] += (1.0 - out[:, 3:4]) * np.asarray(scene.background)
    if pixels is not None:
        return out
    return out.reshape(camera.height, camera.width, 4)


def render_oracle_checked(scene, camera, c2w, t, N=256, tol=1e-3, max_N=8192, **kw):
    """Double ``N`` until the image changes by less than ``tol``; returns (img, N)."""
    img = render_oracle(scene, camera, c2w, t, N, **kw)
    while True:
        img2 = render_oracle(scene, camera, c2w, t, 2 * N, **kw)
        if np.max(np.abs(img2 - img)) < tol:
            return img2, 2 * N
        if 2 * N >= max_N:
            raise RuntimeError(f"oracle did not converge by N={max_N}")
        img, N = img2, 2 * N


# -- closed-form fields (numba) ----------------------------------------------
@numba.njit(cache=True)
def _bump(u):
    # C2 plateau: 1 for |u| <= 0.6, smooth to 0 at |u| = 1
    a = abs(u)
    if a >= 1.0:
        return 0.0
    if a <= 0.6:
        return 1.0
    s = (a - 0.6) / 0.4
    return 1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


@numba.njit(cache=True)
def _prim_eval(pr, x0, x1, x2):
    """(sigma, r, g, b) of one primitive at a point."""
    if pr[0] == 0.0:
        dx, dy, dz = x0 - pr[1], x1 - pr[2], x2 - pr[3]
        s2 = (dx * dx + dy * dy + dz * dz) / (pr[4] * pr[4])
        if s2 >= 1.0:
            return 0.0, 0.0, 0.0, 0.0
        if pr[9] > 0.5:
            return pr[5], pr[6], pr[7], pr[8]
        q = 1.0 - s2
        sig = pr[5] * q * q * q
        m = 1.0 + pr[10] * (dz / pr[4])
        return sig, min(max(pr[6] * m, 0.0), 1.0), min(max(pr[7] * m, 0.0), 1.0), \
            min(max(pr[8] * m, 0.0), 1.0)
    lo0, lo1, lo2, hi0, hi1, hi2 = pr[1], pr[2], pr[3], pr[4], pr[5], pr[6]
    if x0 <= lo0 or x0 >= hi0 or x1 <= lo1 or x1 >= hi1 or x2 <= lo2 or x2 >= hi2:
        return 0.0, 0.0, 0.0, 0.0
    if pr[15] > 0.5:
        return pr[7], pr[8], pr[9], pr[10]
    u0 = (2.0 * x0 - lo0 - hi0) / (hi0 - lo0)
    u1 = (2.0 * x1 - lo1 - hi1) / (hi1 - lo1)
    u2 = (2.0 * x2 - lo2 - hi2) / (hi2 - lo2)
    sig = pr[7] * _bump(u0) * _bump(u1) * _bump(u2)
    k = pr[14] * math.pi
    m = 0.5 + 0.5 * math.tanh(3.0 * math.sin(k * x0) * math.sin(k * x1) * math.sin(k * x2 + 0.5))
    return sig, pr[8] + m * (pr[11] - pr[8]), pr[9] + m * (pr[12] - pr[9]), pr[10] + m * (pr[13] - pr[10])


@numba.njit(cache=True)
def _field_at(table, x0, x1, x2):
    sig = 0.0
    r = 0.0
    g = 0.0
    b = 0.0
    for k in range(table.shape[0]):
        s, cr, cg, cb = _prim_eval(table[k], x0, x1, x2)
        sig += s
        r += s * cr
        g += s * cg
        b += s * cb
    if sig > 0.0:
        return sig, r / sig, g / sig, b / sig
    return 0.0, 0.0, 0.0, 0.0


@numba.njit(cache=True)
def _field_batch(x, table):
    n = x.shape[0]
    sig = np.zeros(n)
    col = np.zeros((n, 3))
    for i in range(n):
        s, r, g, b = _field_at(table, x[i, 0], x[i, 1], x[i, 2])
        sig[i] = s
        col[i, 0] = r
        col[i, 1] = g
        col[i, 2] = b
    return sig, col


@numba.njit(cache=True)
def _support(pr, o, d):
    """Entry/exit depths of a primitive's support along a ray (enter > exit: miss)."""
    if pr[0] == 0.0:
        oc0, oc1, oc2 = o[0] - pr[1], o[1] - pr[2], o[2] - pr[3]
        bb = oc0 * d[0] + oc1 * d[1] + oc2 * d[2]
        cc = oc0 * oc0 + oc1 * oc1 + oc2 * oc2 - pr[4] * pr[4]
        disc = bb * bb - cc
        if disc <= 0.0:
            return 1.0, 0.0
        sq = math.sqrt(disc)
        return -bb - sq, -bb + sq
    t0 = -1e30
    t1 = 1e30
    for ax in range(3):
        lo = pr[1 + ax]
        hi = pr[4 + ax]
        if d[ax] == 0.0:
            if o[ax] <= lo or o[ax] >= hi:
                return 1.0, 0.0
            continue
        a = (lo - o[ax]) / d[ax]
        b = (hi - o[ax]) / d[ax]
        if a > b:
            a, b = b, a
        t0 = max(t0, a)
        t1 = min(t1, b)
    return t0, t1


@numba.njit(cache=True)
def _render_kernel(origins, dirs, near, far, table, density, out):
    P = table.shape[0]
    bps = np.empty(2 * P + 2)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        nb = 0
        bps[nb] = near[r]
        nb += 1
        bps[nb] = far[r]
        nb += 1
        for k in range(P):
            a, b = _support(table[k], o, d)
            if b > a:
                bps[nb] = min(max(a, near[r]), far[r])
                bps[nb + 1] = min(max(b, near[r]), far[r])
                nb += 2
        br = np.sort(bps[:nb])
        T = 1.0
        cr = 0.0
        cg = 0.0
        cb = 0.0
        for j in range(nb - 1):
            u0 = br[j]
            u1 = br[j + 1]
            length = u1 - u0
            if length <= 0.0:
                continue
            # skip gaps covered by no support
            um = 0.5 * (u0 + u1)
            inside = False
            for k in range(P):
                a, b = _support(table[k], o, d)
                if a < um < b:
                    inside = True
                    break
            if not inside:
                continue
            n = max(1, int(math.ceil(length * density)))
            h = length / n
            for i in range(n):
                u = u0 + (i + 0.5) * h
                s, r_, g_, b_ = _field_at(table, o[0] + u * d[0], o[1] + u * d[1], o[2] + u * d[2])
                if s <= 0.0:
                    continue
                a_ = 1.0 - math.exp(-s * h)
                w = T * a_
                cr += w * r_
                cg += w * g_
                cb += w * b_
                T *= 1.0 - a_
        out[r, 0] = cr
        out[r, 1] = cg
        out[r, 2] = cb
        out[r, 3] = 1.0 - T


# -- built-in scenes -----------------------------------------------------------
def blob_bounce() -> AnalyticScene:
    """Emissive ball on a parabolic hop over a static checkered slab."""
    slab = Slab((-0.9, -0.9, -0.75), (0.9, 0.9, -0.45), sigma0=30.0,
                color_a=(0.85, 0.85, 0.8), color_b=(0.15, 0.25, 0.55), checker=2.0)
    # x: -0.45 -> 0.45, z: -0.1 at the ends, peak +0.5 at t = 0.5
    ball = Blob(p0=(-0.45, 0.0, -0.1), radius=0.3, sigma0=40.0, color=(0.95, 0.45, 0.1),
                v=(0.9, 0.0, 2.4), a=(0.0, 0.0, -2.4))
    return AnalyticScene("blob-bounce", [slab, ball])


def split_merge() -> AnalyticScene:
    """Two balls that meet at the center at t = 0.5 and separate again."""
    left = Blob(p0=(-0.55, 0.0, 0.0), radius=0.28, sigma0=40.0, color=(0.2, 0.8, 0.3),
                v=(2.2, 0.0, 0.0), a=(-2.2, 0.0, 0.0))
    right = Blob(p0=(0.55, 0.0, 0.0), radius=0.28, sigma0=40.0, color=(0.3, 0.3, 0.95),
                 v=(-2.2, 0.0, 0.0), a=(2.2, 0.0, 0.0))
    floor = Slab((-0.9, -0.9, -0.75), (0.9, 0.9, -0.45), sigma0=30.0,
                 color_a=(0.8, 0.8, 0.8), color_b=(0.3, 0.3, 0.3), checker=2.0)
    return AnalyticScene("split-merge", [floor, left, right])


def curtain() -> AnalyticScene:
    """Textured back wall, mostly hidden behind a curtain that opens briefly.

    The curtain covers the left part of the wall and slides aside only for
    ``t`` in ``[0.47, 0.53]``; a ball swings in front of the wall throughout.
    """
    wall = Slab((-0.9, 0.45, -0.9), (0.9, 0.75, 0.9), sigma0=30.0,
                color_a=(0.9, 0.8, 0.3), color_b=(0.2, 0.5, 0.3), checker=3.0)
    cur = Slab((-0.95, 0.05, -0.95), (0.05, 0.3, 0.95), sigma0=30.0,
               color_a=(0.55, 0.1, 0.1), color_b=(0.6, 0.15, 0.15), checker=1.0,
               shift=(0.9, 0.0, 0.0), shift_fn="pulse", pulse=(0.47, 0.53))
    ball = Blob(p0=(0.5, -0.4, -0.3), radius=0.25, sigma0=40.0, color=(0.2, 0.6, 0.9),
                v=(0.0, 0.0, 1.2), a=(0.0, 0.0, -1.2))
    return AnalyticScene("curtain", [wall, cur, ball])


SCENES = {"blob-bounce": blob_bounce, "split-merge": split_merge, "curtain": curtain}


def get_scene(name: str) -> AnalyticScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; known: {sorted(SCENES)}") from None
