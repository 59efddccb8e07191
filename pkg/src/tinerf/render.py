"""Rays, depth sampling, occupancy culling and the volume-rendering composite.

Samples along a batch of rays are kept *packed*: flat arrays sorted by
(ray, depth) with a ``ray`` index and a ``slot`` (position within its ray).
The composite scatters them into a padded (rays, max_slots) block so the
transmittance product is an exact per-ray cumulative sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Var, accumulate

TERMINAL_DELTA = 1e10


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.focal, 0.0, self.cx], [0.0, self.focal, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3), unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    times: np.ndarray  # (R,)
    frames: np.ndarray  # (R,) int, time-embedding index (-1 = none)
    pixels: np.ndarray  # (R,) int, flat pixel id

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "Rays":
        return Rays(*(a[idx] for a in (self.origins, self.dirs, self.near, self.far,
                                        self.times, self.frames, self.pixels)))


@dataclass
class Samples:
    positions: np.ndarray  # (n, 3) world space
    depths: np.ndarray  # (n,)
    deltas: np.ndarray  # (n,)
    ray: np.ndarray  # (n,) int
    slot: np.ndarray  # (n,) int
    n_rays: int

    def __len__(self):
        return self.depths.shape[0]

    @property
    def max_slots(self) -> int:
        return int(self.slot.max()) + 1 if len(self) else 1

    def counts(self) -> np.ndarray:
        return np.bincount(self.ray, minlength=self.n_rays)

    def select(self, keep: np.ndarray) -> "Samples":
        ray = self.ray[keep]
        return Samples(self.positions[keep], self.depths[keep], self.deltas[keep], ray,
                       _slots(ray, self.n_rays), self.n_rays)


def _slots(ray: np.ndarray, n_rays: int) -> np.ndarray:
    """Position of each sample within its ray (``ray`` must be sorted)."""
    if ray.size == 0:
        return np.zeros(0, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(np.bincount(ray, minlength=n_rays))[:-1]])
    return np.arange(ray.size) - starts[ray]


def _check_pose(c2w: np.ndarray) -> np.ndarray:
    c2w = np.asarray(c2w, dtype=np.float64)
    if c2w.shape not in ((4, 4), (3, 4)):
        raise ValueError(f"pose must be 3x4 or 4x4, got {c2w.shape}")
    R = c2w[:3, :3]
    if not np.all(np.isfinite(c2w)) or abs(np.linalg.det(R) - 1.0) > 1e-6 \
            or not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
        raise ValueError("pose is not a rigid transform (rotation block not orthonormal)")
    return c2w


def generate_rays(camera: Camera, c2w, pixels=None, t: float = 0.0, frame: int = -1,
                  near: float = 0.0, far: float = 1.0) -> Rays:
    """One ray per pixel center.

    Camera frame: x right, y up, looking down -z (the Blender/NeRF
    convention).  ``pixels`` is an (P, 2) array of integer (col, row) pairs;
    None means the full image in row-major order.
    """
    c2w = _check_pose(c2w)
    W, H = camera.width, camera.height
    if pixels is None:
        jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pixels = np.stack([ii.ravel(), jj.ravel()], axis=-1)
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    u = pixels[:, 0] + 0.5
    v = pixels[:, 1] + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.focal, -(v - camera.cy) / camera.focal,
                      -np.ones_like(u)], axis=-1)
    d = d_cam @ c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    n = d.shape[0]
    return Rays(np.broadcast_to(c2w[:3, 3], (n, 3)).copy(), d, np.full(n, near), np.full(n, far),
                np.full(n, float(t)), np.full(n, frame, dtype=np.int64),
                pixels[:, 1] * W + pixels[:, 0])


def pixel_rays(camera: Camera, c2w: np.ndarray, cols, rows) -> Rays:
    """Rays for per-ray poses ``c2w`` (n, 4, 4); poses are trusted (no rigidity check)."""
    u = np.asarray(cols) + 0.5
    v = np.asarray(rows) + 0.5
    d_cam = np.stack([(u - camera.cx) / camera.focal, -(v - camera.cy) / camera.focal,
                      -np.ones_like(u)], axis=-1)
    d = np.einsum("nij,nj->ni", c2w[:, :3, :3], d_cam)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    n = d.shape[0]
    return Rays(c2w[:, :3, 3].copy(), d, np.zeros(n), np.ones(n), np.zeros(n),
                np.full(n, -1, dtype=np.int64), np.asarray(rows) * camera.width + np.asarray(cols))


def intersect_aabb(rays: Rays, aabb) -> tuple[np.ndarray, np.ndarray]:
    """Clip ``[near, far]`` to the box; misses get ``u0 >= u1``."""
    aabb = np.asarray(aabb, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.dirs
        t0 = (aabb[0] - rays.origins) * inv
        t1 = (aabb[1] - rays.origins) * inv
    lo = np.nanmax(np.minimum(t0, t1), axis=-1)
    hi = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.maximum(lo, rays.near), np.minimum(hi, rays.far)


def _pack(rays: Rays, depths: np.ndarray, deltas: np.ndarray) -> Samples:
    R, S = depths.shape
    ray = np.repeat(np.arange(R), S)
    pos = rays.origins[ray] + depths.ravel()[:, None] * rays.dirs[ray]
    return Samples(pos, depths.ravel(), deltas.ravel(), ray, np.tile(np.arange(S), R), R)


def stratified_samples(rays: Rays, N: int, rng: np.random.Generator | None = None,
                       terminal_delta: float = TERMINAL_DELTA) -> Samples:
    """One draw per equal bin of ``[near, far]``; ``rng=None`` takes bin centers.

    Each sample's delta is the bin width, except the last which gets
    ``terminal_delta``.
    """
    if N < 1:
        raise ValueError("need N >= 1")
    R = len(rays)
    width = (rays.far - rays.near) / N
    jitter = rng.random((R, N)) if rng is not None else np.full((R, N), 0.5)
    depths = rays.near[:, None] + (np.arange(N)[None] + jitter) * width[:, None]
    deltas = np.repeat(width[:, None], N, axis=1)
    deltas[:, -1] = terminal_delta
    return _pack(rays, depths, deltas)


def bin_edges(rays: Rays, N: int) -> np.ndarray:
    return rays.near[:, None] + np.arange(N + 1)[None] * ((rays.far - rays.near) / N)[:, None]


def sample_pdf(edges: np.ndarray, weights: np.ndarray, M: int,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Inverse-transform draws from the piecewise-constant density over bins.

    Rows whose weights are all zero fall back to uniform over the bins.
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    total = w.sum(axis=-1, keepdims=True)
    dead = total[:, 0] <= 0.0
    w = np.where(dead[:, None], 1.0, w)
    total = w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((w.shape[0], 1)), np.cumsum(w, axis=-1) / total], axis=-1)
    cdf[:, -1] = 1.0
    R = w.shape[0]
    u = rng.random((R, M)) if rng is not None else np.broadcast_to((np.arange(M) + 0.5) / M, (R, M))
    out = np.empty((R, M))
    for r in range(R):
        k = np.searchsorted(cdf[r], u[r], side="right") - 1
        k = np.clip(k, 0, w.shape[1] - 1)
        lo, hi = cdf[r, k], cdf[r, k + 1]
        frac = (u[r] - lo) / np.where(hi > lo, hi - lo, 1.0)
        out[r] = edges[r, k] + np.clip(frac, 0.0, 1.0) * (edges[r, k + 1] - edges[r, k])
    return out


def importance_samples(rays: Rays, coarse: Samples, weights: np.ndarray, M: int,
                       rng: np.random.Generator | None = None,
                       terminal_delta: float = TERMINAL_DELTA) -> Samples:
    """Resample ``M`` depths per ray from the coarse weights, merge and sort.

    ``coarse`` must come from :func:`stratified_samples` on the same rays
    with ``weights`` of shape (R, N).  Deltas of the merged set are gaps to
    the next sample, with ``terminal_delta`` for the last one.
    """
    R, N = weights.shape
    fine = sample_pdf(bin_edges(rays, N), weights, M, rng)
    depths = np.sort(np.concatenate([coarse.depths.reshape(R, N), fine], axis=-1), axis=-1)
    deltas = np.concatenate([np.diff(depths, axis=-1), np.full((R, 1), terminal_delta)], axis=-1)
    return _pack(rays, depths, deltas)


def march_samples(rays: Rays, step: float, aabb, grid: "OccupancyGrid | None" = None,
                  rng: np.random.Generator | None = None) -> Samples:
    """Fixed-step samples inside the AABB, optionally culled by occupancy.

    Depths are ``near + (k + o) * step`` with a per-ray offset ``o`` drawn
    from ``rng`` (0.5 without one); only samples inside the clipped box are
    kept.
    """
    u0, u1 = intersect_aabb(rays, aabb)
    hit = u1 > u0
    R = len(rays)
    k0 = np.where(hit, np.floor((u0 - rays.near) / step), 0).astype(np.int64)
    k1 = np.where(hit, np.ceil((u1 - rays.near) / step), 0).astype(np.int64)
    count = np.maximum(k1 - k0, 0)
    off = rng.random(R) if rng is not None else np.full(R, 0.5)
    ray = np.repeat(np.arange(R), count)
    start = np.concatenate([[0], np.cumsum(count)[:-1]])
    k = k0[ray] + (np.arange(ray.size) - start[ray])
    depth = rays.near[ray] + (k + off[ray]) * step
    inside = (depth >= u0[ray]) & (depth <= u1[ray])
    ray, depth = ray[inside], depth[inside]
    pos = rays.origins[ray] + depth[:, None] * rays.dirs[ray]
    s = Samples(pos, depth, np.full(depth.shape, step), ray, _slots(ray, R), R)
    if grid is not None:
        s = grid.filter(s)
    return s


def occupancy_skip(samples: Samples, grid: "OccupancyGrid") -> Samples:
    return grid.filter(samples)


# -- compositing ----------------------------------------------------------
def _padded(samples: Samples, values: np.ndarray, S: int) -> np.ndarray:
    out = np.zeros((samples.n_rays, S) + values.shape[1:])
    out[samples.ray, samples.slot] = values
    return out


def composite_weights(sigma, samples: Samples):
    """Padded (T, alpha, w) with ``w = T * alpha``."""
    S = samples.max_slots
    tau = _padded(samples, np.asarray(sigma) * samples.deltas, S)
    alpha = -np.expm1(-tau)
    excl = np.zeros_like(tau)
    excl[:, 1:] = np.cumsum(tau, axis=1)[:, :-1]
    T = np.exp(-excl)
    return T, alpha, T * alpha, tau


def composite_np(sigma, rgb, samples: Samples, background=(0.0, 0.0, 0.0)):
    """``(rgb, depth, opacity)`` per ray, without a graph."""
    S = samples.max_slots
    _, _, w, _ = composite_weights(sigma, samples)
    c = _padded(samples, np.asarray(rgb), S)
    u = _padded(samples, samples.depths, S)
    opacity = w.sum(axis=1)
    color = (w[..., None] * c).sum(axis=1) + (1.0 - opacity)[:, None] * np.asarray(background)
    return color, (w * u).sum(axis=1), opacity


def composite(g: Graph, sigma: Var, rgb: Var, samples: Samples,
              background=(0.0, 0.0, 0.0)) -> tuple[Var, Var, Var]:
    """Differentiable composite returning ``(rgb, depth, opacity)`` Vars.

    ``alpha_k = 1 - exp(-sigma_k delta_k)``, ``T_k = prod_{j<k} (1 - alpha_j)``,
    ``C = sum T_k alpha_k c_k + (1 - opacity) * background``.
    """
    bg = np.asarray(background, dtype=np.float64)
    S = samples.max_slots
    T, alpha, w, tau = composite_weights(sigma.value, samples)
    c = _padded(samples, rgb.value, S)
    u = _padded(samples, samples.depths, S)
    opacity = w.sum(axis=1)
    color = (w[..., None] * c).sum(axis=1) + (1.0 - opacity)[:, None] * bg
    depth = (w * u).sum(axis=1)
    grads = {}

    def need(name):
        def bwd(gr):
            grads[name] = gr
            if len(grads) == 3:
                _backward()
        return bwd

    def _backward():
        gC, gD, gO = grads["color"], grads["depth"], grads["opacity"]
        s = (c * gC[:, None, :]).sum(-1) + (gO - gC @ bg)[:, None] + gD[:, None] * u
        ws = w * s
        tail = np.zeros_like(ws)
        tail[:, :-1] = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1][:, 1:]
        g_tau = T * np.exp(-tau) * s - tail
        if sigma.requires_grad:
            accumulate(sigma, g_tau[samples.ray, samples.slot] * samples.deltas)
        if rgb.requires_grad:
            accumulate(rgb, (w[..., None] * gC[:, None, :])[samples.ray, samples.slot])

    # Three outputs share one backward: each registers its upstream grad
    # (zeros when unused) and the last one to arrive runs the math.
    out_c = g.record(color, (sigma, rgb), need("color"), "composite.color")
    out_d = g.record(depth, (sigma, rgb), need("depth"), "composite.depth")
    out_o = g.record(opacity, (sigma, rgb), need("opacity"), "composite.opacity")
    for v in (out_c, out_d, out_o):
        if v.requires_grad:
            v.grad = np.zeros_like(v.value)
    return out_c, out_d, out_o


# -- occupancy ------------------------------------------------------------
class OccupancyGrid:
    """R^3 cache of decayed density samples over the scene box.

    ``cache`` holds ``density * step_size`` (the optical thickness of one
    march step, ``step_size=1`` keeps raw density).  Until the first
    :meth:`update` every cell counts as occupied.
    """

    def __init__(self, aabb, resolution: int = 64, decay: float = 0.99,
                 threshold: float = 1e-4, step_size: float = 1.0):
        self.aabb = np.asarray(aabb, dtype=np.float64)
        self.res = int(resolution)
        self.decay = decay
        self.threshold = threshold
        self.step_size = step_size
        self.cache = np.zeros(self.res ** 3)
        self.bits = np.ones(self.res ** 3, dtype=bool)
        self.updates = 0

    def cell_index(self, x) -> np.ndarray:
        u = (np.asarray(x) - self.aabb[0]) / (self.aabb[1] - self.aabb[0])
        ijk = np.clip(np.floor(u * self.res).astype(np.int64), 0, self.res - 1)
        return (ijk[..., 2] * self.res + ijk[..., 1]) * self.res + ijk[..., 0]

    def cell_centers(self, jitter: np.ndarray | None = None) -> np.ndarray:
        r = self.res
        k = np.arange(r ** 3)
        ijk = np.stack([k % r, (k // r) % r, k // (r * r)], axis=-1).astype(np.float64)
        ijk += 0.5 if jitter is None else jitter
        return self.aabb[0] + ijk / r * (self.aabb[1] - self.aabb[0])

    def update(self, density_fn, rng: np.random.Generator, cells=None) -> None:
        """``cache = max(cache * decay, density(jittered center, t ~ U[0,1]) * step)``.

        ``density_fn(x, t)`` takes world positions (n, 3) and times (n,).
        ``cells`` restricts the refresh to a subset; decay still hits those
        cells only.
        """
        n = self.res ** 3
        idx = np.arange(n) if cells is None else np.asarray(cells)
        x = self.cell_centers(rng.random((n, 3)))[idx]
        t = rng.random(idx.size)
        sigma = np.asarray(density_fn(x, t), dtype=np.float64)
        self.cache[idx] = np.maximum(self.cache[idx] * self.decay, sigma * self.step_size)
        self.bits = self.cache > self.threshold
        self.updates += 1

    def occupied(self, x) -> np.ndarray:
        return self.bits[self.cell_index(x)]

    def filter(self, samples: Samples) -> Samples:
        if self.bits.all():
            return samples
        return samples.select(self.occupied(samples.positions))

    @property
    def occupancy(self) -> float:
        return float(self.bits.mean())


def skip_bound(tau_skipped) -> np.ndarray:
    """Largest per-channel change culling can cause on a ray.

    ``tau_skipped`` is the summed optical thickness ``sum sigma_k delta_k``
    of the samples a ray dropped.  Couple the two composites through the
    same per-sample termination draws: they pick different samples only if
    the full ray stops at a dropped one, which happens with probability at
    most ``1 - exp(-tau_skipped)``.  Colors and background lie in [0, 1].
    With a fresh cache every dropped sample has ``sigma <= threshold``, so
    ``tau_skipped <= n * threshold * step``.
    """
    return -np.expm1(-np.asarray(tau_skipped, dtype=np.float64))
