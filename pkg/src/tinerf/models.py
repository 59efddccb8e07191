"""The two dynamic radiance-field representations behind one interface.

Both models expose ``render(g, rays, rng, progress)`` returning a
:class:`RenderOut` whose color Vars feed the loss, and ``smoothness(g, out)``
returning the temporal regularizer for that same batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, ParameterTape, Var
from .field import TemplateNerf, posenc, posenc_dim, sh_encode
from .hashgrid import HashGridConfig, HashGridSet, temporal_edge_grad, temporal_edge_loss
from .keyframes import BankConfig, KeyframeBank
from .render import (OccupancyGrid, Rays, Samples, composite, importance_samples,
                     march_samples, stratified_samples)


@dataclass
class GridConfig:
    hash: HashGridConfig = field(default_factory=HashGridConfig)
    width: int = 128
    depth: int = 2
    color_width: int = 128
    bottleneck: int = 15
    march_steps: int = 256
    occupancy_res: int = 64
    occupancy_decay: float = 0.99
    occupancy_threshold: float = 1e-4
    smooth_levels: int = 2  # regularize this many finest levels


@dataclass
class NeuralConfig:
    bank: BankConfig = field(default_factory=BankConfig)
    width: int = 256
    depth: int = 8
    skips: tuple = (4,)
    color_width: int = 128
    dir_freqs: int = 4
    n_coarse: int = 64
    n_fine: int = 64
    blend_embedding: bool = False


@dataclass
class RenderOut:
    colors: list  # Vars, each (R, 3); the loss sums over all of them
    depth: Var
    opacity: Var
    samples: Samples
    n_evals: int
    aux: dict = field(default_factory=dict)

    @property
    def color(self) -> Var:
        return self.colors[-1]


def normalize_points(x, aabb) -> np.ndarray:
    aabb = np.asarray(aabb, dtype=np.float64)
    return (np.asarray(x) - aabb[0]) / (aabb[1] - aabb[0])


class GridModel:
    """4D hash features -> small template NeRF, occupancy-culled marching."""

    kind = "grid"

    def __init__(self, cfg: GridConfig, tape: ParameterTape, aabb, n_frames: int,
                 rng: np.random.Generator, background=(0.0, 0.0, 0.0), near=0.0, far=1.0):
        self.cfg = cfg
        self.tape = tape
        self.aabb = np.asarray(aabb, dtype=np.float64)
        self.n_frames = n_frames
        self.background = np.asarray(background, dtype=np.float64)
        self.near, self.far = near, far
        self.grid = HashGridSet(cfg.hash, tape, rng)
        self.nerf = TemplateNerf(tape, "nerf", cfg.hash.out_dim, rng, depth=cfg.depth,
                                 width=cfg.width, bottleneck=cfg.bottleneck,
                                 color_width=cfg.color_width, dir_dim=16)
        self.occupancy = OccupancyGrid(self.aabb, cfg.occupancy_res, cfg.occupancy_decay,
                                       cfg.occupancy_threshold)
        L = cfg.hash.levels
        self.smooth_set = list(range(max(L - cfg.smooth_levels, 0), L))

    @property
    def step(self) -> float:
        return (self.far - self.near) / self.cfg.march_steps

    def sample(self, rays: Rays, rng=None, use_occupancy=True) -> Samples:
        grid = self.occupancy if use_occupancy else None
        return march_samples(rays, self.step, self.aabb, grid, rng)

    def render(self, g: Graph, rays: Rays, rng=None, progress: float = 1.0,
               use_occupancy: bool = True) -> RenderOut:
        s = self.sample(rays, rng, use_occupancy)
        t = rays.times[s.ray]
        xn = normalize_points(s.positions, self.aabb)
        lk = self.grid.lookup(xn, t)
        feat = self.grid.encode(g, xn, t, lk)
        dcode, _ = sh_encode(rays.dirs)
        rgb, sigma = self.nerf(g, feat, dcode[s.ray])
        color, depth, opacity = composite(g, sigma, rgb, s, self.background)
        return RenderOut([color], depth, opacity, s, len(s), {"lookup": lk})

    def smoothness(self, g: Graph, out: RenderOut) -> Var:
        """Squared dynamic-row differences across each touched temporal edge.

        For every sample, every one of its 8 spatial corners, and every
        level in ``smooth_set``: ``|h(corner, t_a) - h(corner, t_b)|^2 / n_f^2``
        summed over the batch.
        """
        lk = out.aux["lookup"]
        ms = self.cfg.hash.static_dim
        tables = self.grid.tables()
        scale = 1.0 / self.n_frames ** 2
        lv = np.asarray(self.smooth_set, dtype=np.int64)
        value = np.asarray(scale * temporal_edge_loss(tables, lk.rows4, lv, ms))
        params = [g.param(self.grid.names[i]) for i in self.smooth_set]

        def bwd(gr):
            temporal_edge_grad(tables, lk.rows4, lv, ms, scale * float(gr),
                               self.grid.table_grads(g.tape))

        return g.record(value, params, bwd, "smooth_grid")

    def density_np(self, x, t) -> np.ndarray:
        xn = normalize_points(x, self.aabb)
        feat = self.grid.encode_values(xn, t)
        return self.nerf.density(self.tape, feat)

    def update_occupancy(self, rng, chunk: int = 1 << 15) -> None:
        def fn(x, t):
            return np.concatenate([self.density_np(x[i:i + chunk], t[i:i + chunk])
                                   for i in range(0, len(t), chunk)] or [np.zeros(0)])
        self.occupancy.update(fn, rng)


class NeuralModel:
    """Keyframe-MLP features, coarse + fine template NeRFs sharing the bank."""

    kind = "neural"

    def __init__(self, cfg: NeuralConfig, tape: ParameterTape, aabb, n_frames: int,
                 rng: np.random.Generator, background=(0.0, 0.0, 0.0), near=0.0, far=1.0):
        self.cfg = cfg
        self.tape = tape
        self.aabb = np.asarray(aabb, dtype=np.float64)
        self.n_frames = n_frames
        self.background = np.asarray(background, dtype=np.float64)
        self.near, self.far = near, far
        self.bank = KeyframeBank(cfg.bank, tape, n_frames, rng)
        ddim = posenc_dim(3, cfg.dir_freqs)
        kw = dict(depth=cfg.depth, width=cfg.width, skips=cfg.skips,
                  color_width=cfg.color_width, dir_dim=ddim, bottleneck=cfg.width)
        self.coarse = TemplateNerf(tape, "coarse", cfg.bank.out_dim, rng, **kw)
        self.fine = TemplateNerf(tape, "fine", cfg.bank.out_dim, rng, **kw)

    def alphas(self, progress: float):
        """Window parameters for the x and z encoders (ramp over 20% of training)."""
        r = min(max(progress / 0.2, 0.0), 1.0)
        return r * self.cfg.bank.x_freqs, r * self.cfg.bank.z_freqs

    def _features(self, g: Graph, x, rays: Rays, ray_idx, progress):
        ax, az = self.alphas(progress)
        xn = normalize_points(x, self.aabb)
        frames = rays.frames[ray_idx]
        if np.all(frames >= 0):
            z = self.bank.embed(g, frames)
            return self.bank.feature(g, xn, z, rays.times[ray_idx], ax, az)
        v = self.bank.eval_time_interpolated(g, xn, rays.times[ray_idx], alpha_x=ax, alpha_z=az,
                                             blend_embedding=self.cfg.blend_embedding)
        return v, None

    def _shade(self, g, nerf, s: Samples, rays: Rays, progress):
        v, vd = self._features(g, s.positions, rays, s.ray, progress)
        dcode = posenc(rays.dirs, self.cfg.dir_freqs)[s.ray]
        rgb, sigma = nerf(g, v, dcode)
        return composite(g, sigma, rgb, s, self.background), sigma, vd

    def render(self, g: Graph, rays: Rays, rng=None, progress: float = 1.0,
               use_occupancy: bool = True) -> RenderOut:
        cfg = self.cfg
        sc = stratified_samples(rays, cfg.n_coarse, rng)
        (cc, _, _), sigma_c, vd_c = self._shade(g, self.coarse, sc, rays, progress)
        R = len(rays)
        w = _weights_np(sigma_c.value, sc, R, cfg.n_coarse)
        sf = importance_samples(rays, sc, w, cfg.n_fine, rng)
        (cf, df, of), _, _ = self._shade(g, self.fine, sf, rays, progress)
        return RenderOut([cc, cf], df, of, sf, len(sc) + len(sf), {"coarse": sc, "vd": vd_c})

    def smoothness(self, g: Graph, out: RenderOut, rays: Rays, progress: float = 1.0) -> Var:
        """Mean of ``|v_d(x, z_f, t_f) - v_d(x, z_{f+1}, t_{f+1})|^2`` over coarse samples.

        Samples whose frame is the last one have no successor and are skipped.
        """
        s = out.aux["coarse"]
        frames = rays.frames[s.ray]
        keep = np.flatnonzero((frames >= 0) & (frames < self.n_frames - 1))
        if keep.size == 0:
            return Graph.const(0.0)
        ax, az = self.alphas(progress)
        xn = normalize_points(s.positions[keep], self.aabb)
        f1 = frames[keep] + 1
        vd = out.aux.get("vd")
        if vd is not None:  # features at frame f were already built for shading
            v0 = vd if keep.size == len(s) else g.take_rows(vd, keep)
        else:
            f0 = frames[keep]
            v0 = self.bank.dynamic_feature(g, xn, self.bank.embed(g, f0), self.bank.frame_time(f0), ax, az)
        v1 = self.bank.dynamic_feature(g, xn, self.bank.embed(g, f1), self.bank.frame_time(f1), ax, az)
        return g.mean_sq_rows(g.sub(v0, v1))

    def density_np(self, x, t) -> np.ndarray:
        g = Graph(self.tape, track=False)
        xn = normalize_points(x, self.aabb)
        v = self.bank.eval_time_interpolated(g, xn, t)
        return self.fine.density(self.tape, v.value)


def _weights_np(sigma, s: Samples, R: int, N: int) -> np.ndarray:
    tau = (sigma * s.deltas).reshape(R, N)
    excl = np.concatenate([np.zeros((R, 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1)
    return np.exp(-excl) * -np.expm1(-tau)


def build_model(kind: str, cfg, tape, aabb, n_frames, rng, background=(0.0, 0.0, 0.0),
                near=0.0, far=1.0):
    if kind == "grid":
        return GridModel(cfg, tape, aabb, n_frames, rng, background, near, far)
    if kind == "neural":
        return NeuralModel(cfg, tape, aabb, n_frames, rng, background, near, far)
    raise ValueError(f"unknown representation {kind!r} (expected 'grid' or 'neural')")
