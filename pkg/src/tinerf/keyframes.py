"""Neural feature extractor: a static MLP plus keyframe MLPs blended in time.

Level ``l`` splits [0, 1] into ``n_l`` equal slots with keyframes
``t_i = i / n_l``.  Keyframe ``i`` owns a small MLP; a query at time ``t``
in slot ``[t_i, t_{i+1}]`` evaluates the two owners and mixes them with
``dt * phi_i + (1 - dt) * phi_{i+1}``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, ParameterTape, Var
from .field import MLP, posenc, posenc_dim


def keyframe_weights(t, n: int):
    """Slot index and left weight for times ``t``.

    Returns ``(i, dt, flagged)`` with ``i = min(floor(t n), n - 1)`` and
    ``dt = (t_{i+1} - t) / (t_{i+1} - t_i)``.  Times outside [0, 1] are
    clamped and counted in ``flagged``.
    """
    if n < 1:
        raise ValueError("need at least one slot")
    t = np.asarray(t, dtype=np.float64)
    flagged = int(np.count_nonzero((t < 0.0) | (t > 1.0)))
    t = np.clip(t, 0.0, 1.0)
    i = np.minimum(np.floor(t * n), n - 1).astype(np.int64)
    dt = (i + 1) - t * n
    return i, np.clip(dt, 0.0, 1.0), flagged


@dataclass
class BankConfig:
    slots: tuple = (5, 20)
    level_dim: int = 64
    static_dim: int = 128
    embed_dim: int = 8
    x_freqs: int = 8
    z_freqs: int = 3
    use_static: bool = True

    @property
    def out_dim(self) -> int:
        return len(self.slots) * self.level_dim + (self.static_dim if self.use_static else 0)


class KeyframeBank:
    """Static MLP ``phi_s``, per-level keyframe MLPs and the frame embeddings.

    Every MLP has one hidden layer as wide as its output.  Parameters are
    named ``phi_s.*``, ``phi.{level}.{i}.*`` and ``z_t``.
    """

    def __init__(self, cfg: BankConfig, tape: ParameterTape, n_frames: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.n_frames = n_frames
        self.x_dim = posenc_dim(3, cfg.x_freqs)
        self.z_dim = posenc_dim(cfg.embed_dim, cfg.z_freqs)
        self.static = None
        if cfg.use_static:
            self.static = MLP(tape, "phi_s", [self.x_dim, cfg.static_dim, cfg.static_dim], rng)
        self.levels = []
        for lv, n in enumerate(cfg.slots):
            d = cfg.level_dim
            self.levels.append([MLP(tape, f"phi.{lv}.{i}", [self.x_dim + self.z_dim, d, d], rng)
                                for i in range(n + 1)])
        tape.add("z_t", (n_frames, cfg.embed_dim), rng.normal(0.0, 0.1, (n_frames, cfg.embed_dim)))
        self.flagged = 0

    # -- pieces -----------------------------------------------------------
    def encode_x(self, x, alpha=None) -> np.ndarray:
        return posenc(x, self.cfg.x_freqs, alpha)

    def embed(self, g: Graph, frames) -> Var:
        """Rows of ``z_t`` for integer frame ids."""
        frames = np.asarray(frames, dtype=np.int64)
        if frames.size and (frames.min() < 0 or frames.max() >= self.n_frames):
            raise IndexError(f"frame ids must lie in [0, {self.n_frames})")
        return g.take_rows(g.param("z_t"), frames)

    def static_feature(self, g: Graph, x, alpha=None) -> Var:
        return self.static(g, Graph.const(self.encode_x(x, alpha)))

    def dynamic_feature_level(self, g: Graph, level: int, inp: Var, t) -> Var:
        """Eq.-5 blend on one level; ``inp`` is the concatenated MLP input."""
        n = self.cfg.slots[level]
        i, dt, bad = keyframe_weights(t, n)
        self.flagged += bad
        parts, rows, weights = [], [], []
        for j, mlp in enumerate(self.levels[level]):
            left = np.flatnonzero(i == j)  # phi_j is phi_i for these rows
            right = np.flatnonzero(i + 1 == j)
            sel = np.concatenate([left, right])
            if sel.size == 0:
                continue
            parts.append(mlp(g, g.take_rows(inp, sel)))
            rows.append(sel)
            weights.append(np.concatenate([dt[left], 1.0 - dt[right]]))
        return g.blend_rows(parts, rows, weights, inp.value.shape[0])

    def dynamic_input(self, g: Graph, x, z: Var, alpha_x=None, alpha_z=None, ex=None) -> Var:
        if ex is None:
            ex = self.encode_x(x, alpha_x)
        return g.concat([Graph.const(ex), posenc(z, self.cfg.z_freqs, alpha_z, g=g)])

    def dynamic_feature(self, g: Graph, x, z: Var, t, alpha_x=None, alpha_z=None, ex=None) -> Var:
        """Levels concatenated in ascending order."""
        inp = self.dynamic_input(g, x, z, alpha_x, alpha_z, ex)
        feats = [self.dynamic_feature_level(g, lv, inp, t) for lv in range(len(self.levels))]
        return feats[0] if len(feats) == 1 else g.concat(feats)

    def feature(self, g: Graph, x, z: Var, t, alpha_x=None, alpha_z=None) -> tuple[Var, Var]:
        """``(v, v_d)`` with ``v = [v_s, v_d]`` (``v = v_d`` without the static MLP)."""
        ex = self.encode_x(x, alpha_x)
        vd = self.dynamic_feature(g, x, z, t, alpha_x, alpha_z, ex)
        if self.static is None:
            return vd, vd
        return g.concat([self.static(g, Graph.const(ex)), vd]), vd

    # -- evaluation at unseen times -------------------------------------
    def frame_time(self, frame) -> np.ndarray:
        return np.asarray(frame, dtype=np.float64) / max(self.n_frames - 1, 1)

    def bracket(self, t):
        """Adjacent training frames ``(a, b)`` around ``t`` and the weight of ``a``."""
        s = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) * max(self.n_frames - 1, 1)
        a = np.minimum(np.floor(s), max(self.n_frames - 2, 0)).astype(np.int64)
        b = np.minimum(a + 1, self.n_frames - 1)
        return a, b, np.clip(1.0 - (s - a), 0.0, 1.0)

    def eval_time_interpolated(self, g: Graph, x, t, a=None, b=None, alpha_x=None, alpha_z=None,
                               blend_embedding: bool = False) -> Var:
        """Feature at a time between two adjacent training frames.

        Default: blend the full features computed at ``(z_a, t_a)`` and
        ``(z_b, t_b)`` with weight ``(t_b - t) / (t_b - t_a)`` on ``a``.
        With ``blend_embedding`` the embeddings are blended instead and the
        feature is evaluated once at ``t``.
        """
        t = np.asarray(t, dtype=np.float64) * np.ones(np.asarray(x).shape[0])
        if a is None:
            a, b, wa = self.bracket(t)
        else:
            a = np.asarray(a) * np.ones_like(t, dtype=np.int64)
            b = np.asarray(b) * np.ones_like(t, dtype=np.int64)
            if np.any(np.abs(b - a) != 1):
                raise ValueError("frames a and b must be adjacent")
            ta, tb = self.frame_time(a), self.frame_time(b)
            wa = (tb - t) / (tb - ta)
        if blend_embedding:
            z = g.weighted_sum([self.embed(g, a), self.embed(g, b)], [wa, 1.0 - wa])
            return self.feature(g, x, z, t, alpha_x, alpha_z)[0]
        va = self.feature(g, x, self.embed(g, a), self.frame_time(a), alpha_x, alpha_z)[0]
        vb = self.feature(g, x, self.embed(g, b), self.frame_time(b), alpha_x, alpha_z)[0]
        return g.weighted_sum([va, vb], [wa, 1.0 - wa])
