"""Input encodings and the template NeRF that maps features to (rgb, sigma)."""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Graph, ParameterTape, ShapeError, Var, accumulate

SH_C0 = 0.28209479177387814


def window_weights(n_freqs: int, alpha: float | None) -> np.ndarray:
    """Band weights ``(1 - cos(pi * clamp(alpha - k, 0, 1))) / 2``; None = all ones."""
    if alpha is None:
        return np.ones(n_freqs)
    k = np.arange(n_freqs)
    return 0.5 * (1.0 - np.cos(np.pi * np.clip(alpha - k, 0.0, 1.0)))


def posenc_dim(in_dim: int, n_freqs: int, identity: bool = True) -> int:
    return in_dim * (int(identity) + 2 * n_freqs)


def posenc(v, n_freqs: int, alpha: float | None = None, identity: bool = True,
           g: Graph | None = None):
    """Windowed positional encoding.

    Layout: ``[v, sin(2^0 pi v), cos(2^0 pi v), sin(2^1 pi v), ...]`` where
    every block is ``in_dim`` wide and band k is scaled by its window weight.
    Pass a :class:`Var` together with ``g`` to get a differentiable output.
    """
    x = v.value if isinstance(v, Var) else np.asarray(v, dtype=np.float64)
    w = window_weights(n_freqs, alpha)
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    ang = x[..., None, :] * freqs[:, None]  # (..., K, D)
    s, c = np.sin(ang), np.cos(ang)
    bands = np.stack([w[:, None] * s, w[:, None] * c], axis=-2)  # (..., K, 2, D)
    bands = bands.reshape(x.shape[:-1] + (-1,))
    out = np.concatenate([x, bands], axis=-1) if identity else bands
    if not isinstance(v, Var):
        return out
    if g is None:
        raise ValueError("posenc of a Var needs the graph")
    D = x.shape[-1]

    def bwd(gout):
        off = D if identity else 0
        gb = gout[..., off:].reshape(x.shape[:-1] + (n_freqs, 2, D))
        dx = ((gb[..., 0, :] * c - gb[..., 1, :] * s) * (w * freqs)[:, None]).sum(axis=-2)
        if identity:
            dx = dx + gout[..., :D]
        accumulate(v, dx)

    return g.record(out, (v,), bwd, "posenc")


def sh_encode(d) -> tuple[np.ndarray, int]:
    """Real spherical harmonics, degrees 0..3 (16 values per direction).

    Convention: the real basis with the Condon-Shortley phase, ordered
    l = 0..3 and m = -l..l.  Non-unit inputs are normalized; the count of
    such inputs is returned alongside the values.
    """
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    flagged = int(np.count_nonzero(np.abs(norm[..., 0] - 1.0) > 1e-6))
    d = d / np.maximum(norm, 1e-12)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (16,))
    out[..., 0] = SH_C0
    out[..., 1] = -0.48860251190291987 * y
    out[..., 2] = 0.48860251190291987 * z
    out[..., 3] = -0.48860251190291987 * x
    out[..., 4] = 1.0925484305920792 * x * y
    out[..., 5] = -1.0925484305920792 * y * z
    out[..., 6] = 0.94617469575755997 * zz - 0.31539156525251999
    out[..., 7] = -1.0925484305920792 * x * z
    out[..., 8] = 0.54627421529603959 * (xx - yy)
    out[..., 9] = 0.59004358992664352 * y * (-3.0 * xx + yy)
    out[..., 10] = 2.8906114426405538 * x * y * z
    out[..., 11] = 0.45704579946446572 * y * (1.0 - 5.0 * zz)
    out[..., 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[..., 13] = 0.45704579946446572 * x * (1.0 - 5.0 * zz)
    out[..., 14] = 1.4453057213202769 * z * (xx - yy)
    out[..., 15] = 0.59004358992664352 * x * (-xx + 3.0 * yy)
    return out, flagged


class MLP:
    """Stack of affine layers with ReLU between them (none after the last)."""

    def __init__(self, tape: ParameterTape, name: str, sizes, rng: np.random.Generator,
                 group: str = "mlp"):
        self.name = name
        self.sizes = list(sizes)
        self.layers = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            bound = math.sqrt((3.0 if last else 6.0) / a)
            wn, bn = f"{name}.layer{i}.weight", f"{name}.layer{i}.bias"
            tape.add(wn, (b, a), rng.uniform(-bound, bound, size=(b, a)), group=group)
            tape.add(bn, (b,), 0.0, group=group)
            self.layers.append((wn, bn))

    def __call__(self, g: Graph, x: Var) -> Var:
        h = x
        for i, (wn, bn) in enumerate(self.layers):
            h = g.affine(h, g.param(wn), g.param(bn))
            if i < len(self.layers) - 1:
                h = g.relu(h)
        return h

    def numpy(self, tape: ParameterTape, x: np.ndarray) -> np.ndarray:
        h = x
        for i, (wn, bn) in enumerate(self.layers):
            h = h @ tape.value(wn).T + tape.value(bn)
            if i < len(self.layers) - 1:
                h = np.maximum(h, 0.0)
        return h


def _init_affine(tape, name, a, b, rng, relu_after: bool):
    bound = math.sqrt((6.0 if relu_after else 3.0) / a)
    tape.add(f"{name}.weight", (b, a), rng.uniform(-bound, bound, size=(b, a)))
    tape.add(f"{name}.bias", (b,), 0.0)
    return f"{name}.weight", f"{name}.bias"


class TemplateNerf:
    """Trunk MLP -> softplus density + bottleneck; color head adds the view code.

    ``depth`` hidden ReLU layers of ``width`` form the trunk.  The input
    feature is re-concatenated before every trunk layer index in ``skips``.
    Density never sees the view direction.
    """

    def __init__(self, tape: ParameterTape, prefix: str, in_dim: int, rng: np.random.Generator,
                 depth: int = 2, width: int = 128, skips=(), bottleneck: int = 15,
                 color_width: int = 128, dir_dim: int = 16, density_bias: float = 0.0):
        self.prefix = prefix
        self.in_dim, self.dir_dim = in_dim, dir_dim
        self.skips = tuple(skips)
        self.trunk = []
        a = in_dim
        for i in range(depth):
            if i in self.skips:
                a += in_dim
            self.trunk.append(_init_affine(tape, f"{prefix}.trunk{i}", a, width, rng, True))
            a = width
        self.sigma_head = _init_affine(tape, f"{prefix}.sigma", a, 1, rng, False)
        tape.value(self.sigma_head[1])[:] = density_bias
        self.bottleneck = _init_affine(tape, f"{prefix}.bottleneck", a, bottleneck, rng, False)
        self.color_hidden = _init_affine(tape, f"{prefix}.color0", bottleneck + dir_dim,
                                         color_width, rng, True)
        self.color_out = _init_affine(tape, f"{prefix}.color1", color_width, 3, rng, False)

    def _trunk(self, g: Graph, v: Var) -> Var:
        h = v
        for i, (wn, bn) in enumerate(self.trunk):
            if i in self.skips:
                h = g.concat([h, v])
            h = g.relu(g.affine(h, g.param(wn), g.param(bn)))
        return h

    def __call__(self, g: Graph, v: Var, dir_code: np.ndarray) -> tuple[Var, Var]:
        """Return ``(rgb, sigma)`` with rgb in [0, 1]^3 and sigma >= 0."""
        if v.value.shape[-1] != self.in_dim:
            raise ShapeError(f"{self.prefix}: feature width {v.value.shape[-1]} != {self.in_dim}")
        if dir_code.shape[-1] != self.dir_dim:
            raise ShapeError(f"{self.prefix}: direction code width {dir_code.shape[-1]} != {self.dir_dim}")
        h = self._trunk(g, v)
        sigma_pre = g.affine(h, g.param(self.sigma_head[0]), g.param(self.sigma_head[1]))
        sigma = g.softplus(sigma_pre)
        b = g.affine(h, g.param(self.bottleneck[0]), g.param(self.bottleneck[1]))
        c = g.concat([b, Graph.const(dir_code)])
        c = g.relu(g.affine(c, g.param(self.color_hidden[0]), g.param(self.color_hidden[1])))
        rgb = g.sigmoid(g.affine(c, g.param(self.color_out[0]), g.param(self.color_out[1])))
        return rgb, _squeeze(g, sigma)

    def density(self, tape: ParameterTape, v: np.ndarray) -> np.ndarray:
        """Graph-free density, used by occupancy updates."""
        h = v
        for i, (wn, bn) in enumerate(self.trunk):
            if i in self.skips:
                h = np.concatenate([h, v], axis=-1)
            h = np.maximum(h @ tape.value(wn).T + tape.value(bn), 0.0)
        pre = h @ tape.value(self.sigma_head[0]).T + tape.value(self.sigma_head[1])
        return np.logaddexp(0.0, pre[..., 0])


def _squeeze(g: Graph, x: Var) -> Var:
    shape = x.value.shape
    return g.record(x.value[..., 0], (x,), lambda gr: accumulate(x, gr.reshape(shape)), "squeeze")
