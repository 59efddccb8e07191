"""Multi-level 3D (static) + 4D (dynamic) hash-grid encoder.

Each level owns one table of ``H`` rows with ``m_s + m_d`` scalars per row.
The static slice ``[:m_s]`` of a row is addressed by hashing a 3D lattice
corner, the dynamic slice ``[m_s:]`` by hashing a 4D (space, time) corner.
Positions and times are expected in ``[0, 1]``.

The per-level functions :func:`interp_3d` / :func:`interp_4d` are plain
numpy and return their corner lists; :meth:`HashGridSet.encode` runs the
same math fused over all levels in a numba kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .autodiff import Graph, ParameterTape, Var

PRIMES = (1, 2654435761, 805459861, 3674653429)
INIT_RANGE = 1e-4


@dataclass
class HashGridConfig:
    levels: int = 12
    table_size: int = 2 ** 19
    static_dim: int = 2
    dynamic_dim: int = 6
    spatial_base: int = 8
    spatial_scale: float = 1.45
    temporal_base: int = 2
    temporal_scale: float = 1.4
    primes: tuple = PRIMES

    def __post_init__(self):
        H = self.table_size
        if H < 1 or H & (H - 1):
            raise ValueError(f"table_size must be a power of two, got {H}")
        if self.levels < 1 or self.static_dim < 0 or self.dynamic_dim < 1:
            raise ValueError("need levels >= 1, static_dim >= 0, dynamic_dim >= 1")
        self.primes = tuple(int(p) for p in self.primes)
        if len(self.primes) != 4:
            raise ValueError("need four primes")

    @property
    def row_dim(self) -> int:
        return self.static_dim + self.dynamic_dim

    @property
    def out_dim(self) -> int:
        return self.levels * self.row_dim


def level_resolutions(cfg: HashGridConfig) -> list[tuple[int, int]]:
    """Per-level ``(spatial cells per axis, temporal cells)``.

    Both schedules use floor; the temporal factor is applied once per pair
    of levels.  The 1e-9 guards against products like ``2 * 1.4**2`` landing
    a hair under an integer they should equal.
    """
    out = []
    for lv in range(cfg.levels):
        s = math.floor(cfg.spatial_base * cfg.spatial_scale ** lv + 1e-9)
        t = math.floor(cfg.temporal_base * cfg.temporal_scale ** (lv // 2) + 1e-9)
        out.append((max(s, 1), max(t, 1)))
    return out


def hash_index(coords, H: int, primes=PRIMES) -> np.ndarray:
    """XOR of ``coords[i] * P_i`` in wrapping uint64 arithmetic, mod ``H``.

    ``coords`` has shape (..., d) with d in {3, 4}.
    """
    c = np.asarray(coords).astype(np.uint64)
    d = c.shape[-1]
    with np.errstate(over="ignore"):
        h = c[..., 0] * np.uint64(primes[0])
        for i in range(1, d):
            h = h ^ (c[..., i] * np.uint64(primes[i]))
    return (h & np.uint64(H - 1)).astype(np.int64)


def _clamp01(a):
    a = np.asarray(a, dtype=np.float64)
    bad = int(np.count_nonzero((a < 0.0) | (a > 1.0) | ~np.isfinite(a)))
    return np.clip(np.nan_to_num(a, nan=0.0), 0.0, 1.0), bad


def _cell(u, res):
    """Cell index and fractional offset; u == 1 clamps into the last cell."""
    s = u * res
    i = np.minimum(np.floor(s), res - 1).astype(np.int64)
    return i, s - i


# corner bit patterns in x-fastest order
_CORNERS3 = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.int64)


def corners_3d(x, res):
    """Lattice corners and trilinear weights for points ``x`` (N, 3)."""
    i, f = _cell(x, res)
    coords = i[:, None, :] + _CORNERS3[None]
    w = np.prod(np.where(_CORNERS3[None] == 1, f[:, None, :], 1.0 - f[:, None, :]), axis=-1)
    return coords, w


def corners_4d(x, t, sres, tres):
    """16 corners ordered (time slab 0: 8 spatial corners, time slab 1: ...)."""
    c3, w3 = corners_3d(x, sres)
    ti, tf = _cell(t, tres)
    coords = np.empty(c3.shape[:1] + (16, 4), dtype=np.int64)
    w = np.empty(c3.shape[:1] + (16,))
    for slab in (0, 1):
        coords[:, slab * 8:(slab + 1) * 8, :3] = c3
        coords[:, slab * 8:(slab + 1) * 8, 3] = (ti + slab)[:, None]
        wt = tf if slab else 1.0 - tf
        w[:, slab * 8:(slab + 1) * 8] = w3 * wt[:, None]
    return coords, w


class HashGridSet:
    """Per-level hash tables stored as tape segments ``hash.level{l}``."""

    def __init__(self, cfg: HashGridConfig, tape: ParameterTape, rng: np.random.Generator,
                 prefix: str = "hash"):
        self.cfg = cfg
        self.tape = tape
        self.prefix = prefix
        self.resolutions = level_resolutions(cfg)
        self.names = []
        for lv in range(cfg.levels):
            name = f"{prefix}.level{lv}"
            init = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(cfg.table_size, cfg.row_dim))
            tape.add(name, (cfg.table_size, cfg.row_dim), init, group="grid")
            self.names.append(name)
        self.out_of_range = 0
        self._sres = np.array([r[0] for r in self.resolutions], dtype=np.int64)
        self._tres = np.array([r[1] for r in self.resolutions], dtype=np.int64)
        self._primes = np.array(cfg.primes, dtype=np.uint64)

    def table(self, level: int) -> np.ndarray:
        return self.tape.value(self.names[level])

    def tables(self) -> np.ndarray:
        """All levels as one (L, H, F) view (segments are contiguous)."""
        first = self.tape.segments[self.names[0]]
        last = self.tape.segments[self.names[-1]]
        c = self.cfg
        return self.tape.values[first.start:last.stop].reshape(c.levels, c.table_size, c.row_dim)

    def table_grads(self, tape: ParameterTape | None = None) -> np.ndarray:
        """Gradient view matching :meth:`tables`; ``tape`` may be a worker fork."""
        tape = tape if tape is not None else self.tape
        first = tape.segments[self.names[0]]
        last = tape.segments[self.names[-1]]
        c = self.cfg
        return tape.grads[first.start:last.stop].reshape(c.levels, c.table_size, c.row_dim)

    # -- reference per-level interpolation ------------------------------
    def interp_3d(self, x, level: int):
        """Static feature at ``x`` (N, 3) plus (rows, weights) for 8 corners."""
        x, bad = _clamp01(np.atleast_2d(x))
        self.out_of_range += bad
        coords, w = corners_3d(x, self.resolutions[level][0])
        rows = hash_index(coords, self.cfg.table_size, self.cfg.primes)
        feat = np.einsum("nc,ncf->nf", w, self.table(level)[rows, :self.cfg.static_dim])
        return feat, rows, w

    def interp_4d(self, x, t, level: int):
        """Dynamic feature at (x, t) plus (rows, weights) for 16 corners."""
        x, bad = _clamp01(np.atleast_2d(x))
        t, badt = _clamp01(np.atleast_1d(t))
        self.out_of_range += bad + badt
        sres, tres = self.resolutions[level]
        coords, w = corners_4d(x, t, sres, tres)
        rows = hash_index(coords, self.cfg.table_size, self.cfg.primes)
        feat = np.einsum("nc,ncf->nf", w, self.table(level)[rows, self.cfg.static_dim:])
        return feat, rows, w

    # -- fused encoder ----------------------------------------------------
    def lookup(self, x, t) -> "GridLookup":
        """Corner rows and weights for every level (no features yet)."""
        x, bad = _clamp01(np.atleast_2d(x))
        t, badt = _clamp01(np.atleast_1d(t))
        self.out_of_range += bad + badt
        n, L = x.shape[0], self.cfg.levels
        rows3 = np.empty((L, n, 8), dtype=np.int64)
        w3 = np.empty((L, n, 8))
        rows4 = np.empty((L, n, 16), dtype=np.int64)
        w4 = np.empty((L, n, 16))
        _lookup_kernel(np.ascontiguousarray(x), np.ascontiguousarray(t), self._sres, self._tres,
                       self._primes, np.int64(self.cfg.table_size), rows3, w3, rows4, w4)
        return GridLookup(rows3, w3, rows4, w4)

    def encode_values(self, x, t, lookup: "GridLookup | None" = None) -> np.ndarray:
        lk = lookup if lookup is not None else self.lookup(x, t)
        out = np.empty((lk.n, self.cfg.out_dim))
        _gather_kernel(self.tables(), lk.rows3, lk.w3, lk.rows4, lk.w4,
                       self.cfg.static_dim, self.cfg.dynamic_dim, out)
        return out

    def encode(self, g: Graph, x, t, lookup: "GridLookup | None" = None) -> Var:
        """Feature of dim ``L * (m_s + m_d)``: per level ``[static, dynamic]``."""
        lk = lookup if lookup is not None else self.lookup(x, t)
        y = self.encode_values(x, t, lk)
        tables = [g.param(n) for n in self.names]
        cfg = self.cfg

        def bwd(gout):
            _scatter_kernel(np.ascontiguousarray(gout), lk.rows3, lk.w3, lk.rows4, lk.w4,
                            cfg.static_dim, cfg.dynamic_dim, self.table_grads(g.tape))

        return g.record(y, tables, bwd, "hash_encode")


class GridLookup:
    __slots__ = ("rows3", "w3", "rows4", "w4")

    def __init__(self, rows3, w3, rows4, w4):
        self.rows3, self.w3, self.rows4, self.w4 = rows3, w3, rows4, w4

    @property
    def n(self) -> int:
        return self.rows3.shape[1]


@numba.njit(cache=True)
def _lookup_kernel(x, t, sres, tres, primes, H, rows3, w3, rows4, w4):
    n = x.shape[0]
    L = sres.shape[0]
    mask = np.uint64(H - 1)
    for p in range(n):
        for lv in range(L):
            r = sres[lv]
            sx = x[p, 0] * r
            sy = x[p, 1] * r
            sz = x[p, 2] * r
            ix = min(np.int64(math.floor(sx)), r - 1)
            iy = min(np.int64(math.floor(sy)), r - 1)
            iz = min(np.int64(math.floor(sz)), r - 1)
            fx = sx - ix
            fy = sy - iy
            fz = sz - iz
            rt = tres[lv]
            st = t[p] * rt
            it = min(np.int64(math.floor(st)), rt - 1)
            ft = st - it
            ht0 = np.uint64(it) * primes[3]
            ht1 = np.uint64(it + 1) * primes[3]
            for c in range(8):
                bx = c & 1
                by = (c >> 1) & 1
                bz = (c >> 2) & 1
                h3 = ((np.uint64(ix + bx) * primes[0]) ^ (np.uint64(iy + by) * primes[1])
                      ^ (np.uint64(iz + bz) * primes[2]))
                w = ((fx if bx else 1.0 - fx) * (fy if by else 1.0 - fy)
                     * (fz if bz else 1.0 - fz))
                rows3[lv, p, c] = np.int64(h3 & mask)
                w3[lv, p, c] = w
                rows4[lv, p, c] = np.int64((h3 ^ ht0) & mask)
                w4[lv, p, c] = w * (1.0 - ft)
                rows4[lv, p, 8 + c] = np.int64((h3 ^ ht1) & mask)
                w4[lv, p, 8 + c] = w * ft


@numba.njit(cache=True)
def _gather_kernel(tables, rows3, w3, rows4, w4, ms, md, out):
    L, n = rows3.shape[0], rows3.shape[1]
    F = ms + md
    acc = np.zeros(F)
    for lv in range(L):
        tab = tables[lv]
        o = lv * F
        for p in range(n):
            acc[:] = 0.0
            for c in range(8):
                row = tab[rows3[lv, p, c]]
                w = w3[lv, p, c]
                for f in range(ms):
                    acc[f] += w * row[f]
            for c in range(16):
                row = tab[rows4[lv, p, c]]
                w = w4[lv, p, c]
                for f in range(ms, F):
                    acc[f] += w * row[f]
            for f in range(F):
                out[p, o + f] = acc[f]


@numba.njit(cache=True)
def _scatter_kernel(gout, rows3, w3, rows4, w4, ms, md, gtables):
    L, n = rows3.shape[0], rows3.shape[1]
    F = ms + md
    for lv in range(L):
        tab = gtables[lv]
        o = lv * F
        for p in range(n):
            for c in range(8):
                row = tab[rows3[lv, p, c]]
                w = w3[lv, p, c]
                for f in range(ms):
                    row[f] += w * gout[p, o + f]
            for c in range(16):
                row = tab[rows4[lv, p, c]]
                w = w4[lv, p, c]
                for f in range(ms, F):
                    row[f] += w * gout[p, o + f]


@numba.njit(cache=True)
def temporal_edge_loss(tables, rows4, levels, ms):
    """``sum |row(c, t_a)[ms:] - row(c, t_b)[ms:]|^2`` over samples, 8 corners, ``levels``."""
    F = tables.shape[2]
    n = rows4.shape[1]
    total = 0.0
    for k in range(levels.shape[0]):
        tab = tables[levels[k]]
        for p in range(n):
            for c in range(8):
                ra = tab[rows4[levels[k], p, c]]
                rb = tab[rows4[levels[k], p, 8 + c]]
                for f in range(ms, F):
                    d = ra[f] - rb[f]
                    total += d * d
    return total


@numba.njit(cache=True)
def temporal_edge_grad(tables, rows4, levels, ms, coef, gtables):
    """Scatter ``coef * d/dtable`` of :func:`temporal_edge_loss` into ``gtables``."""
    F = tables.shape[2]
    n = rows4.shape[1]
    for k in range(levels.shape[0]):
        tab = tables[levels[k]]
        gt = gtables[levels[k]]
        for p in range(n):
            for c in range(8):
                ia = rows4[levels[k], p, c]
                ib = rows4[levels[k], p, 8 + c]
                for f in range(ms, F):
                    d = 2.0 * coef * (tab[ia, f] - tab[ib, f])
                    gt[ia, f] += d
                    gt[ib, f] -= d
