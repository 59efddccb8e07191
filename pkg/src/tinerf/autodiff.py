"""Reverse-mode differentiation over a flat parameter store.

Every trainable scalar (MLP weights, hash-table entries, time embeddings)
lives in one float64 array owned by a :class:`ParameterTape`.  A
:class:`Graph` is built per minibatch (define-by-run); each op records a
closure that pushes the upstream gradient to its inputs.  Parameter leaves
write straight into ``tape.grads`` so sparse ops (hash scatter) never
materialize a dense temporary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

CHECKPOINT_MAGIC = b"TINERF-CKPT 1\n"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    shape: tuple
    group: str = "mlp"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.start + self.size


class ParameterTape:
    """Flat store of trainable scalars with a matching gradient array.

    Segments are named contiguous regions, allocated in order and never
    freed.  ``value(name)`` and ``grad(name)`` return reshaped views, so
    callers must re-fetch them after a new segment is added (the backing
    arrays are reallocated on growth).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.values = np.zeros(0, dtype=self.dtype)
        self.grads = np.zeros(0, dtype=self.dtype)
        self.segments: dict[str, Segment] = {}

    def __len__(self) -> int:
        return self.values.size

    def add(self, name: str, shape, init: np.ndarray | float | None = None,
            group: str = "mlp") -> Segment:
        if name in self.segments:
            raise KeyError(f"segment {name!r} already exists")
        shape = tuple(int(s) for s in np.atleast_1d(shape))
        seg = Segment(name, self.values.size, shape, group)
        block = np.zeros(seg.size, dtype=self.dtype)
        if init is not None:
            block[:] = np.broadcast_to(np.asarray(init, dtype=self.dtype), shape).ravel()
        self.values = np.concatenate([self.values, block])
        self.grads = np.concatenate([self.grads, np.zeros(seg.size, dtype=self.dtype)])
        self.segments[name] = seg
        return seg

    def value(self, name: str) -> np.ndarray:
        s = self.segments[name]
        return self.values[s.start:s.stop].reshape(s.shape)

    def grad(self, name: str) -> np.ndarray:
        s = self.segments[name]
        return self.grads[s.start:s.stop].reshape(s.shape)

    def zero_grads(self) -> None:
        self.grads[:] = 0.0

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for s in self.segments.values():
            if s.group == group:
                mask[s.start:s.stop] = True
        return mask

    def check(self) -> None:
        assert self.values.shape == self.grads.shape
        spans = sorted((s.start, s.stop) for s in self.segments.values())
        prev = 0
        for a, b in spans:
            assert a >= prev and b <= self.values.size, "overlapping or out-of-range segment"
            prev = b

    # -- worker tapes -----------------------------------------------------
    def fork(self) -> "ParameterTape":
        """Worker tape: shares ``values`` (read-only use), owns its grads."""
        w = ParameterTape.__new__(ParameterTape)
        w.dtype = self.dtype
        w.values = self.values
        w.grads = np.zeros_like(self.grads)
        w.segments = self.segments
        return w

    def reduce(self, workers: Sequence["ParameterTape"]) -> None:
        # fixed summation order keeps the reduction deterministic
        for w in workers:
            self.grads += w.grads

    # -- checkpoint I/O ---------------------------------------------------
    def save(self, path, meta: dict | None = None) -> None:
        """Write ``magic, json header line, raw little-endian float64 values``."""
        header = {
            "segments": [[s.name, s.start, list(s.shape), s.group] for s in self.segments.values()],
            "count": int(self.values.size),
            "meta": meta or {},
        }
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            f.write(self.values.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParameterTape", dict]:
        data = Path(path).read_bytes()
        if not data.startswith(CHECKPOINT_MAGIC):
            raise ValueError(f"{path}: not a checkpoint file")
        rest = data[len(CHECKPOINT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        values = np.frombuffer(rest[nl + 1:], dtype="<f8")
        if values.size != header["count"]:
            raise ValueError(f"{path}: truncated checkpoint ({values.size} of {header['count']} values)")
        tape = cls()
        tape.values = values.astype(np.float64).copy()
        tape.grads = np.zeros_like(tape.values)
        for name, start, shape, group in header["segments"]:
            tape.segments[name] = Segment(name, start, tuple(shape), group)
        tape.check()
        return tape, header["meta"]


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name})"


class Graph:
    """Records ops in creation order; creation order is a topological order."""

    def __init__(self, tape: ParameterTape, track: bool = True):
        self.tape = tape
        self.track = track  # False: forward only, nothing is recorded
        self._nodes: list[tuple[Var, tuple, Callable]] = []
        self._params: dict[str, Var] = {}

    # -- leaves -----------------------------------------------------------
    def param(self, name: str) -> Var:
        v = self._params.get(name)
        if v is None:
            v = Var(self.tape.value(name), requires_grad=self.track, name=name)
            if self.track:
                v.grad = self.tape.grad(name)  # accumulate in place
            self._params[name] = v
        return v

    @staticmethod
    def const(x) -> Var:
        return Var(np.asarray(x, dtype=np.float64))

    def record(self, value, inputs: Sequence[Var], backward: Callable, name=None) -> Var:
        """Register a custom op.  ``backward(g)`` must call :func:`accumulate`."""
        out = Var(value, requires_grad=any(v.requires_grad for v in inputs), name=name)
        if out.requires_grad:
            self._nodes.append((out, tuple(inputs), backward))
        return out

    # -- reverse sweep ----------------------------------------------------
    def backward(self, loss: Var, seed: float = 1.0) -> None:
        if np.ndim(loss.value) != 0 and np.size(loss.value) != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {np.shape(loss.value)}")
        if not loss.requires_grad:
            return
        loss.grad = np.full(np.shape(loss.value), seed, dtype=np.float64)
        for out, _, bwd in reversed(self._nodes):
            if out.grad is not None:
                bwd(out.grad)
        self._nodes.clear()

    # -- elementary ops ---------------------------------------------------
    def affine(self, x: Var, W: Var, b: Var | None = None) -> Var:
        """``out[..., j] = sum_k W[j, k] x[..., k] + b[j]``; W is (out, in)."""
        if W.value.ndim != 2 or x.value.shape[-1] != W.value.shape[1]:
            raise ShapeError(f"affine: input {x.value.shape} vs weight {W.value.shape}")
        if b is not None and b.value.shape != (W.value.shape[0],):
            raise ShapeError(f"affine: bias {b.value.shape} vs weight {W.value.shape}")
        y = x.value @ W.value.T
        if b is not None:
            y = y + b.value

        def bwd(g):
            if x.requires_grad:
                accumulate(x, g @ W.value, owned=True)
            if W.requires_grad:
                x2 = x.value.reshape(-1, x.value.shape[-1])
                accumulate(W, g.reshape(-1, g.shape[-1]).T @ x2, owned=True)
            if b is not None and b.requires_grad:
                accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0), owned=True)

        return self.record(y, (x, W) if b is None else (x, W, b), bwd, "affine")

    def relu(self, x: Var) -> Var:
        y = np.maximum(x.value, 0.0)  # subgradient at 0 is 0
        return self.record(y, (x,), lambda g: accumulate(x, g * (y > 0.0), owned=True), "relu")

    def sigmoid(self, x: Var) -> Var:
        y = _sigmoid(x.value)
        return self.record(y, (x,), lambda g: accumulate(x, g * y * (1.0 - y), owned=True), "sigmoid")

    def softplus(self, x: Var) -> Var:
        y = np.logaddexp(0.0, x.value)
        return self.record(y, (x,), lambda g: accumulate(x, g * _sigmoid(x.value), owned=True), "softplus")

    def exp_neg(self, x: Var) -> Var:
        y = np.exp(-x.value)
        return self.record(y, (x,), lambda g: accumulate(x, -g * y, owned=True), "exp_neg")

    def concat(self, xs: Sequence[Var]) -> Var:
        xs = tuple(xs)
        widths = [v.value.shape[-1] for v in xs]
        y = np.concatenate([v.value for v in xs], axis=-1)

        def bwd(g):
            o = 0
            for v, w in zip(xs, widths):
                if v.requires_grad:
                    accumulate(v, g[..., o:o + w])
                o += w

        return self.record(y, xs, bwd, "concat")

    def slice(self, x: Var, start: int, stop: int) -> Var:
        y = x.value[..., start:stop]

        def bwd(g):
            full = np.zeros_like(x.value)
            full[..., start:stop] = g
            accumulate(x, full)

        return self.record(y, (x,), bwd, "slice")

    def weighted_sum(self, xs: Sequence[Var], weights: Sequence) -> Var:
        """``sum_i w_i * x_i`` with constant weights broadcast over rows."""
        xs = tuple(xs)
        ws = [np.asarray(w, dtype=np.float64) for w in weights]
        ws = [w[..., None] if w.ndim == 1 and xs[0].value.ndim == 2 else w for w in ws]
        y = sum(w * v.value for w, v in zip(ws, xs))

        def bwd(g):
            for w, v in zip(ws, xs):
                if v.requires_grad:
                    accumulate(v, _unbroadcast(g * w, v.value.shape))

        return self.record(y, xs, bwd, "weighted_sum")

    def add(self, a: Var, b: Var) -> Var:
        def bwd(g):
            if a.requires_grad:
                accumulate(a, _unbroadcast(g, a.value.shape))
            if b.requires_grad:
                accumulate(b, _unbroadcast(g, b.value.shape))
        return self.record(a.value + b.value, (a, b), bwd, "add")

    def sub(self, a: Var, b: Var) -> Var:
        def bwd(g):
            if a.requires_grad:
                accumulate(a, _unbroadcast(g, a.value.shape))
            if b.requires_grad:
                accumulate(b, _unbroadcast(-g, b.value.shape))
        return self.record(a.value - b.value, (a, b), bwd, "sub")

    def mul(self, a: Var, b: Var) -> Var:
        def bwd(g):
            if a.requires_grad:
                accumulate(a, _unbroadcast(g * b.value, a.value.shape))
            if b.requires_grad:
                accumulate(b, _unbroadcast(g * a.value, b.value.shape))
        return self.record(a.value * b.value, (a, b), bwd, "mul")

    def scale(self, x: Var, c: float) -> Var:
        return self.record(x.value * c, (x,), lambda g: accumulate(x, g * c), "scale")

    def sum(self, x: Var) -> Var:
        return self.record(np.asarray(x.value.sum()), (x,),
                           lambda g: accumulate(x, np.broadcast_to(g, x.value.shape)), "sum")

    def mean_sq_rows(self, x: Var) -> Var:
        """Mean over rows of the per-row squared norm (rows = leading axis)."""
        n = x.value.shape[0] if x.value.ndim > 1 else 1
        if x.value.size == 0:
            raise ShapeError("mean_sq_rows of an empty batch")
        y = np.asarray((x.value ** 2).sum() / n)
        return self.record(y, (x,), lambda g: accumulate(x, (2.0 * g / n) * x.value), "mean_sq_rows")

    def mse(self, pred: Var, target) -> Var:
        """Reduce-MSE: mean over rows of the summed squared error."""
        tgt = target.value if isinstance(target, Var) else np.asarray(target, dtype=np.float64)
        if pred.value.shape != tgt.shape:
            raise ShapeError(f"mse: {pred.value.shape} vs {tgt.shape}")
        if pred.value.size == 0:
            raise ShapeError("mse of an empty batch")
        n = pred.value.shape[0] if pred.value.ndim > 1 else 1
        diff = pred.value - tgt
        y = np.asarray((diff ** 2).sum() / n)

        def bwd(g):
            accumulate(pred, (2.0 * g / n) * diff)
            if isinstance(target, Var) and target.requires_grad:
                accumulate(target, (-2.0 * g / n) * diff)

        inputs = (pred, target) if isinstance(target, Var) else (pred,)
        return self.record(y, inputs, bwd, "mse")

    def take_rows(self, x: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)

        def bwd(g):
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            scatter_add_rows(x.grad, idx, g)

        return self.record(x.value[idx], (x,), bwd, "take_rows")

    def gather(self, table: Var, idx, weights) -> Var:
        """Gather-with-weights: ``out[n] = sum_c w[n, c] * table[idx[n, c]]``."""
        idx = np.asarray(idx, dtype=np.int64)
        w = np.asarray(weights, dtype=np.float64)
        y = np.einsum("nc,ncf->nf", w, table.value[idx])

        def bwd(g):
            if table.grad is None:
                table.grad = np.zeros_like(table.value)
            np.add.at(table.grad, idx, w[..., None] * g[:, None, :])

        return self.record(y, (table,), bwd, "gather")

    def blend_rows(self, parts: Sequence[Var], rows: Sequence, weights: Sequence, n: int) -> Var:
        """``out[rows_k[r]] += weights_k[r] * parts_k[r]`` over an (n, F) output."""
        parts = tuple(parts)
        rows = [np.asarray(r, dtype=np.int64) for r in rows]
        weights = [np.asarray(w, dtype=np.float64) for w in weights]
        F = parts[0].value.shape[-1]
        y = np.zeros((n, F))
        for p, r, w in zip(parts, rows, weights):
            scatter_add_rows(y, r, p.value, w)

        def bwd(g):
            for p, r, w in zip(parts, rows, weights):
                if p.requires_grad:
                    accumulate(p, w[:, None] * g[r], owned=True)

        return self.record(y, parts, bwd, "blend_rows")


def accumulate(v: Var, g, owned: bool = False) -> None:
    """Add ``g`` into ``v.grad``; ``owned`` means ``g`` is a fresh array we may keep."""
    if not v.requires_grad:
        return
    if v.grad is None:
        if owned and isinstance(g, np.ndarray) and g.dtype == np.float64 and g.shape == v.value.shape:
            v.grad = g
        else:
            v.grad = np.array(np.broadcast_to(g, v.value.shape), dtype=np.float64, copy=True)
    else:
        v.grad += g


@numba.njit(cache=True)
def _scatter_rows(out, idx, g):
    for r in range(idx.shape[0]):
        row = idx[r]
        for k in range(g.shape[1]):
            out[row, k] += g[r, k]


@numba.njit(cache=True)
def _scatter_rows_weighted(out, idx, w, p):
    for r in range(idx.shape[0]):
        row = idx[r]
        wr = w[r]
        for k in range(p.shape[1]):
            out[row, k] += wr * p[r, k]


def scatter_add_rows(out: np.ndarray, idx, g, w=None) -> None:
    """``out[idx[r]] += (w[r] *) g[r]`` for 2-D ``out``; repeated indices accumulate."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    g = np.ascontiguousarray(g, dtype=np.float64).reshape(idx.shape[0], -1)
    if w is None:
        _scatter_rows(out.reshape(out.shape[0], -1), idx, g)
    else:
        _scatter_rows_weighted(out.reshape(out.shape[0], -1), idx,
                               np.ascontiguousarray(w, dtype=np.float64), g)


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def grad_check(f: Callable[[Graph], Var], tape: ParameterTape, indices, h: float = 1e-5,
               floor: float = 0.0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    ``f`` builds the loss on a fresh graph over ``tape``.  Returns
    ``max_i |a_i - n_i| / max(|a_i| + 1e-12, floor * s)`` over ``indices``
    (flat tape positions), where ``s = max(1, max_i |a_i|)``.  A positive
    ``floor`` keeps round-off in the difference quotient (about 1e-11 at
    h = 1e-5) from dominating components that are nearly zero.
    """
    tape.zero_grads()
    g = Graph(tape)
    loss = f(g)
    g.backward(loss)
    analytic = tape.grads.copy()
    tape.zero_grads()
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    tiny = floor * max(1.0, float(np.max(np.abs(analytic[indices]), initial=0.0)))
    worst = 0.0
    for i in indices:
        orig = tape.values[i]
        tape.values[i] = orig + h
        fp = float(f(Graph(tape)).value)
        tape.values[i] = orig - h
        fm = float(f(Graph(tape)).value)
        tape.values[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + 1e-12, tiny)
        worst = max(worst, err)
    return worst
