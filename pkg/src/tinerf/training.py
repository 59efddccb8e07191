"""Losses, Adam, learning-rate schedules and the training loop."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from . import __version__
from .autodiff import Graph, ParameterTape, ShapeError, Var
from .data import SceneDataset
from .metrics import psnr, ssim
from .render import Rays



@dataclass
class TrainConfig:
    representation: str = "grid"
    lam: float | None = None  # None: 1e-4 (grid) or 0.01 (neural)
    rays_per_batch: int = 256
    iters: int = 5000
    seed: int = 0
    # grid: step decay; neural: exponential decay lr -> lr_end over `iters`.
    # None: 0.01 (grid) or 0.002 (neural)
    lr: float | None = None
    lr_end: float = 2e-4
    lr_decay_start: int = 20000
    lr_decay_every: int = 10000
    lr_decay: float = 0.33
    occupancy_warmup: int = 256
    occupancy_every: int = 16
    eval_every: int = 0  # 0: only at the end
    eval_views: int = 4
    workers: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.representation not in ("grid", "neural"):
            raise ValueError(f"representation must be 'grid' or 'neural', got {self.representation!r}")
        grid = self.representation == "grid"
        if self.lam is None:
            self.lam = 1e-4 if grid else 0.01
        if self.lr is None:
            self.lr = 0.01 if grid else 0.002
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")


class TrainingAborted(RuntimeError):
    pass


# -- losses -------------------------------------------------------------------
def color_loss(g: Graph, pred: Var, target) -> Var:
    """Mean over rays of the summed squared RGB error."""
    if pred.value.shape[0] == 0:
        raise ShapeError("color_loss of an empty batch")
    return g.mse(pred, target)


def total_loss(g: Graph, lc: Var, ls: Var | None, lam: float) -> Var:
    if ls is None or lam == 0.0:
        return lc
    return g.add(lc, g.scale(ls, lam))


# -- optimizer ------------------------------------------------------------------
GROUP_HYPER = {"grid": (0.9, 0.99, 1e-15), "mlp": (0.9, 0.999, 1e-8)}


class AdamState:
    """Moments for every tape slot with per-group (beta1, beta2, eps)."""

    def __init__(self, tape: ParameterTape, hyper=None):
        hyper = dict(hyper or GROUP_HYPER)
        n = len(tape)
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.step = 0
        names = ["mlp"] + sorted(k for k in hyper if k != "mlp")
        self.hyper = np.array([hyper[k] for k in names], dtype=np.float64)  # (groups, 3)
        self.group = np.zeros(n, dtype=np.int8)
        for gid, name in enumerate(names[1:], start=1):
            self.group[tape.group_mask(name)] = gid
        self.rejected = 0


def adam_step(tape: ParameterTape, state: AdamState, lr: float) -> bool:
    """One bias-corrected Adam update; grads are zeroed afterwards.

    A non-finite gradient leaves parameters and moments untouched, bumps
    ``state.rejected`` and returns False.
    """
    g = tape.grads
    if not np.all(np.isfinite(g)):
        state.rejected += 1
        tape.zero_grads()
        return False
    state.step += 1
    k = state.step
    b1, b2 = state.hyper[:, 0], state.hyper[:, 1]
    _adam_kernel(tape.values, g, state.m, state.v, state.group, state.hyper,
                 1.0 - b1 ** k, 1.0 - b2 ** k, float(lr))
    return True


@numba.njit(cache=True)
def _adam_kernel(theta, g, m, v, group, hyper, bc1, bc2, lr):
    for i in range(theta.shape[0]):
        j = group[i]
        b1 = hyper[j, 0]
        b2 = hyper[j, 1]
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        theta[i] -= lr * (m[i] / bc1[j]) / (math.sqrt(v[i] / bc2[j]) + hyper[j, 2])
        g[i] = 0.0


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Grid: ``lr * decay^blocks`` with the first decay at ``lr_decay_start``.

    Neural: ``lr * (lr_end / lr) ** (it / iters)``.
    """
    if cfg.representation == "grid":
        if it < cfg.lr_decay_start:
            return cfg.lr
        blocks = 1 + (it - cfg.lr_decay_start) // cfg.lr_decay_every
        return cfg.lr * cfg.lr_decay ** blocks
    frac = min(it / max(cfg.iters, 1), 1.0)
    return cfg.lr * (cfg.lr_end / cfg.lr) ** frac


# -- one iteration -----------------------------------------------------------------
def _split(rays: Rays, target, parts: int):
    idx = np.array_split(np.arange(len(rays)), parts)
    return [(rays.subset(i), target[i], i.size) for i in idx if i.size]


def batch_loss(model, g: Graph, rays: Rays, target, lam: float, rng, progress: float):
    """Build the regularized loss for a ray batch; returns (loss, lc, ls, out)."""
    out = model.render(g, rays, rng, progress)
    lc = color_loss(g, out.colors[0], target)
    for c in out.colors[1:]:
        lc = g.add(lc, color_loss(g, c, target))
    ls = None
    if lam > 0.0:
        if model.kind == "grid":
            ls = model.smoothness(g, out)
        else:
            ls = model.smoothness(g, out, rays, progress)
    return total_loss(g, lc, ls, lam), lc, ls, out


def compute_grads(model, tape: ParameterTape, rays: Rays, target, cfg: TrainConfig,
                  rng: np.random.Generator, progress: float, pool=None):
    """Forward + backward for one batch; grads land in ``tape.grads``.

    With ``cfg.workers > 1`` the batch is split into contiguous chunks, each
    differentiated on a forked tape, and the worker grads are summed in
    chunk order.  Chunk losses are weighted by their share of the rays.
    """
    if cfg.workers <= 1:
        g = Graph(tape)
        loss, lc, ls, out = batch_loss(model, g, rays, target, cfg.lam, rng, progress)
        g.backward(loss)
        return float(lc.value), (float(ls.value) if ls is not None else 0.0), out.n_evals
    chunks = _split(rays, target, cfg.workers)
    seeds = rng.integers(0, 2 ** 63, len(chunks))
    total = len(rays)

    def run(args):
        (r, t, n), seed = args
        w = tape.fork()
        g = Graph(w)
        loss, lc, ls, out = batch_loss(model, g, r, t, cfg.lam, np.random.default_rng(seed), progress)
        g.backward(loss, seed=n / total)
        return w, n / total * float(lc.value), (n / total * float(ls.value) if ls is not None else 0.0), out.n_evals

    jobs = list(zip(chunks, seeds))
    results = list(pool.map(run, jobs)) if pool is not None else [run(j) for j in jobs]
    tape.reduce([r[0] for r in results])
    return sum(r[1] for r in results), sum(r[2] for r in results), sum(r[3] for r in results)


# -- evaluation ------------------------------------------------------------------
def render_image(model, ds: SceneDataset, index: int, chunk: int = 2048, time_override=None):
    """(H, W, 3) render of one dataset view without building gradients."""
    H, W = ds.hw
    rays = ds.rays(index)
    if time_override is not None:
        rays.times[:] = time_override
        rays.frames[:] = -1
    out = np.zeros((len(rays), 3))
    for s in range(0, len(rays), chunk):
        g = Graph(model.tape, track=False)
        r = model.render(g, rays.subset(slice(s, s + chunk)), None, 1.0)
        out[s:s + chunk] = r.color.value
    return out.reshape(H, W, 3)


def evaluate(model, ds: SceneDataset, views=None) -> dict:
    idx = range(len(ds)) if views is None else views
    rows = []
    for i in idx:
        img = render_image(model, ds, i)
        gt = ds.rgb(i)
        rows.append({"view": int(i), "time": float(ds.times[i]), "psnr": psnr(img, gt),
                     "ssim": ssim(img, gt)})
    finite = [r["psnr"] for r in rows]
    return {"views": rows, "psnr": float(np.mean(finite)) if rows else math.nan,
            "ssim": float(np.mean([r["ssim"] for r in rows])) if rows else math.nan}


# -- loop ------------------------------------------------------------------------------
@dataclass
class TrainResult:
    iterations: int
    history: list = field(default_factory=list)
    eval: dict | None = None
    seconds: float = 0.0
    rejected_steps: int = 0


METRIC_FIELDS = ["iteration", "loss_color", "loss_smooth", "lr", "n_samples", "eval_psnr"]


def train(model, tape: ParameterTape, ds: SceneDataset, cfg: TrainConfig, out_dir=None,
          test: SceneDataset | None = None, log_every: int = 1,
          run_meta: dict | None = None) -> TrainResult:
    """Optimize ``model`` on ``ds``.

    Writes ``metrics.csv`` (deterministic), ``timing.csv`` (wall clock) and
    ``checkpoint.bin`` into ``out_dir`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(tape)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    res = TrainResult(0)
    t0 = time.perf_counter()
    timing = []
    eval_views = None
    if test is not None and cfg.eval_views:
        eval_views = np.linspace(0, len(test) - 1, min(cfg.eval_views, len(test))).astype(int)
    pool = ThreadPoolExecutor(cfg.threads) if cfg.workers > 1 and cfg.threads > 1 else None
    try:
        for it in range(cfg.iters):
            progress = it / max(cfg.iters, 1)
            if model.kind == "grid" and it >= cfg.occupancy_warmup and \
                    (it - cfg.occupancy_warmup) % cfg.occupancy_every == 0:
                model.update_occupancy(rng)
            rays, target = ds.sample_batch(rng, cfg.rays_per_batch)
            lc, ls, n_evals = compute_grads(model, tape, rays, target, cfg, rng, progress, pool)
            if not (math.isfinite(lc) and math.isfinite(ls)):
                _dump(out, it, lc, ls, tape)
                raise TrainingAborted(f"non-finite loss at iteration {it}: color={lc}, smooth={ls}")
            lr = lr_schedule(it, cfg)
            adam_step(tape, state, lr)
            ev = ""
            if test is not None and cfg.eval_every and (it + 1) % cfg.eval_every == 0 \
                    and it + 1 < cfg.iters:
                ev = evaluate(model, test, eval_views)["psnr"]
            if (it + 1) % log_every == 0 or ev != "":
                res.history.append({"iteration": it + 1, "loss_color": lc, "loss_smooth": ls,
                                    "lr": lr, "n_samples": n_evals, "eval_psnr": ev})
                timing.append((it + 1, time.perf_counter() - t0))
            res.iterations = it + 1
    finally:
        if pool is not None:
            pool.shutdown()
    res.rejected_steps = state.rejected
    if test is not None:
        res.eval = evaluate(model, test, eval_views)
        res.history.append({"iteration": res.iterations, "loss_color": "", "loss_smooth": "",
                            "lr": "", "n_samples": "", "eval_psnr": res.eval["psnr"]})
        timing.append((res.iterations, time.perf_counter() - t0))
    res.seconds = time.perf_counter() - t0
    if out is not None:
        with open(out / "metrics.csv", "w", newline="") as f:
            w = csv.DictWriter(f, METRIC_FIELDS)
            w.writeheader()
            w.writerows(_fmt(r) for r in res.history)
        with open(out / "timing.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "wall_clock"])
            w.writerows((i, f"{s:.3f}") for i, s in timing)
        meta = {"iterations": res.iterations, "train": asdict(cfg)}
        meta.update(run_meta or {})
        save_checkpoint(model, tape, out / "checkpoint.bin", meta)
    return res


def _fmt(row):
    return {k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()}


def _dump(out, it, lc, ls, tape):
    if out is None:
        return
    bad = ~np.isfinite(tape.grads)
    segs = [s.name for s in tape.segments.values() if bad[s.start:s.stop].any()]
    (out / "abort.json").write_text(json.dumps({"iteration": it, "loss_color": repr(lc),
                                                "loss_smooth": repr(ls),
                                                "nonfinite_grad_segments": segs}, indent=2))


def save_checkpoint(model, tape: ParameterTape, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.update({"representation": model.kind, "version": __version__})
    if model.kind == "grid":
        meta["occupancy_bits"] = int(model.occupancy.bits.sum())
        meta["occupancy_updates"] = model.occupancy.updates
        path = Path(path)
        np.save(path.with_name(path.stem + ".occupancy.npy"), model.occupancy.cache)
    tape.save(path, meta)
