"""Command-line entry point: ``python -m tinerf {train,render,eval,synth}``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ParameterTape
from .config import ConfigError, RunConfig, from_dict, load_config, synth_spec, to_dict
from .data import DatasetError, SceneDataset, load_dataset, save_dataset, synthesize, write_image
from .models import build_model
from .training import TrainingAborted, evaluate, render_image, train


# -- shared helpers ------------------------------------------------------------
def make_model(cfg: RunConfig, ds: SceneDataset):
    """Fresh tape + model for ``cfg``; initialization is seeded by ``cfg.train.seed``."""
    tape = ParameterTape()
    rng = np.random.default_rng([cfg.train.seed, 1])
    model = build_model(cfg.train.representation, cfg.model_config(), tape, ds.aabb,
                        ds.n_frames, rng, ds.background, ds.near, ds.far)
    return model, tape


def load_run(checkpoint, ds: SceneDataset, representation: str | None = None):
    """Rebuild a model from ``checkpoint.bin`` (+ its occupancy cache)."""
    ck = Path(checkpoint)
    if not ck.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ck}")
    tape, meta = ParameterTape.load(ck)
    if representation is not None and representation != meta.get("representation"):
        raise ConfigError(f"checkpoint holds a {meta.get('representation')!r} model, "
                          f"not {representation!r}")
    cfg = from_dict(meta["run"])
    model, fresh = make_model(cfg, ds)
    if list(fresh.segments) != list(tape.segments) or len(fresh) != len(tape):
        raise ConfigError("checkpoint layout does not match its recorded configuration")
    fresh.values[:] = tape.values
    occ = ck.with_name(ck.stem + ".occupancy.npy")
    if model.kind == "grid" and occ.is_file():
        model.occupancy.cache[:] = np.load(occ)
        model.occupancy.bits = model.occupancy.cache > model.occupancy.threshold
        model.occupancy.updates = int(meta.get("occupancy_updates", 1))
    return model, fresh, cfg


def _datasets(cfg: RunConfig):
    root = Path(cfg.data.path) if cfg.data.path else None
    if root is None or not root.is_dir():
        raise DatasetError(f"dataset path not found: {cfg.data.path or '(empty data.path)'}")
    tr = load_dataset(root, "train")
    frame_times = np.unique(tr.times)
    te = None
    if (root / "transforms_test.json").is_file():
        te = load_dataset(root, "test", frame_times)
        te.n_frames = tr.n_frames
    for d in (tr, te):
        if d is not None:
            d.background = tuple(cfg.data.background)
    return tr, te


def _overrides(args) -> dict:
    o = {}
    if getattr(args, "seed", None) is not None:
        o.setdefault("train", {})["seed"] = args.seed
    if getattr(args, "representation", None) is not None:
        o.setdefault("train", {})["representation"] = args.representation
    if getattr(args, "lam", None) is not None:
        o.setdefault("train", {})["lam"] = args.lam
    if getattr(args, "iters", None) is not None:
        o.setdefault("train", {})["iters"] = args.iters
    if getattr(args, "threads", None) is not None:
        o.setdefault("train", {})["threads"] = args.threads
    if getattr(args, "out", None) is not None:
        o["out"] = args.out
    if getattr(args, "data", None) is not None:
        o.setdefault("data", {})["path"] = args.data
    return o


def _set_threads(n):
    if n:
        import numba
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# -- commands ------------------------------------------------------------------
def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    _set_threads(cfg.train.threads)
    tr, te = _datasets(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.config:
        (out / "config.toml").write_bytes(Path(args.config).read_bytes())
    effective = to_dict(cfg)
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    (out / "VERSION").write_text(f"tinerf {__version__}\n")
    model, tape = make_model(cfg, tr)
    try:
        res = train(model, tape, tr, cfg.train, out, test=te, run_meta={"run": effective})
    except TrainingAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    line = f"trained {res.iterations} iterations in {res.seconds:.1f}s"
    if res.eval is not None:
        line += f"; held-out PSNR {res.eval['psnr']:.2f} dB, SSIM {res.eval['ssim']:.4f}"
    print(line)
    return 0


def cmd_render(args) -> int:
    cfg0 = load_config(args.config, _overrides(args)) if args.config or args.data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _split_for(args, cfg0)
    model, tape, cfg = load_run(args.checkpoint, ds, args.representation)
    times = _parse_times(args.times)
    views = range(len(ds)) if args.views is None else [int(v) for v in args.views.split(",") if v]
    written = 0
    for v in views:
        for t in (times if times is not None else [None]):
            img = render_image(model, ds, v, time_override=t)
            if not np.all(np.isfinite(img)):
                print(f"error: non-finite pixels in view {v}", file=sys.stderr)
                return 3
            tag = f"t{float(ds.times[v]) if t is None else t:.4f}"
            write_image(img, out / f"view{v:03d}_{tag}.png")
            written += 1
    print(f"wrote {written} images to {out}")
    return 0


def cmd_eval(args) -> int:
    cfg0 = load_config(args.config, _overrides(args)) if args.config or args.data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _split_for(args, cfg0)
    model, _, _ = load_run(args.checkpoint, ds, args.representation)
    rep = evaluate(model, ds)
    with open(out / f"eval_{args.split}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "time", "psnr", "ssim"])
        for r in rep["views"]:
            w.writerow([r["view"], repr(r["time"]), repr(r["psnr"]), repr(r["ssim"])])
        w.writerow(["mean", "", repr(rep["psnr"]), repr(rep["ssim"])])
    summary = (f"split {args.split}: {len(rep['views'])} views, mean PSNR "
               f"{_fmt_db(rep['psnr'])}, mean SSIM {rep['ssim']:.4f}\n")
    (out / f"eval_{args.split}.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_synth(args) -> int:
    raw = {"scene": args.scene, "n_frames": args.frames, "train_views": args.train_views,
           "test_views": args.test_views, "size": args.size, "seed": args.seed}
    spec = synth_spec({k: v for k, v in raw.items() if v is not None})
    tr, te = synthesize(spec)
    out = Path(args.out)
    save_dataset(tr, out, "train")
    save_dataset(te, out, "test")
    print(f"wrote {len(tr)} train + {len(te)} test views of {spec.scene!r} to {out}")
    return 0


def _fmt_db(v):
    return "inf dB" if math.isinf(v) else f"{v:.2f} dB"


def _parse_times(text):
    if text is None:
        return None
    return [float(x) for x in text.split(",") if x.strip()]


def _split_for(args, cfg0):
    path = args.data or (cfg0.data.path if cfg0 is not None else "")
    if not path:
        meta_cfg = _config_from_checkpoint(args.checkpoint)
        path = meta_cfg.data.path
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset path not found: {path}")
    tr = load_dataset(root, "train")
    ds = load_dataset(root, args.split, np.unique(tr.times))
    ds.n_frames = tr.n_frames
    return ds


def _config_from_checkpoint(ck) -> RunConfig:
    _, meta = ParameterTape.load(ck)
    return from_dict(meta["run"])


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinerf", description="Dynamic radiance fields from "
                                "temporally interpolated features.")
    p.add_argument("--version", action="version", version=f"tinerf {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, help="cap on worker threads")
        sp.add_argument("--representation", choices=["neural", "grid"])
        sp.add_argument("--lambda", dest="lam", type=float, help="smoothness weight")
        sp.add_argument("--iters", type=int)
        sp.add_argument("--data", help="dataset directory (overrides data.path)")

    t = sub.add_parser("train", help="optimize a model on a dataset")
    common(t)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render views of a trained model")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--split", default="test")
    r.add_argument("--views", help="comma-separated view indices (default: all)")
    r.add_argument("--times", help="comma-separated times in [0, 1] (default: each view's own)")
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM of a trained model on a split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("synth", help="render an analytic scene into a dataset")
    s.add_argument("--scene", default="blob-bounce")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--train-views", type=int)
    s.add_argument("--test-views", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None) is None and args.cmd in ("render", "eval"):
        args.out = str(Path(args.checkpoint).parent)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
