"""Posed, timestamped image sets: synthesis, transforms-file I/O, ray batches."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import Camera, Rays, _check_pose, generate_rays, pixel_rays
from .scenes import AnalyticScene, get_scene, render_oracle_checked

DEFAULT_AABB = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class DatasetError(ValueError):
    pass


@dataclass
class SceneDataset:
    images: np.ndarray  # (n, H, W, 4) RGBA in [0, 1]
    poses: np.ndarray  # (n, 4, 4) camera-to-world
    times: np.ndarray  # (n,) in [0, 1]
    frames: np.ndarray  # (n,) int time-embedding id, -1 if between frames
    camera: Camera
    aabb: np.ndarray = field(default_factory=lambda: np.asarray(DEFAULT_AABB))
    near: float = 2.0
    far: float = 6.0
    split: str = "train"
    n_frames: int = 1
    background: tuple = (0.0, 0.0, 0.0)

    def __len__(self):
        return self.images.shape[0]

    @property
    def hw(self):
        return self.images.shape[1], self.images.shape[2]

    def rgb(self, idx=None) -> np.ndarray:
        """Ground truth composited over the background."""
        img = self.images if idx is None else self.images[idx]
        a = img[..., 3:4]
        return img[..., :3] * a + (1.0 - a) * np.asarray(self.background)

    def _flat_rgb(self) -> np.ndarray:
        cache = self.__dict__.get("_rgb_cache")
        if cache is None or cache[0] is not self.images:
            cache = (self.images, self.rgb().reshape(len(self), -1, 3))
            self.__dict__["_rgb_cache"] = cache
        return cache[1]

    def rays(self, image: int, pixels=None) -> Rays:
        return generate_rays(self.camera, self.poses[image], pixels, t=float(self.times[image]),
                             frame=int(self.frames[image]), near=self.near, far=self.far)

    def sample_batch(self, rng: np.random.Generator, n_rays: int) -> tuple[Rays, np.ndarray]:
        """Rays drawn uniformly over all (image, pixel) pairs, with targets."""
        H, W = self.hw
        img = rng.integers(0, len(self), n_rays)
        pix = rng.integers(0, H * W, n_rays)
        order = np.lexsort((pix, img))
        img, pix = img[order], pix[order]
        rays = pixel_rays(self.camera, self.poses[img], pix % W, pix // W)
        rays.near[:], rays.far[:] = self.near, self.far
        rays.times[:] = self.times[img]
        rays.frames[:] = self.frames[img]
        return rays, self._flat_rgb()[img, pix]

    def subset(self, idx) -> "SceneDataset":
        idx = np.asarray(idx)
        return SceneDataset(self.images[idx], self.poses[idx], self.times[idx], self.frames[idx],
                            self.camera, self.aabb, self.near, self.far, self.split,
                            self.n_frames, self.background)


# -- cameras ------------------------------------------------------------------
def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target`` (-z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, -fwd, eye
    return m


def orbit_pose(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    ce = math.cos(elevation)
    eye = radius * np.array([ce * math.cos(azimuth), ce * math.sin(azimuth), math.sin(elevation)])
    return look_at(eye)


# -- synthesis ----------------------------------------------------------------
@dataclass
class SynthSpec:
    scene: str = "blob-bounce"
    n_frames: int = 20
    train_views: int = 16
    test_views: int = 4
    size: int = 64
    fov_deg: float = 40.0
    radius: float = 4.0
    elevation: tuple = (15.0, 50.0)  # degrees
    azimuth: tuple = (0.0, 360.0)
    seed: int = 0
    oracle_n: int = 256


def synthesize(spec: SynthSpec) -> tuple[SceneDataset, SceneDataset]:
    """Render train and held-out splits of an analytic scene.

    Every frame gets ``train_views`` + ``test_views`` cameras at random
    orbit positions (fresh per frame), so each time step is seen from
    several directions.
    """
    scene = get_scene(spec.scene)
    rng = np.random.default_rng(spec.seed)
    focal = 0.5 * spec.size / math.tan(0.5 * math.radians(spec.fov_deg))
    cam = Camera(spec.size, spec.size, focal)
    near, far = max(spec.radius - 2.0, 0.05), spec.radius + 2.0
    out = {}
    per_frame = spec.train_views + spec.test_views
    poses = {"train": [], "test": []}
    times = {"train": [], "test": []}
    for f in range(spec.n_frames):
        t = f / max(spec.n_frames - 1, 1)
        az = np.radians(rng.uniform(*spec.azimuth, per_frame))
        el = np.radians(rng.uniform(*spec.elevation, per_frame))
        for k in range(per_frame):
            split = "train" if k < spec.train_views else "test"
            poses[split].append(orbit_pose(az[k], el[k], spec.radius))
            times[split].append(t)
    for split in ("train", "test"):
        out[split] = render_views(scene, cam, poses[split], times[split], spec.n_frames, near, far,
                                  spec.oracle_n, split)
    return out["train"], out["test"]


def render_views(scene, camera: Camera, poses, times, n_frames: int, near: float, far: float,
                 oracle_n: int = 256, split: str = "train") -> SceneDataset:
    """Dataset of oracle renders for explicit camera poses and times.

    Times must sit on the frame grid ``f / (n_frames - 1)``.
    """
    if isinstance(scene, str):
        scene = get_scene(scene)
    P = np.stack(poses) if len(poses) else np.zeros((0, 4, 4))
    T = np.asarray(times, dtype=np.float64)
    imgs = np.stack([render_oracle_checked(scene, camera, p, t, oracle_n, near=near, far=far)[0]
                     for p, t in zip(P, T)]) if len(T) else np.zeros((0, camera.height, camera.width, 4))
    frames = np.rint(T * (n_frames - 1)).astype(np.int64)
    return SceneDataset(np.clip(imgs, 0.0, 1.0), P, T, frames, camera, np.asarray(scene.aabb),
                        near, far, split, n_frames, tuple(scene.background))


# -- image I/O ------------------------------------------------------------------
def to_uint8(img) -> np.ndarray:
    """Round half up: ``floor(255 v + 0.5)``; values are clipped to [0, 1]."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path) -> None:
    """PNG with 1, 3 or 4 channels; 2-D arrays are written as grayscale."""
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    mode = "L" if arr.ndim == 2 else {3: "RGB", 4: "RGBA"}[arr.shape[-1]]
    try:
        Image.fromarray(arr, mode).save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e


def read_image(path) -> np.ndarray:
    """Float image in [0, 1]; RGB files get an opaque alpha channel."""
    with Image.open(path) as im:
        im = im.convert("RGBA")
        return np.asarray(im, dtype=np.float64) / 255.0


# -- transforms files -----------------------------------------------------------
def save_dataset(ds: SceneDataset, root, split: str | None = None) -> Path:
    """Write ``transforms_{split}.json`` plus PNG frames under ``root``."""
    root = Path(root)
    split = split or ds.split
    (root / split).mkdir(parents=True, exist_ok=True)
    fov = 2.0 * math.atan(0.5 * ds.camera.width / ds.camera.focal)
    frames = []
    for i in range(len(ds)):
        rel = f"./{split}/r_{i:03d}"
        write_image(ds.images[i], root / f"{rel}.png")
        frames.append({"file_path": rel, "time": float(ds.times[i]),
                       "transform_matrix": ds.poses[i].tolist()})
    meta = {"camera_angle_x": fov, "frames": frames, "aabb": np.asarray(ds.aabb).tolist(),
            "near": ds.near, "far": ds.far, "n_frames": ds.n_frames,
            "background": list(ds.background)}
    path = root / f"transforms_{split}.json"
    path.write_text(json.dumps(meta, indent=2))
    return path


def load_dataset(root, split: str = "train", frame_times=None) -> SceneDataset:
    """Parse a D-NeRF style ``transforms_{split}.json``.

    ``focal = 0.5 * width / tan(0.5 * camera_angle_x)``.  Times come from
    each frame's ``time`` field, or from its index when absent; they are
    mapped to [0, 1] with ``(time - first) / (last - first)`` only when
    they are frame indices.  ``frame_times`` (from the training split)
    assigns embedding ids; times not in it get id -1.
    """
    root = Path(root)
    path = root / f"transforms_{split}.json"
    if not path.is_file():
        raise DatasetError(f"{path}: transforms file not found")
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:{e.lineno}: malformed JSON ({e.msg})") from e
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DatasetError(f"{path}: missing key {key!r}")
    frames = meta["frames"]
    if not frames:
        raise DatasetError(f"{path}: no frames")
    images, poses, times = [], [], []
    has_time = all("time" in fr for fr in frames)
    for k, fr in enumerate(frames):
        where = f"{path}: frame {k} ({fr.get('file_path', '?')})"
        fp = fr.get("file_path")
        if fp is None:
            raise DatasetError(f"{where}: missing file_path")
        img_path = root / fp
        if img_path.suffix.lower() != ".png":
            img_path = img_path.with_name(img_path.name + ".png")
        if not img_path.is_file():
            raise DatasetError(f"{where}: image {img_path} not found")
        try:
            pose = np.asarray(fr["transform_matrix"], dtype=np.float64)
            pose = _check_pose(pose)
        except (KeyError, ValueError, TypeError) as e:
            raise DatasetError(f"{where}: bad transform_matrix: {e}") from e
        if pose.shape == (3, 4):
            pose = np.vstack([pose, [0.0, 0.0, 0.0, 1.0]])
        images.append(read_image(img_path))
        poses.append(pose)
        times.append(float(fr["time"]) if has_time else float(k))
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{path}: images differ in size: {sorted(shapes)}")
    times = np.asarray(times)
    if not has_time:
        span = times[-1] - times[0]
        times = (times - times[0]) / span if span > 0 else np.zeros_like(times)
    bad = np.flatnonzero((times < 0.0) | (times > 1.0) | ~np.isfinite(times))
    if bad.size:
        k = int(bad[0])
        raise DatasetError(f"{path}: frame {k}: time {times[k]} outside [0, 1]")
    H, W = images[0].shape[:2]
    focal = 0.5 * W / math.tan(0.5 * float(meta["camera_angle_x"]))
    if frame_times is None:
        frame_times = np.unique(times)
    frame_times = np.asarray(frame_times, dtype=np.float64)
    ids = np.searchsorted(frame_times, times)
    ids = np.clip(ids, 0, len(frame_times) - 1)
    frames_id = np.where(np.abs(frame_times[ids] - times) < 1e-9, ids, -1)
    return SceneDataset(np.stack(images), np.stack(poses), times, frames_id.astype(np.int64),
                        Camera(W, H, focal), np.asarray(meta.get("aabb", DEFAULT_AABB), dtype=np.float64),
                        float(meta.get("near", 2.0)), float(meta.get("far", 6.0)), split,
                        int(meta.get("n_frames", len(frame_times))),
                        tuple(meta.get("background", (0.0, 0.0, 0.0))))
