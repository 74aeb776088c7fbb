"""Synthetic driving data: landmark scenes, trajectories, rendering, corruptions, windows.

World frame is z-up with the ground at z = 0. The vehicle body frame has x
forward, y left, z up; the camera looks along body x.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose, quat_exp, quat_log, quat_to_matrix, yaw_quaternion

MAX_WINDOW = 11
CAMERA_HEIGHT = 1.5
HFOV_DEG = 75.0
NEAR, FAR = 0.5, 60.0
PERTURB_KINDS = ("fog", "occlusion", "gaussian_noise")
PRESETS = {
    "clean": (),
    "medium": (("fog", 0.4), ("occlusion", 0.3)),
    "hard": (("fog", 0.4), ("occlusion", 0.3), ("gaussian_noise", 0.6)),
}
POSE_COLUMNS = ("frame_id", "dx", "dy", "dz", "rx", "ry", "rz")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Scene:
    seed: int
    positions: np.ndarray  # (M, 3) meters
    colors: np.ndarray  # (M, 3) in [0, 1]
    sizes: np.ndarray  # (M,) radius, meters


@dataclass(frozen=True)
class Trajectory:
    kind: str
    poses: tuple[Pose, ...]
    scale: float

    def translations(self) -> np.ndarray:
        return np.stack([p.d for p in self.poses])

    def rotations(self) -> np.ndarray:
        return np.stack([p.r for p in self.poses])


@dataclass(frozen=True)
class SampleWindow:
    frames: np.ndarray  # (N, H, W, 3) in [0, 1]
    poses: tuple[Pose, ...]
    window_indices: tuple[int, ...]


def generate_scene(seed: int, num_landmarks: int = 96, extent: float = 20.0) -> Scene:
    """Landmark pillars scattered over a square of side ``2 * extent`` around the origin."""
    if num_landmarks < 32:
        raise ValueError("a scene needs at least 32 landmarks")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-extent, extent, size=(num_landmarks, 2))
    z = rng.uniform(0.3, 5.0, size=(num_landmarks, 1))
    colors = rng.uniform(0.05, 0.95, size=(num_landmarks, 3))
    sizes = rng.uniform(0.25, 0.9, size=num_landmarks)
    return Scene(seed, np.concatenate([xy, z], axis=1), colors, sizes)


def _curve(kind: str, scale: float, t: np.ndarray) -> np.ndarray:
    half = scale / 2
    if kind == "loop":
        return np.stack([half * np.cos(t), half * np.sin(t)], axis=-1)
    if kind == "figure_eight":
        return np.stack([half * np.sin(t), half * np.sin(t) * np.cos(t)], axis=-1)
    if kind == "line":
        return np.stack([half * (t / np.pi - 1), np.zeros_like(t)], axis=-1)
    raise ValueError(f"unknown trajectory kind {kind!r}")


def generate_trajectory(kind: str, num_poses: int, scale: float = 20.0, offset: float = 0.0) -> Trajectory:
    """Poses at uniform arc-length spacing facing the direction of travel.

    ``offset`` shifts every sample by that fraction of one step, which gives an
    interleaved held-out split along the same path.
    """
    if num_poses < 2:
        raise ValueError("a trajectory needs at least 2 poses")
    closed = kind != "line"
    dense_t = np.linspace(0.0, 2 * np.pi, 20001)
    dense = _curve(kind, scale, dense_t)
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(dense, axis=0), axis=1))])
    step = arc[-1] / (num_poses if closed else num_poses - 1)
    s = (np.arange(num_poses) + offset) * step
    s = np.mod(s, arc[-1]) if closed else np.clip(s, 0.0, arc[-1])
    t = np.interp(s, arc, dense_t)
    xy = _curve(kind, scale, t)
    eps = 1e-4
    tangent = _curve(kind, scale, t + eps) - _curve(kind, scale, t - eps)
    yaw = np.arctan2(tangent[:, 1], tangent[:, 0])
    r = quat_log(yaw_quaternion(yaw))
    d = np.concatenate([xy, np.full((num_poses, 1), CAMERA_HEIGHT)], axis=1)
    return Trajectory(kind, tuple(Pose(d[k], r[k]) for k in range(num_poses)), float(scale))


def focal_length(width: int) -> float:
    return width / (2 * np.tan(np.radians(HFOV_DEG) / 2))


def render_observation(pose: Pose, scene: Scene, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Pinhole render of landmark discs over a sky/ground gradient; ``(H, W, 3)`` float in [0, 1]."""
    height, width = size
    f = focal_length(width)
    cx, cy = width / 2, height / 2
    rot = quat_to_matrix(quat_exp(pose.r))  # body -> world
    body = (scene.positions - pose.d) @ rot  # world -> body coordinates
    depth = body[:, 0]
    u = cx - f * body[:, 1] / np.maximum(depth, 1e-9)
    v = cy - f * body[:, 2] / np.maximum(depth, 1e-9)
    radius = f * scene.sizes / np.maximum(depth, 1e-9)

    rows = (np.arange(height) + 0.5)[:, None]
    frac = np.clip(np.abs(rows - cy) / cy, 0.0, 1.0)
    sky = np.array([0.55, 0.7, 0.95]) * (1 - frac) + np.array([0.85, 0.9, 1.0]) * frac
    ground = np.array([0.45, 0.42, 0.38]) * (1 - frac) + np.array([0.3, 0.28, 0.25]) * frac
    img = np.where(rows < cy, 1.0, 0.0)[..., None] * sky[:, None, :] + np.where(rows >= cy, 1.0, 0.0)[..., None] * ground[:, None, :]
    img = np.broadcast_to(img, (height, width, 3)).copy()

    visible = (depth > NEAR) & (depth < FAR)
    visible &= (u + radius > 0) & (u - radius < width) & (v + radius > 0) & (v - radius < height)
    for k in np.flatnonzero(visible)[np.argsort(-depth[visible])]:
        r = min(radius[k], 2.0 * max(height, width))
        x0, x1 = int(max(0, np.floor(u[k] - r - 1))), int(min(width, np.ceil(u[k] + r + 1)))
        y0, y1 = int(max(0, np.floor(v[k] - r - 1))), int(min(height, np.ceil(v[k] + r + 1)))
        if x0 >= x1 or y0 >= y1:
            continue
        xs = np.arange(x0, x1) + 0.5
        ys = (np.arange(y0, y1) + 0.5)[:, None]
        dist = np.sqrt((xs - u[k]) ** 2 + (ys - v[k]) ** 2)
        cover = np.clip(r - dist + 0.5, 0.0, 1.0)[..., None]  # anti-aliased edge
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch * (1 - cover) + scene.colors[k] * cover
    return img


def perturb(image: np.ndarray, kind: str, severity: float, seed: int = 0) -> np.ndarray:
    """Corrupt an ``(H, W, 3)`` image in [0, 1]; severity 0 is the identity."""
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    if kind not in PERTURB_KINDS:
        raise ValueError(f"unknown perturbation {kind!r}")
    image = np.asarray(image, dtype=np.float64)
    if severity == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    if kind == "fog":
        return (1 - severity) * image + severity
    if kind == "gaussian_noise":
        return np.clip(image + rng.normal(0.0, 0.3 * severity, size=image.shape), 0.0, 1.0)
    h, w = image.shape[:2]
    target = 0.25 * severity * h * w
    mask = np.zeros((h, w), dtype=bool)
    out = image.copy()
    while mask.sum() < target:
        rh = int(rng.integers(1, max(2, h // 5) + 1))
        rw = int(rng.integers(1, max(2, w // 5) + 1))
        y = int(rng.integers(0, h - rh + 1))
        x = int(rng.integers(0, w - rw + 1))
        out[y : y + rh, x : x + rw] = rng.uniform(0.3, 0.7)
        mask[y : y + rh, x : x + rw] = True
    return out


def apply_preset(image: np.ndarray, preset: str, seed: int = 0, strength: float = 1.0) -> np.ndarray:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    seeds = np.random.SeedSequence(seed).generate_state(len(PRESETS[preset]))
    for (kind, severity), s in zip(PRESETS[preset], seeds):
        image = perturb(image, kind, severity * strength, int(s))
    return np.asarray(image, dtype=np.float64)


def frame_seed(dataset_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([dataset_seed, index]).generate_state(1)[0])


def window_starts(num_poses: int, window_size: int, stride: int = 1) -> list[int]:
    if not 1 <= window_size <= MAX_WINDOW:
        raise ValueError(f"window size must lie in [1, {MAX_WINDOW}]")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window_size > num_poses:
        raise ValueError(f"window of {window_size} frames exceeds trajectory length {num_poses}")
    return list(range(0, num_poses - window_size + 1, stride))


def window_samples(
    trajectory: Trajectory, scene: Scene, window_size: int, stride: int = 1, size: tuple[int, int] = (64, 64)
) -> list[SampleWindow]:
    starts = window_starts(len(trajectory.poses), window_size, stride)
    cache: dict[int, np.ndarray] = {}
    windows = []
    for s in starts:
        idx = tuple(range(s, s + window_size))
        for i in idx:
            if i not in cache:
                cache[i] = render_observation(trajectory.poses[i], scene, size)
        windows.append(SampleWindow(np.stack([cache[i] for i in idx]), tuple(trajectory.poses[i] for i in idx), idx))
    return windows


def tiling_windows(num_frames: int, window_size: int) -> list[tuple[int, ...]]:
    """Windows covering every frame; the last one is shifted back to stay full length."""
    window_size = min(window_size, num_frames)
    starts = list(range(0, num_frames - window_size + 1, window_size))
    if starts[-1] + window_size < num_frames:
        starts.append(num_frames - window_size)
    return [tuple(range(s, s + window_size)) for s in starts]


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(quantize(image)).save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class Dataset:
    root: Path
    meta: dict
    frames: np.ndarray  # (M, H, W, 3) uint8
    poses: np.ndarray  # (M, 6) float64

    def windows(self) -> list[tuple[int, ...]]:
        n = self.meta["window_size"]
        return [tuple(range(s, s + n)) for s in window_starts(len(self.poses), n, self.meta["stride"])]

    def float_frames(self) -> np.ndarray:
        return self.frames.astype(np.float32) / 255.0

    def trajectory_diameter(self) -> float:
        xy = self.poses[:, :2]
        return float(np.max(np.linalg.norm(xy[:, None] - xy[None], axis=-1)))


def write_dataset(root: str | Path, data_cfg, preset: str = "clean") -> Path:
    """Render a dataset directory: ``meta.json``, ``poses.csv`` and ``frames/<id>.png``."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    offset = 0.5 if data_cfg.split == "test" else 0.0
    traj = generate_trajectory(data_cfg.kind, data_cfg.num_poses, data_cfg.scale, offset)
    scene = generate_scene(data_cfg.seed, data_cfg.num_landmarks, extent=data_cfg.scale)
    size = (data_cfg.image_height, data_cfg.image_width)
    window_starts(data_cfg.num_poses, data_cfg.window_size, data_cfg.stride)
    with open(root / "poses.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(POSE_COLUMNS)
        for i, pose in enumerate(traj.poses):
            image = render_observation(pose, scene, size)
            if preset != "clean":
                image = apply_preset(image, preset, frame_seed(data_cfg.seed, i))
            save_image(root / "frames" / f"{i:05d}.png", image)
            writer.writerow([i, *(f"{v:.9g}" for v in pose.as_vector())])
    meta = {
        "format": "gdpose-dataset/1",
        "config": _asdict(data_cfg),
        "seed": data_cfg.seed,
        "num_frames": data_cfg.num_poses,
        "window_size": data_cfg.window_size,
        "stride": data_cfg.stride,
        "num_windows": len(window_starts(data_cfg.num_poses, data_cfg.window_size, data_cfg.stride)),
        "image_size": list(size),
        "preset": preset,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def perturb_dataset(src: str | Path, dst: str | Path, preset: str) -> Path:
    """Copy a dataset applying a corruption preset to every frame."""
    ds = load_dataset(src)
    dst = Path(dst)
    (dst / "frames").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds.poses)):
        image = apply_preset(ds.frames[i].astype(np.float64) / 255.0, preset, frame_seed(ds.meta["seed"], i))
        save_image(dst / "frames" / f"{i:05d}.png", image)
    (dst / "poses.csv").write_bytes((Path(src) / "poses.csv").read_bytes())
    meta = dict(ds.meta, preset=preset, source=Path(src).name)
    (dst / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return dst


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    missing = [p for p in ("meta.json", "poses.csv", "frames") if not (root / p).exists()]
    if missing:
        raise DatasetError(f"dataset {root} is missing: {', '.join(missing)}")
    meta = json.loads((root / "meta.json").read_text())
    required = ("seed", "num_frames", "window_size", "stride", "image_size")
    missing = [k for k in required if k not in meta]
    if missing:
        raise DatasetError(f"meta.json in {root} is missing fields: {', '.join(missing)}")
    with open(root / "poses.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, [])
        missing = [c for c in POSE_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"poses.csv in {root} is missing columns: {', '.join(missing)}")
        cols = [header.index(c) for c in POSE_COLUMNS]
        rows = [[float(row[c]) for c in cols] for row in reader]
    table = np.array(rows, dtype=np.float64).reshape(-1, len(POSE_COLUMNS))
    if len(table) != meta["num_frames"]:
        raise DatasetError(f"poses.csv has {len(table)} rows, meta.json declares {meta['num_frames']}")
    frames = []
    for fid in table[:, 0].astype(int):
        path = root / "frames" / f"{fid:05d}.png"
        if not path.exists():
            raise DatasetError(f"missing frame {path}")
        frames.append(np.asarray(Image.open(path).convert("RGB")))
    return Dataset(root, meta, np.stack(frames), table[:, 1:])


def _asdict(cfg) -> dict:
    return dataclasses.asdict(cfg) if dataclasses.is_dataclass(cfg) else dict(cfg)
