"""Training, evaluation, ablation, throughput and export routines behind the CLI."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from .config import Config
from .data import Dataset, apply_preset, frame_seed, load_dataset, tiling_windows
from .diffusion import DivergenceError
from .geometry import pose_errors, quat_exp, rotation_decode, rotation_encode
from .graphs import build_pose_chain_graph
from .model import PoseRegressor, load_checkpoint, save_checkpoint
from .objective import BalanceParams, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.gdp"
LOG_NAME = "train_log.csv"
ABLATION_TOGGLES = (
    "no_diffusion",
    "no_feature_graph",
    "no_vector_graph",
    "no_branched_decoder",
    "no_multilevel",
    "topology",
    "rotation_repr",
    "stage_placement",
)


class TrainingLockedError(RuntimeError):
    pass


@dataclass
class EvalReport:
    mean_translation_m: float
    median_translation_m: float
    mean_rotation_deg: float
    median_rotation_deg: float
    translation_errors: list[float]
    rotation_errors: list[float]
    config: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def metrics(self) -> dict:
        """Deterministic part of the report (everything except wall-clock time)."""
        out = dataclasses.asdict(self)
        out.pop("wall_clock_s")
        return out


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def encode_targets(poses: np.ndarray, representation: str) -> np.ndarray:
    """``(M, 6)`` log-quaternion poses -> ``(M, 3 + rot_dim)`` regression targets."""
    rot = rotation_encode(quat_exp(poses[:, 3:]), representation)
    return np.concatenate([poses[:, :3], rot], axis=1)


def decode_predictions(pred: np.ndarray, representation: str) -> tuple[np.ndarray, np.ndarray]:
    return pred[..., :3], rotation_decode(pred[..., 3:], representation)


def config_for_dataset(config: Config, ds: Dataset) -> Config:
    """Replace the data section by the dataset's own echo so image size and windows match."""
    raw = config.to_dict()
    raw["data"] = dict(ds.meta["config"]) if "config" in ds.meta else raw["data"]
    return Config.from_dict(raw)


def augment_batch(frames: np.ndarray, aug, rng: np.random.Generator) -> np.ndarray:
    """Training-time augmentation on ``(B, N, H, W, 3)`` float frames."""
    out = frames
    if aug.crop:
        b, n, h, w, _ = out.shape
        padded = np.pad(out, ((0, 0), (0, 0), (4, 4), (4, 4), (0, 0)), mode="edge")
        shifted = np.empty_like(out)
        for i in range(b):
            dy, dx = rng.integers(0, 9, size=2)
            shifted[i] = padded[i, :, dy : dy + h, dx : dx + w]
        out = shifted
    if aug.color_jitter:
        bright = rng.uniform(-0.1, 0.1, size=(out.shape[0], 1, 1, 1, 1))
        contrast = rng.uniform(0.9, 1.1, size=(out.shape[0], 1, 1, 1, 1))
        mean = out.mean(axis=(2, 3, 4), keepdims=True)
        out = np.clip((out - mean) * contrast + mean + bright, 0.0, 1.0)
    if aug.noise:
        out = out.copy()
        for i in range(out.shape[0]):
            if rng.random() < 0.5:
                continue
            strength = rng.uniform(0.0, 1.0)
            for j in range(out.shape[1]):
                out[i, j] = apply_preset(out[i, j], "hard", int(rng.integers(2**31)), strength)
    return out.astype(np.float32, copy=False)


def _to_images(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)).permute(0, 1, 4, 2, 3)


def build_model(config: Config, ds: Dataset | None = None) -> PoseRegressor:
    model = PoseRegressor(config)
    if ds is not None:
        d = ds.poses[:, :3]
        model.set_translation_stats(d.mean(axis=0), max(float(d.std(axis=0).max()), 1e-6))
    return model


def train(config: Config, dataset: str | Path, out_dir: str | Path) -> dict:
    """Fit a model on every window of ``dataset``; writes checkpoint and loss log to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise TrainingLockedError(f"{out_dir} is owned by another training run") from exc
    try:
        return _train_locked(config, load_dataset(dataset), out_dir)
    finally:
        lock.release()


def _train_locked(config: Config, ds: Dataset, out_dir: Path) -> dict:
    config = config_for_dataset(config, ds)
    tc = config.train
    seed_everything(tc.seed)
    rng = np.random.default_rng(tc.seed)
    model = build_model(config, ds)
    balance = BalanceParams.from_config(config.loss)
    optimizer = torch.optim.Adam(
        [
            {"params": model.parameters(), "weight_decay": tc.weight_decay},
            {"params": balance.parameters(), "weight_decay": 0.0},
        ],
        lr=tc.lr,
    )
    frames = ds.float_frames()
    targets = torch.from_numpy(encode_targets(ds.poses, config.loss.rotation_repr)).float()
    windows = np.array(ds.windows())
    batch = min(tc.batch_size, len(windows))
    per_epoch = int(np.ceil(len(windows) / batch))
    steps = tc.steps if tc.epochs is None else tc.epochs * per_epoch
    chain = build_pose_chain_graph(windows.shape[1])
    scheduler = None
    if tc.schedule == "cosine" and steps > 0:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=steps)

    log_path = out_dir / LOG_NAME
    order: list[int] = []
    first_loss = last_loss = None
    started = time.perf_counter()
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "loss", "alpha", "beta", "gamma", "lambda"])
        model.train()
        for step in range(1, steps + 1):
            if len(order) < batch:
                order.extend(rng.permutation(len(windows)).tolist())
            idx, order = windows[order[:batch]], order[batch:]
            images = _to_images(augment_batch(frames[idx], tc.augment, rng))
            decoded = model.forward_levels(images)
            loss = total_loss(decoded, targets[idx], balance, chain, model.decode_layers, config.loss.norm).total
            loss = loss / batch
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if scheduler is not None:
                scheduler.step()
            last_loss = float(loss.detach())
            first_loss = last_loss if first_loss is None else first_loss
            if step == 1 or step % tc.log_every == 0 or step == steps:
                writer.writerow(
                    [step, f"{last_loss:.9g}"] + [f"{p.item():.9g}" for p in (balance.alpha, balance.beta, balance.gamma, balance.lam)]
                )
            if step % 100 == 0:
                log.info("step %d/%d loss %.4f", step, steps, last_loss)
    summary = {
        "steps": steps,
        "first_loss": first_loss,
        "final_loss": last_loss,
        "seed": tc.seed,
        "balance": {k: float(v) for k, v in balance.state_dict().items()},
    }
    save_checkpoint(out_dir / CHECKPOINT_NAME, model, summary)
    summary["wall_clock_s"] = time.perf_counter() - started
    return summary


@torch.no_grad()
def predict(model: PoseRegressor, ds: Dataset, chunk: int = 32, preset: str | None = None) -> np.ndarray:
    """Layer-L prediction for every frame, windows tiling the trajectory in order."""
    model.eval()
    frames = ds.float_frames()
    if preset:
        seed = ds.meta["seed"]
        frames = np.stack([apply_preset(f, preset, frame_seed(seed, i)) for i, f in enumerate(frames)]).astype(np.float32)
    windows = tiling_windows(len(frames), model.config.data.window_size)
    out = np.zeros((len(frames), 3 + (model.decoders["L"].out.out_features - 3)))
    for k in range(0, len(windows), chunk):
        group = np.array(windows[k : k + chunk])
        pred = model(_to_images(frames[group])).double().numpy()
        for w, rows in zip(group, pred):
            out[w] = rows
    return out


def report_from_predictions(pred: np.ndarray, ds: Dataset, representation: str, config: dict | None = None) -> EvalReport:
    d, q = decode_predictions(pred, representation)
    t_err, r_err = pose_errors(d, q, ds.poses[:, :3], quat_exp(ds.poses[:, 3:]))
    return EvalReport(
        float(np.mean(t_err)),
        float(np.median(t_err)),
        float(np.mean(r_err)),
        float(np.median(r_err)),
        [float(v) for v in t_err],
        [float(v) for v in r_err],
        config or {},
    )


def evaluate(checkpoint: str | Path, dataset: str | Path, preset: str | None = None) -> EvalReport:
    started = time.perf_counter()
    model, header = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    expected = model.config.data
    if list(ds.meta["image_size"]) != [expected.image_height, expected.image_width]:
        raise ValueError(f"dataset image size {ds.meta['image_size']} does not match checkpoint config")
    report = report_from_predictions(predict(model, ds, preset=preset), ds, model.rotation_repr, header["config"])
    report.wall_clock_s = time.perf_counter() - started
    return report


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.metrics(), indent=2, sort_keys=True) + "\n")


def toggle_overrides(toggle: str) -> list[str]:
    """Config overrides for one ablation toggle, e.g. ``no_diffusion`` or ``topology=grid``."""
    name, _, value = toggle.partition("=")
    if name not in ABLATION_TOGGLES:
        raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATION_TOGGLES}")
    if name in ("topology", "rotation_repr", "stage_placement") and not value:
        raise ValueError(f"toggle {name} needs a value, e.g. {name}=...")
    if name == "no_diffusion":
        return ["model.diffusion_stages=[]", "diffusion.vector_blocks=0"]
    if name == "no_feature_graph":
        return ["model.diffusion_stages=[]"]
    if name == "no_vector_graph":
        return ["diffusion.vector_blocks=0"]
    if name == "no_branched_decoder":
        return ["model.branched_decoder=false"]
    if name == "no_multilevel":
        return ["loss.decode_layers=[L]"]
    if name == "topology":
        return [f"graph.topology={value}"]
    if name == "rotation_repr":
        return [f"loss.rotation_repr={value}"]
    stages = [s for s in value.replace("+", ",").split(",") if s]
    return [f"model.diffusion_stages=[{','.join(stages)}]"]


def ablate(
    config: Config,
    toggles: list[str],
    train_dataset: str | Path,
    eval_datasets: dict[str, str | Path],
    out_dir: str | Path,
) -> list[dict]:
    """Train and evaluate the base config plus one variant per toggle; writes ``ablation.csv``."""
    out_dir = Path(out_dir)
    variants = [("full", [])] + [(t, toggle_overrides(t)) for t in toggles]
    rows = []
    for name, overrides in variants:
        cfg = config.with_overrides(overrides)
        run_dir = out_dir / name.replace("=", "-").replace(",", "+")
        train(cfg, train_dataset, run_dir)
        row = {"variant": name, "overrides": ";".join(overrides)}
        for split, path in eval_datasets.items():
            rep = evaluate(run_dir / CHECKPOINT_NAME, path)
            write_report(rep, run_dir / f"metrics_{split}.json")
            row[f"{split}_mean_t"] = rep.mean_translation_m
            row[f"{split}_median_t"] = rep.median_translation_m
            row[f"{split}_mean_r"] = rep.mean_rotation_deg
            row[f"{split}_median_r"] = rep.median_rotation_deg
        rows.append(row)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


@torch.no_grad()
def bench_frames(
    config: Config,
    frame_counts=(3, 5, 7, 9, 11),
    iterations: int = 100,
    warmup: int = 10,
    checkpoint: str | Path | None = None,
    dataset: str | Path | None = None,
    repeats: int = 5,
) -> list[dict]:
    """Inference iterations per second for one window of each frame count.

    Each count is timed ``repeats`` times over ``iterations`` forward passes,
    interleaved across counts, and the fastest repeat is reported (as timeit
    does): scheduler noise only ever slows a run down.
    """
    counts = list(frame_counts)
    if any(not 1 <= n <= 11 for n in counts):
        raise ValueError("frame counts must lie in [1, 11]")
    if checkpoint is not None:
        model, _ = load_checkpoint(checkpoint)
    else:
        torch.manual_seed(config.train.seed)
        model = PoseRegressor(config)
    model.eval()
    h, w = model.config.data.image_height, model.config.data.image_width
    gen = torch.Generator().manual_seed(0)
    inputs = {n: torch.rand(n, 3, h, w, generator=gen) for n in counts}
    for n in counts:
        for _ in range(warmup):
            model(inputs[n])
    best = {n: math.inf for n in counts}
    for _ in range(max(1, repeats)):
        for n in counts:
            start = time.perf_counter()
            for _ in range(iterations):
                model(inputs[n])
            best[n] = min(best[n], time.perf_counter() - start)
    rows = []
    for n in counts:
        row = {"frames": n, "iters_per_s": iterations / best[n]}
        if checkpoint is not None and dataset is not None:
            raw = model.config.to_dict()
            raw["data"]["window_size"] = n
            model.config = Config.from_dict(raw)
            ds = load_dataset(dataset)
            row["mean_error"] = report_from_predictions(predict(model, ds), ds, model.rotation_repr).mean_translation_m
        rows.append(row)
    return rows


def write_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


TRAJECTORY_COLUMNS = ("frame_id", "gt_x", "gt_y", "gt_z", "pred_x", "pred_y", "pred_z", "trans_err_m", "rot_err_deg")


def export_trajectory(checkpoint: str | Path, dataset: str | Path, out_csv: str | Path, out_png: str | Path | None = None) -> Path:
    model, _ = load_checkpoint(checkpoint)
    ds = load_dataset(dataset)
    pred = predict(model, ds)
    report = report_from_predictions(pred, ds, model.rotation_repr)
    with open(out_csv, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRAJECTORY_COLUMNS)
        for i in range(len(ds.poses)):
            writer.writerow(
                [i, *(f"{v:.9g}" for v in ds.poses[i, :3]), *(f"{v:.9g}" for v in pred[i, :3]),
                 f"{report.translation_errors[i]:.9g}", f"{report.rotation_errors[i]:.9g}"]
            )
    if out_png is None:
        out_png = Path(out_csv).with_suffix(".png")
    plot_trajectory_csv(out_csv, out_png)
    return Path(out_csv)


def plot_trajectory_csv(csv_path: str | Path, png_path: str | Path) -> Path:
    """Top-down plot of ground truth vs prediction, built from the exported CSV alone."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    gt = np.array([[float(r["gt_x"]), float(r["gt_y"])] for r in rows])
    pr = np.array([[float(r["pred_x"]), float(r["pred_y"])] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt[:, 0], gt[:, 1], color="tab:blue", linewidth=3, label="ground truth")
    ax.plot(pr[:, 0], pr[:, 1], color="tab:red", linewidth=1, label="prediction")
    ax.plot(gt[0, 0], gt[0, 1], marker="*", color="k", markersize=12, linestyle="none")
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="best")
    fig.savefig(png_path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return Path(png_path)
