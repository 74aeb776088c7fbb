"""Command-line entry point: ``gdpose generate|train|eval|perturb|ablate|bench|export``."""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path

import click

from . import harness
from .config import Config, load_config
from .data import PRESETS, perturb_dataset, write_dataset


def data_root() -> Path:
    return Path(os.environ.get("GDP_DATA_DIR", "data"))


def resolve_dataset(path: str) -> Path:
    p = Path(path)
    if p.exists() or p.is_absolute():
        return p
    return data_root() / p


def _config(config_file, overrides) -> Config:
    return load_config(config_file, overrides)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


config_option = click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False), help="YAML/JSON config file.")
set_option = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Config override, repeatable.")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("out", required=False)
@config_option
@set_option
@click.option("--seed", type=int, help="Shortcut for --set data.seed=N.")
@click.option("--split", type=click.Choice(["train", "test"]), help="Shortcut for --set data.split=...")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default="clean", show_default=True)
def generate(out, config_file, overrides, seed, split, preset):
    """Render a synthetic dataset directory."""
    extra = list(overrides)
    if seed is not None:
        extra.append(f"data.seed={seed}")
    if split is not None:
        extra.append(f"data.split={split}")
    cfg = _config(config_file, extra)
    target = Path(out) if out else data_root() / f"{cfg.data.kind}-{cfg.data.split}"
    write_dataset(target, cfg.data, preset)
    click.echo(str(target))


@main.command()
@click.argument("dataset")
@click.argument("out_dir", type=click.Path(file_okay=False))
@config_option
@set_option
@click.option("--seed", type=int, help="Shortcut for --set train.seed=N.")
def train(dataset, out_dir, config_file, overrides, seed):
    """Train on DATASET, writing model.gdp, train_log.csv and summary.json to OUT_DIR."""
    extra = list(overrides) + ([f"train.seed={seed}"] if seed is not None else [])
    cfg = _config(config_file, extra)
    summary = harness.train(cfg, resolve_dataset(dataset), out_dir)
    wall = summary.pop("wall_clock_s")
    summary["config"] = cfg.to_dict()
    _write_json(Path(out_dir) / "summary.json", summary)
    _write_json(Path(out_dir) / "timing.json", {"wall_clock_s": wall})
    click.echo(f"final loss {summary['final_loss']:.6g} after {summary['steps']} steps")


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("dataset")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None, help="Corrupt frames on the fly.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Metrics JSON path.")
def evaluate(checkpoint, dataset, preset, out):
    """Mean/median translation (m) and rotation (deg) errors of CHECKPOINT on DATASET."""
    report = harness.evaluate(checkpoint, resolve_dataset(dataset), preset=preset)
    if out:
        harness.write_report(report, out)
    click.echo(
        f"translation mean {report.mean_translation_m:.4f} m / median {report.median_translation_m:.4f} m; "
        f"rotation mean {report.mean_rotation_deg:.4f} deg / median {report.median_rotation_deg:.4f} deg"
    )


@main.command()
@click.argument("dataset")
@click.option("--preset", type=click.Choice(sorted(set(PRESETS) - {"clean"})), required=True)
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Default: sibling <dataset>-<preset>.")
def perturb(dataset, preset, out):
    """Write a corrupted copy of DATASET."""
    src = resolve_dataset(dataset)
    dst = Path(out) if out else src.parent / f"{src.name}-{preset}"
    perturb_dataset(src, dst, preset)
    click.echo(str(dst))


@main.command()
@click.argument("train_dataset")
@click.option("--eval", "evals", multiple=True, metavar="NAME=DATASET", required=True, help="Evaluation split, repeatable.")
@click.option("--toggle", "toggles", multiple=True, help=f"One of {', '.join(harness.ABLATION_TOGGLES)} (value toggles as key=value).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@config_option
@set_option
def ablate(train_dataset, evals, toggles, out_dir, config_file, overrides):
    """Train/evaluate the base config and one variant per toggle; writes ablation.csv."""
    cfg = _config(config_file, overrides)
    eval_sets = {}
    for item in evals:
        name, sep, path = item.partition("=")
        if not sep:
            raise click.BadParameter(f"{item!r} is not NAME=DATASET", param_hint="--eval")
        eval_sets[name] = resolve_dataset(path)
    for t in toggles:
        harness.toggle_overrides(t)
    rows = harness.ablate(cfg, list(toggles), resolve_dataset(train_dataset), eval_sets, out_dir)
    _write_json(Path(out_dir) / "ablation.config.json", {"config": cfg.to_dict(), "toggles": list(toggles)})
    for row in rows:
        click.echo(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


@main.command()
@click.option("--frames", default="3,5,7,9,11", show_default=True, help="Comma-separated frame counts.")
@click.option("--iterations", default=100, show_default=True)
@click.option("--warmup", default=10, show_default=True)
@click.option("--repeats", default=5, show_default=True, help="Timed repeats per count; the fastest is kept.")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--dataset", default=None)
@click.option("--out", type=click.Path(dir_okay=False), default="bench.csv", show_default=True)
@config_option
@set_option
def bench(frames, iterations, warmup, repeats, checkpoint, dataset, out, config_file, overrides):
    """Inference throughput (iterations/s) per window frame count."""
    cfg = _config(config_file, overrides)
    counts = [int(x) for x in frames.split(",") if x.strip()]
    rows = harness.bench_frames(
        cfg, counts, iterations, warmup, checkpoint, resolve_dataset(dataset) if dataset else None, repeats
    )
    harness.write_csv(rows, out)
    _write_json(Path(out).with_suffix(".config.json"), {"config": cfg.to_dict(), "checkpoint": checkpoint})
    for row in rows:
        click.echo(f"{row['frames']:>2} frames: {row['iters_per_s']:.1f} iters/s")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("dataset")
@click.option("--out", type=click.Path(dir_okay=False), default="trajectory.csv", show_default=True)
@click.option("--plot", type=click.Path(dir_okay=False), default=None, help="Default: OUT with .png suffix.")
def export(checkpoint, dataset, out, plot):
    """Per-frame ground truth vs prediction CSV plus a top-down plot."""
    harness.export_trajectory(checkpoint, resolve_dataset(dataset), out, plot)
    click.echo(out)


if __name__ == "__main__":
    main()
