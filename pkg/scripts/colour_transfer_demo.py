"""Colour transfer with clipped-weight network maps.

Trains on a source/target pair (synthetic images unless paths are given),
applies the map to the training source and to a separate evaluation image,
and repeats the training against a target with a few outlier pixels, with
and without weight clipping.
"""

import argparse
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from catmap import colour, nnmap
from catmap.io import atomic_write_text


@dataclass
class Config:
    size: int = 64
    budget: int = 4096
    hidden: tuple = (32, 32)
    steps: int = 1000
    clipped_w: float = 0.5
    unclipped_w: float = 1e6
    outliers: int = 40
    seed: int = 0
    out_dir: str = "out/colour_transfer"


def synthetic(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    source = np.clip(np.stack([xx, yy, 0.5 * (1 - xx)], -1) + rng.normal(0, 0.03, (size, size, 3)), 0, 1)
    target = np.clip(rng.normal([0.85, 0.45, 0.25], 0.08, (size, size, 3)), 0, 1)
    evaluation = np.clip(np.stack([0.5 + 0.5 * np.sin(6 * xx), yy, xx * yy], -1), 0, 1)
    return source, target, evaluation


def train(cfg, source, target, w):
    sgd = nnmap.SgdConfig(64, 64, 0.02, 500.0, cfg.steps, cfg.seed)
    return colour.train_transfer(source, target, colour.TransferConfig(cfg.budget, cfg.hidden, w, True, sgd, cfg.seed))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--source")
    ap.add_argument("--target")
    ap.add_argument("--evaluation")
    ap.add_argument("--steps", type=int, default=Config.steps)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--out-dir", default=Config.out_dir)
    a = ap.parse_args()
    cfg = Config(steps=a.steps, seed=a.seed, out_dir=a.out_dir)
    rng = np.random.default_rng(cfg.seed)
    source, target, evaluation = synthetic(cfg.size, rng)
    if a.source:
        source = colour.read_rgb(a.source)
    if a.target:
        target = colour.read_rgb(a.target)
    if a.evaluation:
        evaluation = colour.read_rgb(a.evaluation)
    out = Path(cfg.out_dir)
    for name, img in (("source", source), ("target", target), ("evaluation", evaluation)):
        colour.write_rgb(out / f"{name}.png", img)

    with_outliers = target.copy()
    flat = with_outliers.reshape(-1, 3)
    flat[rng.choice(flat.shape[0], cfg.outliers, replace=False)] = [0.0, 0.1, 1.0]
    colour.write_rgb(out / "target_outliers.png", with_outliers)

    report = {}
    for tag, tgt, w in (("plain", target, cfg.clipped_w), ("outliers_clipped", with_outliers, cfg.clipped_w),
                        ("outliers_unclipped", with_outliers, cfg.unclipped_w)):
        model = train(cfg, source, tgt, w)
        for name, img in (("source", source), ("evaluation", evaluation)):
            colour.write_rgb(out / f"{tag}_{name}.png", colour.apply_map(model, img))
        X = source.reshape(-1, 3)
        report[tag] = {"w": w, "max_displacement": float(np.linalg.norm(model(X) - X, axis=1).max()),
                       "final_smoothed_loss": float(model.result.smoothed(100)[-1])}
        atomic_write_text(out / f"{tag}_loss.csv", model.result.log_csv())
        print(tag, report[tag])
    atomic_write_text(out / "report.json", json.dumps(report, indent=2))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
