"""Projected SGD for g = I + h, h a 2-16-16-16-2 ReLU network with weights
in [-1/2, 1/2], from a standard Gaussian to a two-Gaussian mixture."""

import argparse
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from catmap import datasets
from catmap.io import atomic_write_json, atomic_write_text
from catmap.nnmap import forward, train
from catmap.repro import nn_field_setup


@dataclass
class Config:
    steps: int = 1000
    seed: int = 0
    samples: int = 2000
    grid: int = 21
    out_dir: str = "out/nn_map_2d"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=Config.steps)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--out-dir", default=Config.out_dir)
    a = ap.parse_args()
    cfg = Config(steps=a.steps, seed=a.seed, out_dir=a.out_dir)
    setup = nn_field_setup(cfg.seed, cfg.steps)
    src, tgt = setup.samplers()
    t0 = time.perf_counter()
    res = train(setup.net, src, tgt, config=setup.config)
    sm = res.smoothed(100)
    print(f"{cfg.steps} steps in {time.perf_counter() - t0:.1f} s; smoothed loss {sm[min(99, sm.size - 1)]:.3f} "
          f"-> {sm[-1]:.3f}")
    out = Path(cfg.out_dir)
    atomic_write_text(out / "loss.csv", res.log_csv())
    atomic_write_json(out / "model.json", setup.net.to_dict(res.theta))
    X = datasets.sample(setup.source, cfg.samples, np.random.default_rng(cfg.seed + 100))
    G = forward(setup.net, res.theta, X)
    Y = datasets.sample(setup.target, cfg.samples, np.random.default_rng(cfg.seed + 200))
    atomic_write_text(out / "samples.csv", "x0,x1,g0,g1,y0,y1\n" + "".join(
        ",".join(repr(float(v)) for v in (*x, *g, *y)) + "\n" for x, g, y in zip(X, G, Y)))
    ax = np.linspace(-3, 3, cfg.grid)
    P = np.array([[u, v] for u in ax for v in ax])
    Q = forward(setup.net, res.theta, P)
    atomic_write_text(out / "grid.csv", "x0,x1,g0,g1\n" + "".join(
        ",".join(repr(float(v)) for v in (*p, *q)) + "\n" for p, q in zip(P, Q)))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
