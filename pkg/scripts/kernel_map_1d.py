"""Kernel maps g = I + h between two 1D Gaussian mixtures, over a grid of
bandwidths at fixed regularisation and a grid of regularisations at fixed
bandwidth."""

import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from catmap import datasets
from catmap.io import atomic_write_text
from catmap.kernelmap import DescentConfig, KernelSpec, fit_kernel_map

SOURCE = {"kind": "mixture", "weights": [0.3, 0.7],
          "components": [{"kind": "gaussian", "mean": [-2.0], "std": 0.5},
                         {"kind": "gaussian", "mean": [1.0], "std": 0.7}]}
TARGET = {"kind": "mixture", "weights": [0.5, 0.5],
          "components": [{"kind": "gaussian", "mean": [-1.0], "std": 0.4},
                         {"kind": "gaussian", "mean": [3.0], "std": 0.6}]}


@dataclass
class Config:
    n: int = 60
    m: int = 60
    fixed_lam: float = 0.01
    sigma2_grid: list = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    fixed_sigma2: float = 0.01
    lam_grid: list = field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0])
    steps: int = 500
    grid: int = 201
    seed: int = 0
    out_dir: str = "out/kernel_map_1d"


def run(cfg, mu, nu, lam, sigma2, xs):
    r = fit_kernel_map(mu, nu, lam, KernelSpec(sigma2=sigma2), config=DescentConfig(steps=cfg.steps))
    return r.best_value, r.best(xs[:, None])[:, 0]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=Config.n)
    ap.add_argument("--steps", type=int, default=Config.steps)
    ap.add_argument("--seed", type=int, default=Config.seed)
    ap.add_argument("--out-dir", default=Config.out_dir)
    a = ap.parse_args()
    cfg = Config(n=a.n, m=a.n, steps=a.steps, seed=a.seed, out_dir=a.out_dir)
    mu = datasets.empirical(SOURCE, cfg.n, cfg.seed)
    nu = datasets.empirical(TARGET, cfg.m, cfg.seed + 1)
    xs = np.linspace(-4, 4, cfg.grid)
    out = Path(cfg.out_dir)
    for tag, pairs in (("sigma2", [(cfg.fixed_lam, s) for s in cfg.sigma2_grid]),
                       ("lambda", [(l, cfg.fixed_sigma2) for l in cfg.lam_grid])):
        cols, summary = [], ["lambda,sigma2,objective\n"]
        for lam, s2 in pairs:
            val, g = run(cfg, mu, nu, lam, s2, xs)
            cols.append(g)
            summary.append(f"{lam!r},{s2!r},{val!r}\n")
            print(f"lambda={lam:g} sigma2={s2:g}: objective {val:.6f}")
        head = "x," + ",".join(f"g_{tag}_{(s2 if tag == 'sigma2' else lam):g}" for lam, s2 in pairs) + "\n"
        body = "".join(f"{x!r}," + ",".join(repr(c[i]) for c in cols) + "\n" for i, x in enumerate(xs))
        atomic_write_text(out / f"maps_by_{tag}.csv", head + body)
        atomic_write_text(out / f"objectives_by_{tag}.csv", "".join(summary))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
