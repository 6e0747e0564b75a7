"""Monotone maps with slope at most L from U([-1, 1]) to
U([2, 4]) / 2 + U([6, 8]) / 2, for two values of L, against the OT map."""

import argparse
from dataclasses import dataclass
from pathlib import Path

from catmap.repro import lipschitz_levels_1d


@dataclass
class Config:
    n: int = 400
    m: int = 400
    levels: tuple = (2.0, 8.0)
    grid: int = 201
    out_dir: str = "out/lipschitz_levels_1d"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=Config.n)
    ap.add_argument("--out-dir", default=Config.out_dir)
    a = ap.parse_args()
    cfg = Config(n=a.n, m=a.n, out_dir=a.out_dir)
    rep = lipschitz_levels_1d(cfg.n, cfg.m, cfg.levels, cfg.grid)
    csv_path, _ = rep.write(Path(cfg.out_dir))
    for k, v in rep.summary.items():
        print(f"{k}: {v:.6f}")
    print(f"wrote {csv_path}")


if __name__ == "__main__":
    main()
