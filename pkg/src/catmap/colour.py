"""Colour transfer: learn a map between RGB colour clouds and apply it
per pixel.

Images are 8-bit RGB PNGs with channel values mapped linearly to
``[0, 1]``.  A map is trained on subsampled colour clouds and then applied
to every pixel of any image; outputs are clamped to ``[0, 1]`` and rounded
back to 8 bits.
"""

from __future__ import annotations

import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import nnmap
from .cvxgrad import TaylorWitness, evaluate
from .io import atomic_write_bytes
from .kernelmap import KernelModel
from .measure import DiscreteMeasure


class ImageError(ValueError):
    pass


def read_rgb(path) -> np.ndarray:
    """``(h, w, 3)`` float array in ``[0, 1]``; rejects anything but 8-bit
    RGB."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != "RGB":
                raise ImageError(f"{path}: expected an 8-bit RGB image, got mode {im.mode!r}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageError(f"{path}: unreadable image ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_rgb(path, img) -> Path:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img), mode="RGB").save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())


def colour_cloud(img, budget: int = 4096, seed: int = 0) -> DiscreteMeasure:
    """Uniform measure on ``min(budget, h w)`` pixels drawn without
    replacement."""
    P = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    if budget < 1:
        raise ValueError("pixel budget must be positive")
    if P.shape[0] > budget:
        P = P[np.sort(np.random.default_rng(seed).choice(P.shape[0], size=budget, replace=False))]
    return DiscreteMeasure(P, np.full(P.shape[0], 1.0 / P.shape[0]))


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CATMAP_THREADS", "1")))
    except ValueError:
        return 1


def apply_map(g: Callable[[np.ndarray], np.ndarray], img, chunk: int = 16384) -> np.ndarray:
    """``clip(g(pixel), 0, 1)`` for every pixel, in chunks across
    ``CATMAP_THREADS`` workers."""
    img = np.asarray(img, dtype=np.float64)
    P = img.reshape(-1, 3)
    parts = [P[k:k + chunk] for k in range(0, P.shape[0], chunk)]
    workers = _threads()
    if workers == 1 or len(parts) == 1:
        outs = [g(p) for p in parts]
    else:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(g, parts))
    out = np.vstack(outs) if outs else np.zeros((0, 3))
    if out.shape != P.shape or not np.all(np.isfinite(out)):
        raise ValueError("the map must return one finite colour per pixel")
    return np.clip(out, 0.0, 1.0).reshape(img.shape)


def identity_map(X) -> np.ndarray:
    return np.array(X, dtype=np.float64, copy=True)


def map_from_dict(d: dict) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorised map from a saved model: ``{"type": "identity"}``, a neural
    map, a kernel map or a Taylor witness (evaluated through its upper
    bounding potential, one small QCQP per pixel)."""
    kind = d.get("type")
    if kind == "identity":
        return identity_map
    if "dims" in d:
        net, theta = nnmap.NeuralMap.from_dict(d)
        return lambda X: nnmap.forward(net, theta, X)
    if "kernel" in d:
        return KernelModel.from_dict(d)
    if "atoms" in d:
        wit = TaylorWitness.from_dict(d)
        if np.unique(wit.cells).size > 1:
            raise ValueError("a witness with several cells needs a partition rule for new points")
        return lambda X: evaluate(wit, X)
    raise ValueError("unrecognised model description")


def load_map(path) -> Callable[[np.ndarray], np.ndarray]:
    with open(path) as fh:
        return map_from_dict(json.load(fh))


@dataclass(frozen=True)
class TransferConfig:
    """Training settings.  The pixel budget and network size are our own
    defaults; ``DEFAULT_FIELDS`` marks them in output metadata."""

    budget: int = 4096
    hidden: tuple = (32, 32)
    w: float = 0.5
    offset: bool = True
    sgd: nnmap.SgdConfig = field(default_factory=lambda: nnmap.SgdConfig(batch_source=64, batch_target=64, alpha0=0.02,
                                                                         tau=500.0, steps=1000))
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_FIELDS = ("budget", "hidden", "w", "sgd")


@dataclass
class TransferModel:
    net: nnmap.NeuralMap
    theta: np.ndarray
    result: nnmap.TrainResult

    def __call__(self, X) -> np.ndarray:
        return nnmap.forward(self.net, self.theta, X)

    def to_dict(self) -> dict:
        return self.net.to_dict(self.theta)


def train_transfer(source, target, config: TransferConfig = TransferConfig()) -> TransferModel:
    """Fit a clipped-weight network from the source colour cloud to the
    target one (squared Euclidean cost)."""
    mu = colour_cloud(source, config.budget, config.seed)
    nu = colour_cloud(target, config.budget, config.seed + 1)
    net = nnmap.NeuralMap.mlp(3, config.hidden, 3, "relu", config.w, config.offset)
    res = nnmap.train(net, mu, nu, config=config.sgd)
    return TransferModel(net, res.theta, res)
