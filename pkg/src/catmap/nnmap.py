"""Feed-forward maps with box-constrained parameters, trained by minibatch
SGD on the discrete OT loss.

The network is ``h_n = a_n(W_n h_{n-1} + b_n)`` with ``h_0 = x``, optionally
plus an identity skip ``x`` added to the output (``g = I + h``).  Parameters
enter through the projection ``P(theta) = clip(theta, -w, w)``, so the network
is defined for every ``theta`` and the box constraint is part of the map.
Backpropagation is written out by hand.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .measure import DiscreteMeasure
from .otcore import SQEUCLIDEAN, CostFunction, solve_kantorovich


class NetworkError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    # relu'(0) = 0
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


ACTIVATIONS = ("relu", "tanh", "linear")


def project_params(theta, w: float) -> np.ndarray:
    """Orthogonal projection onto the box ``[-w, w]^p``."""
    if not w > 0:
        raise NetworkError(f"box radius must be positive, got {w!r}")
    return np.clip(np.asarray(theta, dtype=np.float64), -w, w)


@dataclass(frozen=True)
class NeuralMap:
    """Architecture: layer widths ``dims = (d_0, ..., d_N)``, one activation
    per layer, box radius ``w`` and an optional identity skip."""

    dims: tuple
    activations: tuple
    w: float = 0.5
    offset: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        acts = tuple(self.activations)
        if len(dims) < 2 or min(dims) < 1:
            raise NetworkError(f"invalid layer widths {dims}")
        if len(acts) != len(dims) - 1:
            raise NetworkError(f"{len(dims) - 1} activations expected, got {len(acts)}")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise NetworkError(f"unknown activation {bad[0]!r}")
        if self.offset and dims[0] != dims[-1]:
            raise NetworkError("an identity skip needs equal input and output widths")
        if not self.w > 0:
            raise NetworkError(f"box radius must be positive, got {self.w!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "activations", acts)

    @classmethod
    def mlp(cls, d_in: int, hidden, d_out: int, activation: str = "relu", w: float = 0.5,
            offset: bool = False) -> "NeuralMap":
        """Hidden layers share ``activation``; the output layer is linear."""
        hidden = tuple(hidden)
        return cls((d_in, *hidden, d_out), (activation,) * len(hidden) + ("linear",), w, offset)

    @property
    def n_params(self) -> int:
        return sum(o * i + o for i, o in zip(self.dims[:-1], self.dims[1:]))

    def _slices(self):
        out, k = [], 0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            out.append((slice(k, k + o * i), slice(k + o * i, k + o * i + o), (o, i)))
            k += o * i + o
        return out

    def unpack(self, theta):
        """Weight matrices and biases of ``P(theta)``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise NetworkError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        p = project_params(theta, self.w)
        return [(p[sw].reshape(shape), p[sb]) for sw, sb, shape in self._slices()]

    def pack(self, layers) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform weights within ``+-min(w, 1/sqrt(fan_in))``, zero biases."""
        layers = []
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            r = min(self.w, 1.0 / np.sqrt(i))
            layers.append((rng.uniform(-r, r, size=(o, i)), np.zeros(o)))
        return self.pack(layers)

    def lipschitz_bound(self) -> float:
        """Bound on the Lipschitz constant in ``x`` from the box alone:
        ``|W|_2 <= |W|_F <= w sqrt(d_out d_in)``, activations 1-Lipschitz."""
        k = 1.0
        for i, o in zip(self.dims[:-1], self.dims[1:]):
            k *= self.w * np.sqrt(i * o)
        return k + (1.0 if self.offset else 0.0)

    def to_dict(self, theta) -> dict:
        return {"dims": list(self.dims), "activations": list(self.activations), "w": self.w,
                "offset": self.offset, "theta": np.asarray(theta, dtype=np.float64).tolist()}

    @classmethod
    def from_dict(cls, d: dict):
        net = cls(tuple(d["dims"]), tuple(d["activations"]), float(d["w"]), bool(d["offset"]))
        return net, np.asarray(d["theta"], dtype=np.float64)


def _forward_cache(net: NeuralMap, theta, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.dims[0]:
        raise NetworkError(f"inputs must have shape (n, {net.dims[0]}), got {X.shape}")
    layers = net.unpack(theta)
    hs, zs = [X], []
    h = X
    for (W, b), act in zip(layers, net.activations):
        z = h @ W.T + b
        h = _act(act, z)
        zs.append(z)
        hs.append(h)
    out = h + X if net.offset else h
    return out, layers, hs, zs


def forward(net: NeuralMap, theta, X) -> np.ndarray:
    """``g_{P(theta)}(x)`` for each row of ``X`` (or a single vector)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        return _forward_cache(net, theta, X[None])[0][0]
    return _forward_cache(net, theta, X)[0]


def backward(net: NeuralMap, theta, X, d_out) -> np.ndarray:
    """Vector-Jacobian product ``sum_k d_out[k] . d g(x_k) / d theta``.

    Conventions: ``relu'(0) = 0``; the clip has derivative 1 strictly
    inside the box and 0 strictly outside; on the boundary it is 0 when the
    incoming gradient would push the coordinate out of the box and 1
    otherwise (both are elements of its Clarke subdifferential).
    """
    theta = np.asarray(theta, dtype=np.float64)
    _, layers, hs, zs = _forward_cache(net, theta, X)
    delta = np.asarray(d_out, dtype=np.float64)
    grads = []
    for n in range(len(layers) - 1, -1, -1):
        W, _ = layers[n]
        dz = delta * _act_grad(net.activations[n], zs[n])
        grads.append((dz.T @ hs[n], dz.sum(axis=0)))
        delta = dz @ W
    raw = net.pack(grads[::-1])
    w = net.w
    inside = np.abs(theta) < w
    # at theta_k = +w a descent step moves by -raw_k, outward iff raw_k < 0
    pass_up = (theta == w) & (raw > 0)
    pass_down = (theta == -w) & (raw < 0)
    return np.where(inside | pass_up | pass_down, raw, 0.0)


def minibatch_loss(net: NeuralMap, theta, X, Y, c: CostFunction = SQEUCLIDEAN) -> float:
    """``T_c`` between the uniform measures on ``h(theta, X)`` and ``Y``."""
    F = forward(net, theta, np.atleast_2d(X))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if F.shape[0] == 0 or Y.shape[0] == 0:
        raise NetworkError("batches must be nonempty")
    a = np.full(F.shape[0], 1.0 / F.shape[0])
    b = np.full(Y.shape[0], 1.0 / Y.shape[0])
    return solve_kantorovich(a, b, c.matrix(F, Y))[1]


def loss_and_subgradient(net: NeuralMap, theta, X, Y, c: CostFunction = SQEUCLIDEAN):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    F = forward(net, theta, X)
    a = np.full(F.shape[0], 1.0 / F.shape[0])
    b = np.full(Y.shape[0], 1.0 / Y.shape[0])
    plan, val = solve_kantorovich(a, b, c.matrix(F, Y))
    g = backward(net, theta, X, c.grad_x(F, Y, plan.matrix))
    return val, g


def sgd_subgradient(net: NeuralMap, theta, X, Y, c: CostFunction = SQEUCLIDEAN) -> np.ndarray:
    """Chain rule through one optimal minibatch plan."""
    g = loss_and_subgradient(net, theta, X, Y, c)[1]
    if not np.all(np.isfinite(g)):
        raise NetworkError("non-finite subgradient")
    return g


@dataclass(frozen=True)
class SgdConfig:
    """Batch sizes, steps ``alpha_t = alpha0 / (1 + t / tau)``, step count
    and seed."""

    batch_source: int = 64
    batch_target: int = 64
    alpha0: float = 0.05
    tau: float = 500.0
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.batch_source < 1 or self.batch_target < 1:
            raise ValueError("batch sizes must be positive")
        if not (self.alpha0 > 0 and self.tau > 0):
            raise ValueError("alpha0 and tau must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def step_size(self, t: int) -> float:
        return self.alpha0 / (1.0 + t / self.tau)


@dataclass
class TrainResult:
    theta: np.ndarray
    losses: np.ndarray
    step_sizes: np.ndarray
    config: SgdConfig = field(default_factory=SgdConfig)

    def smoothed(self, window: int = 100) -> np.ndarray:
        """Trailing moving average (shorter windows at the start)."""
        cs = np.concatenate([[0.0], np.cumsum(self.losses)])
        t = np.arange(1, self.losses.size + 1)
        lo = np.maximum(0, t - window)
        return (cs[t] - cs[lo]) / (t - lo)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["step", "loss", "step_size"])
        for k, (l, s) in enumerate(zip(self.losses.tolist(), self.step_sizes.tolist())):
            w.writerow([k, repr(l), repr(s)])
        return buf.getvalue()


def _sampler(mu: DiscreteMeasure, rng: np.random.Generator, size: int) -> np.ndarray:
    idx = rng.choice(mu.size, size=size, replace=True, p=mu.weights)
    return mu.points[idx]


def train(net: NeuralMap, mu, nu, c: CostFunction = SQEUCLIDEAN, config: SgdConfig = SgdConfig(),
          theta0: Optional[np.ndarray] = None, callback=None) -> TrainResult:
    """Projected minibatch SGD.

    ``mu`` and ``nu`` are discrete measures (batches drawn with replacement
    according to their weights) or callables ``(rng, size) -> array`` that
    draw fresh samples.  After each step the parameters are clipped back to
    the box, so every iterate lies in it.
    """
    rng = np.random.default_rng(config.seed)
    draw_x = mu if callable(mu) and not isinstance(mu, DiscreteMeasure) else (lambda r, k: _sampler(mu, r, k))
    draw_y = nu if callable(nu) and not isinstance(nu, DiscreteMeasure) else (lambda r, k: _sampler(nu, r, k))
    theta = net.init_params(rng) if theta0 is None else project_params(theta0, net.w)
    losses, steps = np.empty(config.steps), np.empty(config.steps)
    for t in range(config.steps):
        X = np.atleast_2d(draw_x(rng, config.batch_source))
        Y = np.atleast_2d(draw_y(rng, config.batch_target))
        val, g = loss_and_subgradient(net, theta, X, Y, c)
        if not np.all(np.isfinite(g)):
            raise TrainingError(t, "non-finite subgradient")
        alpha = config.step_size(t)
        theta = project_params(theta - alpha * g, net.w)
        losses[t], steps[t] = val, alpha
        if callback is not None:
            callback(t, theta, val)
    return TrainResult(theta, losses, steps, config)


def config_dict(config: SgdConfig) -> dict:
    return asdict(config)


def model_json(net: NeuralMap, theta) -> str:
    return json.dumps(net.to_dict(theta))
