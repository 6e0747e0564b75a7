"""Synthetic distributions: uniforms on boxes, Gaussians and mixtures.

A distribution is described by a plain dict, e.g.
``{"kind": "mixture", "weights": [0.5, 0.5], "components": [...]}``, so
that it can be stored in a JSON config.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .measure import DiscreteMeasure


class SpecError(ValueError):
    pass


def _vec(v, name):
    a = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if a.ndim != 1 or not np.all(np.isfinite(a)):
        raise SpecError(f"{name} must be a finite vector")
    return a


def validate(spec: dict) -> int:
    """Check a distribution spec and return its dimension."""
    try:
        return _validate(spec)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError(f"malformed spec ({type(exc).__name__}: {exc})") from None


def _validate(spec: dict) -> int:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise SpecError("a distribution spec is a dict with a 'kind'")
    kind = spec["kind"]
    if kind == "uniform":
        lo, hi = _vec(spec["low"], "low"), _vec(spec["high"], "high")
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise SpecError("uniform needs low < high with equal shapes")
        return lo.size
    if kind == "gaussian":
        mean = _vec(spec.get("mean", [0.0]), "mean")
        if "cov" in spec:
            cov = np.asarray(spec["cov"], dtype=np.float64)
            if cov.shape != (mean.size, mean.size) or np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) < 0):
                raise SpecError("cov must be a positive semidefinite d x d matrix")
        elif "std" in spec and not float(spec["std"]) > 0:
            raise SpecError("std must be positive")
        return mean.size
    if kind == "mixture":
        w = _vec(spec["weights"], "weights")
        comps = spec["components"]
        if len(comps) != w.size or w.size == 0 or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise SpecError("mixture weights must be nonnegative, sum to 1 and match the components")
        dims = {_validate(c) for c in comps}
        if len(dims) != 1:
            raise SpecError("mixture components have different dimensions")
        return dims.pop()
    raise SpecError(f"unknown distribution kind {kind!r}")


def sample(spec: dict, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws, shape ``(n, d)``."""
    d = validate(spec)
    if n < 1:
        raise SpecError(f"sample size must be positive, got {n}")
    kind = spec["kind"]
    if kind == "uniform":
        return rng.uniform(_vec(spec["low"], "low"), _vec(spec["high"], "high"), size=(n, d))
    if kind == "gaussian":
        mean = _vec(spec.get("mean", [0.0]), "mean")
        if "cov" in spec:
            return rng.multivariate_normal(mean, np.asarray(spec["cov"], dtype=np.float64), size=n)
        return mean + float(spec.get("std", 1.0)) * rng.standard_normal((n, d))
    w = _vec(spec["weights"], "weights")
    counts = rng.multinomial(n, w / w.sum())
    parts = [sample(c, k, rng) for c, k in zip(spec["components"], counts) if k > 0]
    X = np.vstack(parts)
    return X[rng.permutation(n)]


def empirical(spec: dict, n: int, seed: Optional[int] = 0) -> DiscreteMeasure:
    return DiscreteMeasure.uniform(sample(spec, n, np.random.default_rng(seed)))


def quantile_1d(spec: dict, p) -> np.ndarray:
    """Quantile function of a 1D uniform or mixture of uniforms on disjoint
    ordered intervals."""
    p = np.asarray(p, dtype=np.float64)
    if validate(spec) != 1:
        raise SpecError("quantiles need a 1D spec")
    if spec["kind"] == "uniform":
        lo, hi = float(np.ravel(spec["low"])[0]), float(np.ravel(spec["high"])[0])
        return lo + (hi - lo) * p
    if spec["kind"] != "mixture" or any(c["kind"] != "uniform" for c in spec["components"]):
        raise SpecError("quantiles are implemented for uniforms and mixtures of uniforms")
    comps = sorted(zip(spec["weights"], spec["components"]), key=lambda t: float(np.ravel(t[1]["low"])[0]))
    w = np.array([c[0] for c in comps], dtype=np.float64)
    edges = np.concatenate([[0.0], np.cumsum(w)])
    out = np.empty_like(p)
    for k, (wk, c) in enumerate(comps):
        mask = (p >= edges[k]) & ((p < edges[k + 1]) if k < len(comps) - 1 else (p <= 1.0))
        out[mask] = quantile_1d(c, (p[mask] - edges[k]) / wk)
    return out


def midpoint_measure_1d(spec: dict, n: int) -> DiscreteMeasure:
    """Deterministic ``n``-atom discretisation at the quantiles
    ``(k - 1/2) / n``."""
    if n < 1:
        raise SpecError(f"number of atoms must be positive, got {n}")
    p = (np.arange(n) + 0.5) / n
    return DiscreteMeasure.uniform(quantile_1d(spec, p)[:, None])


def uniform_1d(lo: float, hi: float) -> dict:
    return {"kind": "uniform", "low": [lo], "high": [hi]}


def two_uniforms_1d(a, b, weights=(0.5, 0.5)) -> dict:
    return {"kind": "mixture", "weights": list(weights), "components": [uniform_1d(*a), uniform_1d(*b)]}


def two_gaussians_2d(separation: float = 3.0, std: float = 0.5) -> dict:
    return {
        "kind": "mixture",
        "weights": [0.5, 0.5],
        "components": [
            {"kind": "gaussian", "mean": [-separation, 0.0], "std": std},
            {"kind": "gaussian", "mean": [separation, 0.0], "std": std},
        ],
    }


STANDARD_GAUSSIAN_2D = {"kind": "gaussian", "mean": [0.0, 0.0], "std": 1.0}

# source and target of the 1D Lipschitz illustration
INTERVAL_SOURCE = uniform_1d(-1.0, 1.0)
TWO_INTERVALS_TARGET = two_uniforms_1d((2.0, 4.0), (6.0, 8.0))
