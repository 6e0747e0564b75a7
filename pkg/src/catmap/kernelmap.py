"""Maps in a reproducing-kernel Hilbert space, fitted by (sub)gradient
descent on a regularised discrete OT objective.

By the representer reduction, minimising ``T_c(h # mu, nu) + lam |h|_H^2``
over the RKHS can be restricted to ``h = sum_k K(., x_k) u_k`` with ``x_k``
the atoms of ``mu``.  For a scalar kernel ``K(x, x') = k(x, x') I_d`` the
block Gram matrix is never formed: coefficients are stored as an ``(n, d)``
array ``U`` and ``K u`` is the product ``k_gram @ U``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .config import TOL
from .measure import DiscreteMeasure
from .otcore import SQEUCLIDEAN, CostFunction, solve_kantorovich


class KernelError(RuntimeError):
    pass


class DescentError(KernelError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class KernelSpec:
    """Scalar kernel ``k`` inducing ``K(x, x') = k(x, x') I_d``.

    Only the Gaussian ``exp(-|x - x'|^2 / (2 sigma2))`` is provided.
    """

    kind: str = "gaussian"
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind != "gaussian":
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be positive, got {self.sigma2!r}")

    def __call__(self, X, Z) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        sq = np.sum(X * X, axis=1)[:, None] + np.sum(Z * Z, axis=1)[None, :] - 2.0 * X @ Z.T
        return np.exp(-np.maximum(sq, 0.0) / (2.0 * self.sigma2))


def gram(spec: KernelSpec, atoms, jitter: float = TOL.gram_jitter) -> np.ndarray:
    """``n x n`` scalar Gram matrix; positive semidefiniteness is checked by
    a Cholesky factorisation of ``K + jitter I``."""
    X = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
    if X.shape[0] == 0:
        raise KernelError("gram needs at least one atom")
    K = spec(X, X)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    try:
        np.linalg.cholesky(K + jitter * np.eye(K.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"Gram matrix is not positive semidefinite up to jitter {jitter:g}") from exc
    return K


@dataclass(eq=False)
class KernelModel:
    """``g(x) = s x + sum_k k(x, x_k) u_k`` (the ``s x`` term only with
    ``offset``)."""

    centers: np.ndarray
    coefficients: np.ndarray
    lam: float
    spec: KernelSpec = field(default_factory=KernelSpec)
    offset: bool = False
    scale: float = 1.0
    _gram: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        U = np.asarray(self.coefficients, dtype=np.float64)
        n, d = self.centers.shape
        if U.size != n * d:
            raise KernelError(f"expected {n * d} coefficients, got {U.size}")
        self.coefficients = U.reshape(n, d)
        if not self.lam > 0:
            raise KernelError(f"lambda must be positive, got {self.lam!r}")
        if self._gram is None:
            self._gram = gram(self.spec, self.centers)

    @classmethod
    def zeros(cls, centers, lam: float, spec: KernelSpec = KernelSpec(), offset: bool = False,
              scale: float = 1.0) -> "KernelModel":
        C = np.atleast_2d(np.asarray(centers, dtype=np.float64))
        return cls(C, np.zeros_like(C), lam, spec, offset, scale)

    @property
    def gram(self) -> np.ndarray:
        return self._gram

    @property
    def u(self) -> np.ndarray:
        """Stacked ``nd`` coefficient vector."""
        return self.coefficients.ravel()

    def with_coefficients(self, U) -> "KernelModel":
        return replace(self, coefficients=np.asarray(U, dtype=np.float64).reshape(self.coefficients.shape))

    def values_at_centers(self) -> np.ndarray:
        F = self._gram @ self.coefficients
        if self.offset:
            F = F + self.scale * self.centers
        return F

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.centers.shape[1]:
            raise KernelError(f"points have dimension {X.shape[1]}, expected {self.centers.shape[1]}")
        F = self.spec(X, self.centers) @ self.coefficients
        if self.offset:
            F = F + self.scale * X
        return F[0] if single else F

    def to_dict(self) -> dict:
        return {
            "kernel": self.spec.kind,
            "sigma2": self.spec.sigma2,
            "lambda": self.lam,
            "offsetScale": self.scale if self.offset else None,
            "centers": self.centers.tolist(),
            "coefficients": self.coefficients.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "KernelModel":
        s = d.get("offsetScale")
        return cls(d["centers"], d["coefficients"], d["lambda"], KernelSpec(d.get("kernel", "gaussian"), d["sigma2"]),
                   s is not None, 1.0 if s is None else float(s))


def rkhs_norm_sq(model: KernelModel) -> float:
    """``u^T K u``, clipped at zero against round-off."""
    U = model.coefficients
    return max(0.0, float(np.sum(U * (model.gram @ U))))


def _check_source(model: KernelModel, mu: DiscreteMeasure):
    if mu.points.shape != model.centers.shape or not np.array_equal(mu.points, model.centers):
        raise KernelError("the model centres must be the atoms of the source measure")


@dataclass
class ObjectiveValue:
    value: float
    transport: float
    penalty: float
    plan: np.ndarray
    gradient: Optional[np.ndarray] = None  # (n, d), same layout as the coefficients


def evaluate_objective(model: KernelModel, mu: DiscreteMeasure, nu: DiscreteMeasure, c: CostFunction = SQEUCLIDEAN,
                       with_gradient: bool = False) -> ObjectiveValue:
    """``W(a, b, M(u)) + lam u^T K u`` and optionally one subgradient.

    The transport term is differentiated through an optimal plan (Danskin):
    with ``F = K U (+ s X)``, ``dW/dF_i = sum_j pi_ij grad_x c(F_i, y_j)`` and
    the chain rule gives ``K dW/dF + 2 lam K U``.
    """
    _check_source(model, mu)
    if nu.dim != model.centers.shape[1]:
        raise KernelError("target dimension differs from the map dimension")
    F = model.values_at_centers()
    M = c.matrix(F, nu.points)
    if not np.all(np.isfinite(M)):
        raise KernelError("cost matrix has non-finite entries")
    plan, W = solve_kantorovich(mu.weights, nu.weights, M)
    KU = model.gram @ model.coefficients
    pen = model.lam * max(0.0, float(np.sum(model.coefficients * KU)))
    grad = None
    if with_gradient:
        dF = c.grad_x(F, nu.points, plan.matrix)
        grad = model.gram @ dF + 2.0 * model.lam * KU
    return ObjectiveValue(W + pen, W, pen, plan.matrix, grad)


def objective(model: KernelModel, mu: DiscreteMeasure, nu: DiscreteMeasure, c: CostFunction = SQEUCLIDEAN) -> float:
    return evaluate_objective(model, mu, nu, c).value


@dataclass(frozen=True)
class DescentConfig:
    """Step sizes ``alpha_t = alpha0 / (1 + t / tau)`` for ``steps`` steps.

    ``alpha0=None`` picks ``1 / L_s`` with ``L_s`` a bound on the curvature
    of the objective for the squared Euclidean cost (see ``default_step``).
    """

    alpha0: Optional[float] = None
    tau: float = 100.0
    steps: int = 500

    def __post_init__(self):
        if (self.alpha0 is not None and not self.alpha0 > 0) or not self.tau > 0:
            raise ValueError("alpha0 and tau must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    def step_size(self, t: int, alpha0: Optional[float] = None) -> float:
        a0 = self.alpha0 if alpha0 is None else alpha0
        return a0 / (1.0 + t / self.tau)


def default_step(model: KernelModel, mu: DiscreteMeasure) -> float:
    """``1 / (2 max_i a_i |K|^2 + 2 lam |K|)``: for a fixed plan and the
    squared Euclidean cost this is the inverse Lipschitz constant of the
    gradient."""
    k = float(np.linalg.eigvalsh(model.gram)[-1])
    return 1.0 / (2.0 * float(mu.weights.max()) * k * k + 2.0 * model.lam * k)


@dataclass
class DescentResult:
    model: KernelModel
    trace: np.ndarray  # objective before each step, then at the final iterate
    best: KernelModel
    best_value: float


def descend(model: KernelModel, mu: DiscreteMeasure, nu: DiscreteMeasure, c: CostFunction = SQEUCLIDEAN,
            config: DescentConfig = DescentConfig()) -> DescentResult:
    """Plain subgradient descent on the coefficients.

    The objective is nonsmooth, so the best iterate seen is returned along
    with the last one.
    """
    alpha0 = default_step(model, mu) if config.alpha0 is None else config.alpha0
    trace = []
    best, best_val = model, np.inf
    for t in range(config.steps + 1):
        try:
            ov = evaluate_objective(model, mu, nu, c, with_gradient=t < config.steps)
        except KernelError as exc:
            raise DescentError(t, str(exc)) from exc
        trace.append(ov.value)
        if ov.value < best_val:
            best, best_val = model, ov.value
        if t == config.steps:
            break
        if not np.all(np.isfinite(ov.gradient)):
            raise DescentError(t, "non-finite subgradient")
        U = model.coefficients - config.step_size(t, alpha0) * ov.gradient
        if not np.all(np.isfinite(model.gram @ U)):
            raise DescentError(t, "iterate diverged; reduce alpha0")
        model = model.with_coefficients(U)
    return DescentResult(model, np.asarray(trace), best, float(best_val))


def fit_kernel_map(mu: DiscreteMeasure, nu: DiscreteMeasure, lam: float, spec: KernelSpec = KernelSpec(),
                   c: CostFunction = SQEUCLIDEAN, config: DescentConfig = DescentConfig(), offset: bool = True,
                   scale: float = 1.0, init_scale: float = 0.0, seed: Optional[int] = None) -> DescentResult:
    """Descent from ``u_0 = 0`` (or Gaussian with std ``init_scale``)."""
    model = KernelModel.zeros(mu.points, lam, spec, offset, scale)
    if init_scale > 0:
        rng = np.random.default_rng(seed)
        model = model.with_coefficients(init_scale * rng.standard_normal(model.coefficients.shape))
    return descend(model, mu, nu, c, config)
