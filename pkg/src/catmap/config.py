"""Numerical tolerances shared by every module."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    # measure construction
    weight_sum: float = 1e-9
    weight_renormalise: float = 1e-6
    marginal: float = 1e-8
    # value comparisons (absolute + relative)
    value_abs: float = 1e-9
    value_rel: float = 1e-9
    # cdf bookkeeping
    cdf_final: float = 1e-12
    # qcqp
    qcqp: float = 1e-7
    qcqp_infeasible: float = 1e-4
    # Taylor interpolation checks
    interpolable: float = 1e-9
    witness: float = 1e-8
    # gram jitter
    gram_jitter: float = 1e-10
    # 1D projection KKT residual
    projection_kkt: float = 1e-10


TOL = Tolerances()


def close(a: float, b: float, tol: Tolerances = TOL) -> bool:
    """Combined absolute/relative comparison used for value identities."""
    return abs(a - b) <= tol.value_abs + tol.value_rel * max(abs(a), abs(b))
