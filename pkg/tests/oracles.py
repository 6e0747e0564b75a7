"""Independent reference implementations used only by the tests."""

from itertools import combinations, product

import numpy as np


def transport_vertices(a, b):
    """All basic feasible solutions of the transportation polytope Pi(a, b).

    Brute force over subsets of ``n + m - 1`` cells: a subset is a basis when
    the equality constraints restricted to it are nonsingular; the basic
    solution is kept when it is nonnegative.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n, m = a.size, b.size
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    # drop one redundant column-sum row
    A, rhs = A[:-1], np.concatenate([a, b])[:-1]
    k = n + m - 1
    subsets = np.array(list(combinations(range(n * m), k)))
    B = A[:, subsets].transpose(1, 0, 2)  # (S, k, k)
    ok = np.abs(np.linalg.det(B)) > 1e-9
    subsets, B = subsets[ok], B[ok]
    x = np.linalg.solve(B, np.broadcast_to(rhs, (len(B), k))[..., None])[..., 0]
    feas = np.all(x >= -1e-12, axis=1)
    out = np.zeros((int(feas.sum()), n * m))
    rows = np.arange(out.shape[0])[:, None]
    out[rows, subsets[feas]] = np.maximum(x[feas], 0.0)
    return out.reshape(-1, n, m)


def brute_force_ot(a, b, M):
    V = transport_vertices(a, b)
    vals = np.einsum("kij,ij->k", V, M)
    k = int(np.argmin(vals))
    return V[k], float(vals[k])


def all_permutation_ot(X, Y):
    """Uniform n-vs-n squared-Euclidean OT by enumerating permutations."""
    from itertools import permutations

    n = len(X)
    M = ((X[:, None, :] - Y[None, :, :]) ** 2).sum(-1)
    return min(sum(M[i, p[i]] for i in range(n)) for p in permutations(range(n))) / n


def grid_points(lo, hi, k, d):
    axes = [np.linspace(lo, hi, k)] * d
    return np.array(list(product(*axes)))


def sinkhorn_coupling(a, b, K, iters=5000):
    """Dense coupling ``diag(u) K diag(v)`` with marginals ``a`` and ``b``
    (matrix scaling); used to produce generic couplings in Pi(a, b)."""
    u = np.ones_like(a)
    for _ in range(iters):
        v = b / (K.T @ u)
        u = a / (K @ v)
    P = u[:, None] * K * v[None, :]
    # absorb the last round-off into the row marginal exactly
    return P * (a / P.sum(axis=1))[:, None]


def random_couplings(rng, a, b, count):
    """``count`` couplings of ``a`` and ``b``: the product, scaled random
    kernels, and mixtures of them."""
    out = [np.outer(a, b)]
    while len(out) < count:
        K = np.exp(rng.normal(size=(a.size, b.size)) * rng.uniform(0.1, 5.0))
        out.append(sinkhorn_coupling(a, b, K))
    return out[:count]
