"""Reference computations that materialise Kronecker products.

These are deliberately naive and only meant for tiny sizes (n, d <= 4 or
so). The verification suite and the tests compare the closed-form probes
against them; nothing else in the package calls into this module.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .linalg import frobenius_norm, kron, unvec, vec


def layer_operator(weight, aggregation) -> np.ndarray:
    """``W^T kron A``, the matrix with ``vec(A X W) = (W^T kron A) vec(X)``."""
    return kron(np.asarray(weight).T, aggregation)


def subspace_basis(v, d: int) -> np.ndarray:
    """``I_d kron v``."""
    return kron(np.eye(d), np.asarray(v, dtype=np.float64).reshape(-1, 1))


def propagate_vectorized(x, weight, aggregation) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return unvec(layer_operator(weight, aggregation) @ vec(x), *x.shape)


def amplification_ratio(weight, aggregation, basis_i, basis_j) -> float:
    """``||(W kron A)(I kron P_i)||_F / ||(W kron A)(I kron P_j)||_F`` by explicit products."""
    d = np.asarray(weight).shape[0]
    t = kron(weight, aggregation)
    num = frobenius_norm(t @ kron(np.eye(d), np.asarray(basis_i).reshape(len(aggregation), -1)))
    den = frobenius_norm(t @ kron(np.eye(d), np.asarray(basis_j).reshape(len(aggregation), -1)))
    return num / den


def dominance_ratios(aggregation, weights: Sequence[np.ndarray], eigenvectors, i: int) -> list[float]:
    """``||T_l..T_1 S_i||_F / max_p ||T_l..T_1 S_p||_F`` with every ``T_k`` formed explicitly."""
    d = np.asarray(weights[0]).shape[0]
    bases = [subspace_basis(eigenvectors[:, p], d) for p in range(eigenvectors.shape[1])]
    out = []
    for w in weights:
        t = kron(w, aggregation)
        bases = [t @ b for b in bases]
        norms = [frobenius_norm(b) for b in bases]
        out.append(norms[i] / max(norms))
    return out


def skp_operator(terms) -> np.ndarray:
    """``sum_i W_i^T kron A_i`` for ``(W_i, A_i)`` pairs."""
    return sum(kron(np.asarray(w).T, a) for w, a in terms)


def numeric_gradients(params, graph, x_in, targets, mask, loss_kind, step: float = 1e-5) -> dict:
    """Central differences of the training loss for every parameter entry."""
    from .training import loss_and_grad

    out = {}
    for name, arr in params.arrays().items():
        num = np.zeros_like(arr)
        for ix in np.ndindex(arr.shape):
            probe = arr.copy()
            probe[ix] += step
            up, _ = loss_and_grad(params.with_arrays({name: probe}), graph, x_in, targets, mask, loss_kind)
            probe[ix] -= 2 * step
            down, _ = loss_and_grad(params.with_arrays({name: probe}), graph, x_in, targets, mask, loss_kind)
            num[ix] = (up - down) / (2 * step)
        out[name] = num
    return out


def gradient_error(analytic: dict, numeric: dict, rel_tol: float = 1e-4, abs_floor: float = 1e-6) -> float:
    """Worst ``|a - n| / max(|n|, abs_floor / rel_tol)`` over all entries.

    A value at most ``rel_tol`` means every entry agrees to ``rel_tol``
    relative, or to ``abs_floor`` absolute for tiny gradients.
    """
    worst = 0.0
    scale = abs_floor / rel_tol
    for name, num in numeric.items():
        diff = np.abs(analytic[name] - num) / np.maximum(np.abs(num), scale)
        if diff.size:
            worst = max(worst, float(diff.max()))
    return worst


def binomial_interval_mass(n: int, p: float, lo: int, hi: int) -> float:
    """``P(lo <= Binomial(n, p) <= hi)`` by direct summation in log space."""
    from math import exp, lgamma, log

    total = 0.0
    for k in range(lo, hi + 1):
        log_pmf = lgamma(n + 1) - lgamma(k + 1) - lgamma(n - k + 1) + k * log(p) + (n - k) * log(1 - p)
        total += exp(log_pmf)
    return total


def reachability(n: int, edges) -> np.ndarray:
    """Transitive closure by Floyd-Warshall; ``r[i, j]`` is True when ``j`` is reachable from ``i``."""
    r = np.eye(n, dtype=bool)
    for s, d in edges:
        r[s, d] = True
    for k in range(n):
        r |= r[:, [k]] & r[[k], :]
    return r
