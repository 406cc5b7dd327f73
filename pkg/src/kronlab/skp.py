"""Sum-of-Kronecker-products operators.

An operator with terms ``(W_i, A_i)`` acts on a state as
``X -> sum_i A_i X W_i``, i.e. ``vec(X) -> (sum_i W_i^T kron A_i) vec(X)``.
A single term is the ordinary message-passing layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BadGap, DimensionMismatch, NotUnitNorm, ZeroDenominator
from .linalg import as_matrix, format_matrix, frobenius_norm, orthonormal_complement, read_matrix, unvec, vec


@dataclass(frozen=True, eq=False)
class SkpOperator:
    terms: tuple  # of (weight d x d, aggregation n x n)

    def __post_init__(self):
        if not self.terms:
            raise ValueError("an SKP operator needs at least one term")
        w0, a0 = self.terms[0]
        for w, a in self.terms:
            if w.shape != w0.shape or w.shape[0] != w.shape[1]:
                raise DimensionMismatch("all weights must share one square shape")
            if a.shape != a0.shape or a.shape[0] != a.shape[1]:
                raise DimensionMismatch("all aggregations must share one square shape")

    @classmethod
    def from_pairs(cls, pairs) -> "SkpOperator":
        return cls(tuple((as_matrix(w, "weight"), as_matrix(a, "aggregation")) for w, a in pairs))

    @property
    def n(self) -> int:
        return self.terms[0][1].shape[0]

    @property
    def d(self) -> int:
        return self.terms[0][0].shape[0]

    def to_json(self) -> str:
        return json.dumps(
            {"terms": [{"weight": format_matrix(w), "aggregation": format_matrix(a)} for w, a in self.terms]},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SkpOperator":
        blob = json.loads(text)
        return cls(tuple((read_matrix(t["weight"]), read_matrix(t["aggregation"])) for t in blob["terms"]))


def skp_forward(x, op: SkpOperator) -> np.ndarray:
    """``sum_i A_i X W_i`` without forming any Kronecker product."""
    x = as_matrix(x, "x")
    if x.shape != (op.n, op.d):
        raise DimensionMismatch(f"state {x.shape} does not match operator ({op.n}, {op.d})")
    out = np.zeros_like(x)
    for w, a in op.terms:
        out += a @ x @ w
    return out


def apply_to_basis(op: SkpOperator, basis) -> np.ndarray:
    """Apply the operator to every column of an ``(n*d, k)`` basis of vectorised states."""
    basis = as_matrix(basis, "basis")
    if basis.shape[0] != op.n * op.d:
        raise DimensionMismatch(f"basis rows {basis.shape[0]} != n*d = {op.n * op.d}")
    cols = [vec(skp_forward(unvec(basis[:, k], op.n, op.d), op))[:, 0] for k in range(basis.shape[1])]
    return np.column_stack(cols)


def column_basis(columns) -> np.ndarray:
    """``[e_1 kron s_1, ..., e_d kron s_d]`` from an ``(n, d)`` matrix of columns ``s_i``."""
    s = as_matrix(columns, "columns")
    n, d = s.shape
    out = np.zeros((n * d, d))
    for i in range(d):
        out[i * n:(i + 1) * n, i] = s[:, i]
    return out


def build_amplifying_skp(targets, lambda_gap: tuple[float, float], tol: float = 1e-10) -> SkpOperator:
    """Operator amplifying target column ``i`` through its own term.

    Term ``i`` pairs ``W_i = diag(e_i)`` with
    ``A_i = l1 s_i s_i^T + l2 Q_i Q_i^T`` where ``Q_i`` completes ``s_i`` to an
    orthonormal basis, so ``A_i`` has eigenvalue ``l1`` once and ``l2``
    ``n - 1`` times.
    """
    s = as_matrix(targets, "targets")
    n, d = s.shape
    l1, l2 = map(float, lambda_gap)
    if not abs(l1) > abs(l2) > 0:
        raise BadGap("need |lambda_1| > |lambda_2| > 0")
    terms = []
    for i in range(d):
        col = s[:, i]
        if abs(np.linalg.norm(col) - 1.0) > tol:
            raise NotUnitNorm(f"target column {i} has norm {np.linalg.norm(col):.6g}")
        q = orthonormal_complement(col[:, None])
        a = l1 * np.outer(col, col) + l2 * (q @ q.T)
        w = np.zeros((d, d))
        w[i, i] = 1.0
        terms.append((w, a))
    return SkpOperator(tuple(terms))


def skp_amplification_ratio(op: SkpOperator, s, s_prime) -> float:
    """``(||T S||_F / ||T S'||_F) / (||S||_F / ||S'||_F)``; above 1 means ``S`` is amplified relative to ``S'``."""
    s = as_matrix(s, "s")
    s_prime = as_matrix(s_prime, "s_prime")
    s_norm, sp_norm = frobenius_norm(s), frobenius_norm(s_prime)
    if s_norm == 0.0 or sp_norm == 0.0:
        raise ZeroDenominator("basis must be nonzero")
    ts_prime = frobenius_norm(apply_to_basis(op, s_prime))
    if ts_prime == 0.0:
        raise ZeroDenominator("operator annihilates S'")
    return (frobenius_norm(apply_to_basis(op, s)) / ts_prime) / (s_norm / sp_norm)


def iterate_basis(op: SkpOperator, basis, steps: int) -> list[float]:
    """Frobenius norms of ``T^l basis`` for ``l = 0..steps``."""
    cur = as_matrix(basis, "basis")
    out = [frobenius_norm(cur)]
    for _ in range(steps):
        cur = apply_to_basis(op, cur)
        out.append(frobenius_norm(cur))
    return out


def random_orthogonal_probe(targets, rng: np.random.Generator) -> np.ndarray:
    """Columns drawn at random and projected orthogonal to every target column (unit norm)."""
    s = as_matrix(targets, "targets")
    n, d = s.shape
    q, _ = np.linalg.qr(s)
    cols = []
    for _ in range(d):
        v = rng.standard_normal(n)
        for _ in range(2):
            v -= q @ (q.T @ v)
        cols.append(v / np.linalg.norm(v))
    return np.column_stack(cols)


def kp_operator(weight, aggregation) -> SkpOperator:
    return SkpOperator.from_pairs([(weight, aggregation)])


def term_ratio(op: SkpOperator, basis_i, basis_j) -> float:
    """``||T P_i||_F / ||T P_j||_F`` for two bases given as vectorised columns."""
    num = frobenius_norm(apply_to_basis(op, basis_i))
    den = frobenius_norm(apply_to_basis(op, basis_j))
    if den == 0.0:
        raise ZeroDenominator("operator annihilates P_j")
    return num / den


def eigen_basis(v: np.ndarray, d: int) -> np.ndarray:
    """``I_d kron v`` as an ``(n*d, d)`` matrix."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    return np.kron(np.eye(d), v[:, None])


__all__: Sequence[str] = [
    "SkpOperator",
    "skp_forward",
    "apply_to_basis",
    "column_basis",
    "build_amplifying_skp",
    "skp_amplification_ratio",
    "iterate_basis",
    "random_orthogonal_probe",
    "kp_operator",
    "term_ratio",
    "eigen_basis",
]
