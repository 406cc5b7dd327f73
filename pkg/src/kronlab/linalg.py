"""Dense real linear algebra used by every other module.

Matrices are plain ``float64`` numpy arrays of shape ``(rows, cols)``.
The eigensolver is a cyclic Jacobi method and the SVD is derived from it,
so the spectral quantities used by the probes do not depend on LAPACK.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NotSymmetric, ParseError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-10
DEFAULT_RANK_TOL = 1e-8


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs sorted by decreasing magnitude; ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def vector(self, i: int) -> np.ndarray:
        return self.eigenvectors[:, i]


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.singular_values) @ self.v.T


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2 or a.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    return a


def kron(a, b) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    p, q = a.shape
    r, s = b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(p * r, q * s)


def vec(x) -> np.ndarray:
    """Stack the columns of ``x`` into an ``(rows*cols, 1)`` column."""
    x = as_matrix(x, "x")
    return x.reshape(-1, order="F").reshape(-1, 1).copy()


def unvec(v, rows: int, cols: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size != rows * cols:
        raise DimensionMismatch(f"cannot unvec length {v.size} into {rows}x{cols}")
    return v.reshape((rows, cols), order="F").copy()


def frobenius_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    peak = float(np.max(np.abs(x)))
    if peak == 0.0 or not math.isfinite(peak):
        return peak
    # scale first so the squares neither underflow nor overflow
    y = x / peak
    return peak * math.sqrt(float(np.sum(y * y)))


def _canonical_sign(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _sort_order(values: np.ndarray) -> list[int]:
    return sorted(range(len(values)), key=lambda k: (-abs(values[k]), -values[k], k))


def sym_eig(a, max_sweeps: int = JACOBI_MAX_SWEEPS, tol: float = JACOBI_TOL) -> SpectralDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back sorted by decreasing absolute value; ties are
    broken by the signed value (descending) and then by original position.
    Raises ``NotSymmetric`` if ``a`` is not symmetric to ``1e-10`` relative
    and ``NoConvergence`` if the off-diagonal mass does not fall below
    ``tol * ||a||_F`` within ``max_sweeps`` sweeps.
    """
    a = as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise DimensionMismatch(f"sym_eig needs a square matrix, got {a.shape}")
    scale = frobenius_norm(a)
    if scale == 0.0:
        return SpectralDecomposition(np.zeros(n), np.eye(n))
    if frobenius_norm(a - a.T) > SYMMETRY_TOL * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-10 relative")

    work = 0.5 * (a + a.T)
    vecs = np.eye(n)
    target = tol * scale
    for _ in range(max_sweeps):
        off = frobenius_norm(work - np.diag(np.diag(work)))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (work[q, q] - work[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                col_p = work[:, p].copy()
                col_q = work[:, q]
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :]
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                work[p, q] = work[q, p] = 0.0
                vp = vecs[:, p].copy()
                vq = vecs[:, q]
                vecs[:, p] = c * vp - s * vq
                vecs[:, q] = s * vp + c * vq
    else:
        off = frobenius_norm(work - np.diag(np.diag(work)))
        if off > target:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})")

    values = np.diag(work).copy()
    order = _sort_order(values)
    return SpectralDecomposition(values[order], _canonical_sign(vecs[:, order]))


def _complete_columns(basis: list[np.ndarray], dim: int, count: int) -> list[np.ndarray]:
    """Extend orthonormal ``basis`` to ``count`` columns using canonical vectors."""
    out = list(basis)
    for k in range(dim):
        if len(out) >= count:
            break
        cand = np.zeros(dim)
        cand[k] = 1.0
        for _ in range(2):
            for b in out:
                cand -= (b @ cand) * b
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            out.append(cand / norm)
    return out


def svd(w) -> SvdResult:
    """Thin SVD ``w = U diag(s) V^T`` built from ``sym_eig(w^T w)``.

    The left vectors come from an orthogonalised ``w V``. Singular values
    below about ``1e-7 * s[0]`` carry reduced relative accuracy because the
    Gram matrix squares the condition number.
    """
    w = as_matrix(w, "w")
    m, k = w.shape
    if m < k:
        t = svd(w.T)
        return SvdResult(t.v, t.singular_values, t.u)

    spec = sym_eig(w.T @ w)
    v = spec.eigenvectors
    b = w @ v
    floor = 1e-300
    u_cols: list[np.ndarray] = []
    sig = np.zeros(k)
    pending: list[int] = []
    for i in range(k):
        col = b[:, i].copy()
        for _ in range(2):
            for u in u_cols:
                col -= (u @ col) * u
        norm = float(np.linalg.norm(col))
        if norm <= floor:
            pending.append(i)
            u_cols.append(np.zeros(m))
            continue
        u_cols.append(col / norm)
        sig[i] = u_cols[-1] @ b[:, i]
    if pending:
        good = [u for i, u in enumerate(u_cols) if i not in pending]
        filled = _complete_columns(good, m, k)[len(good):]
        for i, col in zip(pending, filled):
            u_cols[i] = col
    u = np.column_stack(u_cols)
    order = sorted(range(k), key=lambda i: (-sig[i], i))
    return SvdResult(u[:, order], sig[order], v[:, order])


def spectral_norm(w) -> float:
    return float(svd(w).singular_values[0])


def numerical_rank(x, tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``tol * s_max`` (0 for the zero matrix)."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = as_matrix(x, "x")
    if frobenius_norm(x) == 0.0:
        return 0
    s = svd(x).singular_values
    return int(np.sum(s > tol * s[0]))


def orthonormal_complement(columns, tol: float = 1e-8) -> np.ndarray:
    """Columns completing the orthonormal set ``columns`` via Gram-Schmidt on canonical vectors."""
    columns = as_matrix(columns, "columns")
    n, k = columns.shape
    basis = [columns[:, i] for i in range(k)]
    out = []
    for j in range(n):
        cand = np.zeros(n)
        cand[j] = 1.0
        for _ in range(2):
            for b in basis + out:
                cand -= (b @ cand) * b
        norm = np.linalg.norm(cand)
        if norm > tol:
            out.append(cand / norm)
        if len(out) == n - k:
            break
    if not out:
        return np.zeros((n, 0))
    return np.column_stack(out)


def format_matrix(x) -> str:
    """Matrix text format: ``rows cols`` header then one line per row."""
    x = as_matrix(x)
    lines = [f"{x.shape[0]} {x.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in x]
    return "\n".join(lines) + "\n"


def write_matrix(x, stream: IO[str]) -> None:
    stream.write(format_matrix(x))


def read_matrix(stream: IO[str] | str) -> np.ndarray:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = [(no, ln.strip()) for no, ln in enumerate(stream, start=1)]
    lines = [(no, ln) for no, ln in lines if ln]
    if not lines:
        raise ParseError("empty matrix text")
    no, header = lines[0]
    parts = header.split()
    if len(parts) != 2:
        raise ParseError("header must be 'rows cols'", no)
    try:
        rows, cols = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError("header must hold two integers", no) from None
    if rows <= 0 or cols <= 0:
        raise ParseError("dimensions must be positive", no)
    body = lines[1:]
    if len(body) != rows:
        raise ParseError(f"expected {rows} rows, found {len(body)}", no)
    data = np.empty((rows, cols))
    for r, (no, ln) in enumerate(body):
        fields = ln.split()
        if len(fields) != cols:
            raise ParseError(f"expected {cols} values, found {len(fields)}", no)
        try:
            data[r] = [float(f) for f in fields]
        except ValueError:
            raise ParseError("non-numeric entry", no) from None
    if not np.all(np.isfinite(data)):
        raise ParseError("non-finite entry")
    return data


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR of a Gaussian with sign fix)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def random_symmetric(n: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, n))
    return 0.5 * (g + g.T)


def stack_columns(cols: Iterable[np.ndarray]) -> np.ndarray:
    return np.column_stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in cols])
