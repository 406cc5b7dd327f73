"""Layer propagation, trajectory metrics and subspace probes.

A layer maps ``X -> act(A X W)``. In vectorised form this is the single
Kronecker product ``(W^T kron A) vec(X)``; nothing here materialises it.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NonPositiveEntry, ZeroDenominator, ZeroState
from .linalg import SpectralDecomposition, as_matrix, frobenius_norm, numerical_rank, sym_eig

IDENTITY = "identity"
RELU = "relu"

UNDERFLOW = 1e-280
OVERFLOW = 1e280
TIE_TOL = 1e-9

# test hook: flips the sign of one off-diagonal aggregation entry in propagate
_mutate_propagate = False


def set_propagate_mutation(enabled: bool) -> None:
    global _mutate_propagate
    _mutate_propagate = bool(enabled)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    aggregation: np.ndarray
    weight: np.ndarray
    activation: str = IDENTITY

    def __post_init__(self):
        a, w = self.aggregation, self.weight
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"aggregation must be square, got {a.shape}")
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DimensionMismatch(f"weight must be square, got {w.shape}")
        if self.activation not in (IDENTITY, RELU):
            raise ValueError(f"unknown activation {self.activation!r}")


def propagate(x, layer: LayerSpec) -> np.ndarray:
    """One message-passing step ``act(A X W)``."""
    x = as_matrix(x, "x")
    a, w = layer.aggregation, layer.weight
    if x.shape != (a.shape[1], w.shape[0]):
        raise DimensionMismatch(
            f"state {x.shape} incompatible with aggregation {a.shape} and weight {w.shape}"
        )
    if _mutate_propagate and a.shape[0] > 1:
        a = a.copy()
        a[0, 1] = -a[0, 1]
    y = a @ x @ w
    if layer.activation == RELU:
        np.maximum(y, 0.0, out=y)
    return y


def dirichlet_energy(x, delta) -> float:
    """``tr(X^T Delta X)``."""
    x = as_matrix(x, "x")
    delta = as_matrix(delta, "delta")
    if delta.shape != (x.shape[0], x.shape[0]):
        raise DimensionMismatch(f"laplacian {delta.shape} does not match state {x.shape}")
    return float(np.sum(x * (delta @ x)))


def dirichlet_energy_edges(x, incidence) -> float:
    """Edge-sum Dirichlet energy ``||B X||_F^2`` from a scaled incidence matrix."""
    x = as_matrix(x, "x")
    y = np.asarray(incidence) @ x
    return float(np.sum(y * y))


def normalized_dirichlet(x, delta) -> float:
    """Dirichlet energy of ``X / ||X||_F``."""
    x = as_matrix(x, "x")
    norm_sq = float(np.sum(x * x))
    if norm_sq == 0.0:
        raise ZeroState("normalized energy of the zero state is undefined")
    return dirichlet_energy(x, delta) / norm_sq


def subspace_mass(x, spectral: SpectralDecomposition) -> np.ndarray:
    """``m_i = ||v_i^T X||_2`` for every eigenvector ``v_i``."""
    x = as_matrix(x, "x")
    v = spectral.eigenvectors
    if v.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"eigenbasis of size {v.shape[0]} vs state with {x.shape[0]} rows")
    coeffs = v.T @ x
    return np.sqrt(np.sum(coeffs * coeffs, axis=1))


# -- trajectories --------------------------------------------------------------


@dataclass
class LayerRecord:
    layer: int
    fro_norm_sq: float
    e_sym: Optional[float]
    e_rw: Optional[float]
    e_sym_norm: Optional[float]
    e_rw_norm: Optional[float]
    rank: int
    masses: Optional[list] = None
    log_scale: float = 0.0


@dataclass
class Trajectory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def csv_header(self) -> list[str]:
        cols = ["layer", "fro_norm_sq", "E_sym", "E_rw", "E_sym_norm", "E_rw_norm", "rank"]
        n_mass = max((len(r.masses) for r in self.records if r.masses is not None), default=0)
        return cols + [f"mass_{i + 1}" for i in range(n_mass)]

    def to_csv(self, extra: Optional[dict] = None) -> str:
        """CSV text; ``extra`` maps column name to one value per record."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = self.csv_header()
        extra = extra or {}
        writer.writerow(header + list(extra))
        n_mass = len(header) - 7
        for k, r in enumerate(self.records):
            masses = list(r.masses or [])
            row = [r.layer, r.fro_norm_sq, r.e_sym, r.e_rw, r.e_sym_norm, r.e_rw_norm, r.rank]
            row += masses + [None] * (n_mass - len(masses))
            row += [vals[k] for vals in extra.values()]
            writer.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = []
        for r in self.records:
            d = asdict(r)
            rows.append(
                {
                    "layer": d["layer"],
                    "fro_norm_sq": d["fro_norm_sq"],
                    "E_sym": d["e_sym"],
                    "E_rw": d["e_rw"],
                    "E_sym_norm": d["e_sym_norm"],
                    "E_rw_norm": d["e_rw_norm"],
                    "rank": d["rank"],
                    "masses": d["masses"],
                    "log_scale": d["log_scale"],
                }
            )
        return json.dumps({"records": rows}, indent=2)


def _scaled(value: float, log_factor: float) -> float:
    if log_factor == 0.0:
        return value
    if value == 0.0:
        return 0.0
    log_val = math.log(abs(value)) + log_factor
    if log_val > 709.0:
        return math.copysign(math.inf, value)
    return math.copysign(math.exp(log_val), value)


SAFE_LOW, SAFE_HIGH = 1e-100, 1e100


def _record(layer, x, log_scale, delta_sym, delta_rw, spectral, rank_tol, sym_incidence) -> LayerRecord:
    # states far from unit norm are measured after dividing by their norm and
    # the factor is folded back in log space, so squares cannot under/overflow
    norm = frobenius_norm(x)
    log_factor = log_scale
    if norm != 0.0 and not (SAFE_LOW <= norm <= SAFE_HIGH):
        x = x / norm
        log_factor += math.log(norm)
    norm_sq = float(np.sum(x * x))
    if sym_incidence is not None:
        e_sym = dirichlet_energy_edges(x, sym_incidence)
    elif delta_sym is not None:
        e_sym = dirichlet_energy(x, delta_sym)
    else:
        e_sym = None
    e_rw = dirichlet_energy(x, delta_rw) if delta_rw is not None else None
    zero = norm_sq == 0.0
    e_sym_norm = None if zero or e_sym is None else e_sym / norm_sq
    e_rw_norm = None if zero or e_rw is None else e_rw / norm_sq
    masses = None
    if spectral is not None:
        masses = [_scaled(float(m), log_factor) for m in subspace_mass(x, spectral)]
    two = 2.0 * log_factor
    return LayerRecord(
        layer=layer,
        fro_norm_sq=_scaled(norm_sq, two),
        e_sym=None if e_sym is None else _scaled(e_sym, two),
        e_rw=None if e_rw is None else _scaled(e_rw, two),
        e_sym_norm=e_sym_norm,
        e_rw_norm=e_rw_norm,
        rank=0 if zero else numerical_rank(x, rank_tol),
        masses=masses,
        log_scale=log_scale,
    )


def rollout(
    x0,
    layers: Sequence[LayerSpec],
    delta_sym=None,
    delta_rw=None,
    spectral: Optional[SpectralDecomposition] = None,
    rank_tol: float = 1e-8,
    sym_incidence=None,
) -> Trajectory:
    """Apply ``layers`` in order, recording metrics for the input and after every layer.

    If the state norm leaves ``[1e-280, 1e280]`` it is rescaled to unit norm
    and the natural-log factor is carried in ``log_scale``; raw metrics are
    reported on the true scale (possibly ``0`` or ``inf``), normalized ones
    are unaffected. When ``sym_incidence`` is given the symmetric energy
    uses the edge-sum form instead of ``delta_sym``.
    """
    x = as_matrix(x0, "x0").copy()
    log_scale = 0.0
    traj = Trajectory([_record(0, x, log_scale, delta_sym, delta_rw, spectral, rank_tol, sym_incidence)])
    for k, layer in enumerate(layers, start=1):
        x = propagate(x, layer)
        norm = frobenius_norm(x)
        if norm > 0.0 and not (UNDERFLOW <= norm <= OVERFLOW):
            x /= norm
            log_scale += math.log(norm)
        traj.records.append(_record(k, x, log_scale, delta_sym, delta_rw, spectral, rank_tol, sym_incidence))
    return traj


def eigen_expansion_norms(x0, weights: Sequence[np.ndarray], spectral: SpectralDecomposition) -> list[float]:
    """``||X_l||_F^2`` for a linear rollout with one shared symmetric aggregation.

    Uses ``X_l = sum_i lambda_i^l v_i (v_i^T X0 W_1 ... W_l)``, so
    ``||X_l||^2 = sum_i lambda_i^(2l) ||v_i^T X0 W_1 ... W_l||^2``.
    """
    x0 = as_matrix(x0, "x0")
    coeffs = spectral.eigenvectors.T @ x0
    lam = spectral.eigenvalues
    out = [float(np.sum(coeffs * coeffs))]
    for l, w in enumerate(weights, start=1):
        coeffs = coeffs @ w
        row_sq = np.sum(coeffs * coeffs, axis=1)
        out.append(float(np.sum(lam ** (2 * l) * row_sq)))
    return out


# -- subspace probes -----------------------------------------------------------


def _spectral(aggregation, spectral):
    return spectral if spectral is not None else sym_eig(aggregation)


def relative_amplification(aggregation, weight, i: int, j: int, spectral=None) -> float:
    """``||(W kron A)(I kron v_i)||_F / ||(W kron A)(I kron v_j)||_F`` for symmetric ``A``.

    Evaluated as ``||W||_F ||A v_i|| / (||W||_F ||A v_j||)`` using the
    Frobenius norm of a Kronecker product.
    """
    a = as_matrix(aggregation, "aggregation")
    w = as_matrix(weight, "weight")
    spec = _spectral(a, spectral)
    w_norm = frobenius_norm(w)
    num = w_norm * float(np.linalg.norm(a @ spec.vector(i)))
    den = w_norm * float(np.linalg.norm(a @ spec.vector(j)))
    if den == 0.0:
        raise ZeroDenominator(f"A v_{j} vanishes (or W = 0)")
    return num / den


def relative_amplification_general(aggregation, weight, basis_i, basis_j) -> float:
    """Same ratio for an arbitrary ``A`` and explicit bases: ``||A P_i||_F / ||A P_j||_F``."""
    a = as_matrix(aggregation, "aggregation")
    w_norm = frobenius_norm(weight)
    num = w_norm * frobenius_norm(a @ as_matrix(basis_i))
    den = w_norm * frobenius_norm(a @ as_matrix(basis_j))
    if den == 0.0:
        raise ZeroDenominator("A P_j vanishes (or W = 0)")
    return num / den


def check_invariance(aggregation, weight, i, trials: int = 50, seed=0, spectral=None) -> float:
    """Largest relative component of ``T z`` leaving ``Q_i`` over random ``z`` in ``Q_i``.

    ``i`` may be a single eigen-index or a collection, in which case ``z`` is
    drawn from the direct sum and the residual is measured outside that sum.
    """
    a = as_matrix(aggregation, "aggregation")
    w = as_matrix(weight, "weight")
    spec = _spectral(a, spectral)
    idx = [i] if np.isscalar(i) else list(i)
    basis = spec.eigenvectors[:, idx]
    layer = LayerSpec(a, w, IDENTITY)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z = basis @ rng.standard_normal((len(idx), w.shape[0]))
        y = propagate(z, layer)
        y_norm = frobenius_norm(y)
        if y_norm == 0.0:
            continue
        outside = y - basis @ (basis.T @ y)
        worst = max(worst, frobenius_norm(outside) / y_norm)
    return worst


def dominance_probe(aggregation, weight_seq: Sequence[np.ndarray], i: int, spectral=None) -> list[float]:
    """``r_l = ||T_l..T_1 S_i||_F / max_p ||T_l..T_1 S_p||_F`` for ``l = 1..L``.

    The feature transforms contribute the same factor to every subspace, so
    ``r_l = (|lambda_i| / |lambda_1|)^l``.
    """
    a = as_matrix(aggregation, "aggregation")
    spec = _spectral(a, spectral)
    d = None
    for w in weight_seq:
        w = as_matrix(w, "weight")
        if w.shape[0] != w.shape[1] or (d is not None and w.shape[0] != d):
            raise DimensionMismatch("all weights must share one square shape")
        d = w.shape[0]
    lam = np.abs(spec.eigenvalues)
    if lam[0] == 0.0:
        raise ZeroDenominator("aggregation is zero")
    rate = lam[i] / lam[0]
    return [float(rate**l) for l in range(1, len(weight_seq) + 1)]


def fit_geometric_rate(series: Iterable[float]) -> float:
    """Least-squares ratio ``q`` of a series behaving like ``c * q^k``."""
    y = np.asarray(list(series), dtype=np.float64)
    if y.size < 3:
        raise ValueError("need at least three points")
    if np.any(~(y > 0)):
        raise NonPositiveEntry("series must be strictly positive")
    k = np.arange(y.size, dtype=np.float64)
    slope = np.polyfit(k, np.log(y), 1)[0]
    return float(math.exp(slope))


def dominant_multiplicity(eigenvalues, rel_tol: float = TIE_TOL) -> int:
    lam = np.abs(np.asarray(eigenvalues))
    return int(np.sum(lam >= (1.0 - rel_tol) * lam[0]))


def rank_collapse_probe(aggregation, weight_seq, x0, tol: float = 1e-6, spectral=None):
    """Ranks of the normalized linear states and the predicted bound ``j``.

    Returns ``(ranks, j)`` where ``ranks[l]`` is the numerical rank after
    ``l`` layers (``ranks[0]`` is the input) and ``j`` counts eigenvalues
    whose magnitude ties with the largest one.
    """
    a = as_matrix(aggregation, "aggregation")
    spec = _spectral(a, spectral)
    j = dominant_multiplicity(spec.eigenvalues)
    layers = [LayerSpec(a, as_matrix(w), IDENTITY) for w in weight_seq]
    traj = rollout(x0, layers, rank_tol=tol)
    return traj.column("rank"), j
