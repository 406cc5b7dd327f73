"""Named numerical checks of the subspace, over-smoothing and rank-collapse results.

Each check draws from its own RNG stream derived from the suite seed and
the check name, so checks are reproducible and independent of each other.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import oracles
from .dynamics import (
    IDENTITY,
    RELU,
    LayerSpec,
    check_invariance,
    dominance_probe,
    dominant_multiplicity,
    eigen_expansion_norms,
    fit_geometric_rate,
    propagate,
    rank_collapse_probe,
    relative_amplification,
    relative_amplification_general,
    rollout,
    subspace_mass,
)
from .graph import (
    Graph,
    RandomWalk,
    RowStochastic,
    aggregation_matrix,
    erdos_renyi,
    laplacian,
    largest_scc,
    sym_incidence,
    sym_normalized,
)
from .linalg import (
    frobenius_norm,
    kron,
    random_orthogonal,
    random_symmetric,
    spectral_norm,
    svd,
    sym_eig,
    vec,
)
from .skp import (
    SkpOperator,
    build_amplifying_skp,
    column_basis,
    iterate_basis,
    random_orthogonal_probe,
    skp_amplification_ratio,
    term_ratio,
)
from .training import CE, FAMILIES, init_params, loss_and_grad

LE = "<="
GE = ">="

# protocol constants shared with the acceptance tests
RATE_GRAPHS = 5
RATE_NODES = 20
RATE_EDGE_PROB = 0.3
RATE_WIDTH = 4
RATE_FIRST, RATE_LAST = 10, 40
RATE_TOL = 0.10
RW_LAYERS = 80
RW_TOL = 1e-6
RANK_LAYERS = 60
RANK_TOL = 1e-6
SKP_PROBES = 1000
SKP_ROUNDING = 1e-12


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    comparison: str
    passed: bool


def _result(name: str, value: float, tolerance: float, comparison: str = LE) -> CheckResult:
    value = float(value)
    ok = value <= tolerance if comparison == LE else value >= tolerance
    return CheckResult(name, value, float(tolerance), comparison, bool(ok and np.isfinite(value)))


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def connected_er(n: int, p: float, rng, non_bipartite: bool = True) -> Graph:
    """ER graph redrawn until connected (and, optionally, not bipartite)."""
    for _ in range(1000):
        g = erdos_renyi(n, p, rng)
        if not g.is_connected():
            continue
        if non_bipartite and sym_eig(sym_normalized(g)).eigenvalues[-1] <= -1 + 1e-9:
            continue
        return g
    raise RuntimeError("could not draw a suitable graph")


def gaussian_weights(rng, d: int, count: int) -> list[np.ndarray]:
    """``count`` matrices with entries ``N(0, 1/d)``."""
    return [rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)) for _ in range(count)]


# -- individual checks ---------------------------------------------------------


def check_mixed_product(rng) -> float:
    worst = 0.0
    for _ in range(20):
        n, d = rng.integers(2, 7, size=2)
        a, x, w = rng.standard_normal((n, n)), rng.standard_normal((n, d)), rng.standard_normal((d, d))
        worst = max(worst, _rel(vec(a @ x @ w), oracles.layer_operator(w, a) @ vec(x)))
    return worst


def check_sym_eig(rng) -> float:
    worst = 0.0
    for n in (3, 7, 12):
        a = random_symmetric(n, rng)
        s = sym_eig(a)
        v, lam = s.eigenvectors, s.eigenvalues
        worst = max(
            worst,
            frobenius_norm(v @ np.diag(lam) @ v.T - a) / frobenius_norm(a),
            frobenius_norm(v.T @ v - np.eye(n)),
        )
    return worst


def check_svd(rng) -> float:
    worst = 0.0
    for m, k in ((7, 5), (4, 9), (6, 6)):
        w = rng.standard_normal((m, k))
        res = svd(w)
        worst = max(
            worst,
            frobenius_norm(res.reconstruct() - w) / frobenius_norm(w),
            abs(spectral_norm(w) - np.linalg.norm(w, 2)) / np.linalg.norm(w, 2),
        )
    return worst


def check_subspace_invariance(rng, trials: int = 100) -> float:
    worst = 0.0
    for t in range(trials):
        n, d = int(rng.integers(2, 11)), int(rng.integers(1, 7))
        a = random_symmetric(n, rng)
        w = rng.standard_normal((d, d))
        i = int(rng.integers(n))
        worst = max(worst, check_invariance(a, w, i, trials=5, seed=int(rng.integers(2**31))))
    return worst


def amplification_via_propagate(a, w, v_i, v_j) -> float:
    """``||T S_i||_F / ||T S_j||_F`` with ``T S`` evaluated column by column through ``propagate``."""
    layer = LayerSpec(a, w, IDENTITY)
    d = w.shape[0]

    def mass(v):
        total = 0.0
        for k in range(d):
            x = np.zeros((len(v), d))
            x[:, k] = v
            total += frobenius_norm(propagate(x, layer)) ** 2
        return np.sqrt(total)

    return mass(v_i) / mass(v_j)


def check_fixed_amplification(rng, trials: int = 100) -> float:
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(2, 13)), int(rng.integers(1, 9))
        a = random_symmetric(n, rng)
        w = rng.standard_normal((d, d))
        i, j = rng.choice(n, size=2, replace=False)
        spec = sym_eig(a)
        lam = spec.eigenvalues
        expected = abs(lam[i]) / abs(lam[j])
        got = relative_amplification(a, w, int(i), int(j), spectral=spec)
        routed = amplification_via_propagate(a, w, spec.vector(int(i)), spec.vector(int(j)))
        worst = max(worst, _rel(got, expected), _rel(routed, expected))
    return worst


def check_dominance_oracle(rng, trials: int = 20, layers: int = 6) -> float:
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(2, 5)), int(rng.integers(1, 5))
        a = random_symmetric(n, rng)
        spec = sym_eig(a)
        ws = [rng.standard_normal((d, d)) for _ in range(layers)]
        i = int(rng.integers(n))
        fast = dominance_probe(a, ws, i, spectral=spec)
        slow = oracles.dominance_ratios(a, ws, spec.eigenvectors, i)
        worst = max(worst, float(np.max(np.abs(np.array(fast) - np.array(slow)))))
    return worst


def check_ratio_weight_independence(rng, trials: int = 20) -> float:
    worst = 0.0
    for _ in range(trials):
        n, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        q, r = int(rng.integers(1, n + 1)), int(rng.integers(1, n + 1))
        a = rng.standard_normal((n, n))
        p_i, p_j = rng.standard_normal((n, q)), rng.standard_normal((n, r))
        expected = frobenius_norm(a @ p_i) / frobenius_norm(a @ p_j)
        for _ in range(2):
            w = rng.standard_normal((d, d))
            worst = max(
                worst,
                _rel(relative_amplification_general(a, w, p_i, p_j), expected),
                _rel(oracles.amplification_ratio(w, a, p_i, p_j), expected),
            )
    return worst


def check_relu_norm_bound(rng, instances: int = 200) -> float:
    """Largest ``||relu(A X W)||_F - sigma_1(W) ||X||_F``; non-positive means the bound holds."""
    worst = -np.inf
    for _ in range(instances):
        g = largest_scc(erdos_renyi(int(rng.integers(4, 16)), 0.4, rng))
        if g.n < 2:
            continue
        d = int(rng.integers(1, 7))
        a = sym_normalized(g)
        x = rng.standard_normal((g.n, d))
        w = rng.standard_normal((d, d)) * rng.uniform(0.1, 3.0)
        y = propagate(x, LayerSpec(a, w, RELU))
        worst = max(worst, frobenius_norm(y) - spectral_norm(w) * frobenius_norm(x))
    return worst


def check_energy_bound(rng, instances: int = 100) -> float:
    """Largest ``E(act(A X W)) / (lambda^2 sigma_1^2 E(X)) - 1`` over linear and ReLU layers.

    ``lambda`` is the largest magnitude among the non-dominant eigenvalues of ``A``.
    Every other instance projects ``X`` off the dominant eigenvector first.
    """
    worst = -np.inf
    for k in range(instances):
        g = largest_scc(erdos_renyi(int(rng.integers(4, 16)), 0.4, rng))
        if g.n < 3:
            continue
        d = int(rng.integers(1, 7))
        a = sym_normalized(g)
        b = sym_incidence(g)
        spec = sym_eig(a)
        lam = spec.eigenvalues
        x = rng.standard_normal((g.n, d))
        if k % 2:
            v1 = spec.vector(0)
            x -= np.outer(v1, v1 @ x)
        w = rng.standard_normal((d, d))
        energy = frobenius_norm(b @ x) ** 2
        bound = lam[1] ** 2 * spectral_norm(w) ** 2 * energy
        for act in (IDENTITY, RELU):
            y = propagate(x, LayerSpec(a, w, act))
            worst = max(worst, frobenius_norm(b @ y) ** 2 / bound - 1.0)
    return worst


def rate_errors(seed: int, graphs: int = RATE_GRAPHS, d: int = RATE_WIDTH) -> list[float]:
    """Relative error of the fitted normalized-energy rate against ``(lambda_2 / lambda_1)^2`` per graph."""
    out = []
    for k in range(graphs):
        rng = np.random.default_rng([seed, k])
        g = connected_er(RATE_NODES, RATE_EDGE_PROB, rng)
        a = sym_normalized(g)
        lam = sym_eig(a).eigenvalues
        expected = (lam[1] / lam[0]) ** 2
        x0 = rng.standard_normal((g.n, d))
        layers = [LayerSpec(a, w, IDENTITY) for w in gaussian_weights(rng, d, RATE_LAST)]
        traj = rollout(x0, layers, sym_incidence=sym_incidence(g))
        series = traj.column("e_sym_norm")[RATE_FIRST:RATE_LAST + 1]
        out.append(abs(fit_geometric_rate(series) - expected) / expected)
    return out


def rw_final_energies(seed: int, runs: int = 5, d: int = RATE_WIDTH, layers: int = RW_LAYERS) -> list[float]:
    """Final ``|E_rw(X / ||X||)|`` after layers with a fresh softmax aggregation each."""
    out = []
    for k in range(runs):
        rng = np.random.default_rng([seed, k])
        g = connected_er(RATE_NODES, RATE_EDGE_PROB, rng, non_bipartite=False)
        m = len(g.message_edges())
        specs = []
        for w in gaussian_weights(rng, d, layers):
            a = aggregation_matrix(g, RowStochastic(rng.standard_normal(m)))
            specs.append(LayerSpec(a, w, IDENTITY))
        traj = rollout(rng.standard_normal((g.n, d)), specs, delta_rw=laplacian(g, RandomWalk()))
        out.append(abs(traj.records[-1].e_rw_norm))
    return out


def rank_one_ranks(seed: int, runs: int = 5, d: int = RATE_WIDTH) -> list[tuple[int, int]]:
    """``(final rank, dominant multiplicity)`` of deep linear rollouts on random graphs."""
    out = []
    for k in range(runs):
        rng = np.random.default_rng([seed, k])
        g = connected_er(RATE_NODES, RATE_EDGE_PROB, rng)
        a = sym_normalized(g)
        ranks, j = rank_collapse_probe(a, gaussian_weights(rng, d, RANK_LAYERS),
                                       rng.standard_normal((g.n, d)), tol=RANK_TOL)
        out.append((ranks[-1], j))
    return out


def tied_spectrum_rank(rng, n: int = 10, d: int = 4, weights=None) -> tuple[int, int]:
    """Final rank and ``j`` for a diagonal aggregation with eigenvalues ``1, -1, ...`` (rest below 0.5)."""
    a = np.diag(np.concatenate([[1.0, -1.0], rng.uniform(-0.5, 0.5, n - 2)]))
    if weights is None:
        weights = gaussian_weights(rng, d, RANK_LAYERS)
    ranks, j = rank_collapse_probe(a, weights, rng.standard_normal((n, d)), tol=RANK_TOL)
    return ranks[-1], j


def skp_ratio_min(rng, n: int = 8, d: int = 3, probes: int = SKP_PROBES) -> float:
    targets = random_orthogonal(n, rng)[:, :d]
    op = build_amplifying_skp(targets, (2.0, 1.0))
    s = column_basis(targets)
    return min(skp_amplification_ratio(op, s, column_basis(random_orthogonal_probe(targets, rng)))
               for _ in range(probes))


def skp_iterated_error(rng, n: int = 8, d: int = 3, steps: int = 12) -> float:
    targets = random_orthogonal(n, rng)[:, :d]
    op = build_amplifying_skp(targets, (2.0, 1.0))
    on = iterate_basis(op, column_basis(targets), steps)
    off = iterate_basis(op, column_basis(random_orthogonal_probe(targets, rng)), steps)
    ratios = [a / b for a, b in zip(on, off)]
    return max(_rel(r, 2.0**l) for l, r in enumerate(ratios))


def check_parseval(rng) -> float:
    worst = 0.0
    for n in (3, 8, 12):
        spec = sym_eig(random_symmetric(n, rng))
        x = rng.standard_normal((n, 4))
        worst = max(worst, _rel(np.sum(subspace_mass(x, spec) ** 2), frobenius_norm(x) ** 2))
    return worst


def skp_weight_dependence(rng, n: int = 6, d: int = 3, lambdas=(2.0, 1.0)) -> float:
    """Relative change of ``||T S_i|| / ||T S_j||`` between two weight choices of a two-term SKP.

    The terms' aggregations have orthogonal dominant eigenvectors ``s`` and
    ``t``; putting all weight on the first term and then on the second
    moves the ratio from ``l1/l2`` to ``l2/l1``. A single-term operator
    would give the same ratio for both choices.
    """
    q = random_orthogonal(n, rng)
    s, t = q[:, 0], q[:, 1]
    l1, l2 = lambdas
    a1 = l1 * np.outer(s, s) + l2 * (np.eye(n) - np.outer(s, s))
    a2 = l1 * np.outer(t, t) + l2 * (np.eye(n) - np.outer(t, t))
    b_i, b_j = kron(np.eye(d), s[:, None]), kron(np.eye(d), t[:, None])
    w = rng.standard_normal((d, d))
    zero = np.zeros((d, d))
    first = term_ratio(SkpOperator.from_pairs([(w, a1), (zero, a2)]), b_i, b_j)
    second = term_ratio(SkpOperator.from_pairs([(zero, a1), (w, a2)]), b_i, b_j)
    return abs(first - second) / abs(first)


def gradient_oracle_errors(seed: int, instances: int = 1) -> list[float]:
    """Worst finite-difference disagreement per instance, cycling through the families."""
    out = []
    for k in range(instances):
        rng = np.random.default_rng([seed, k])
        g = connected_er(6, 0.5, rng, non_bipartite=False)
        fam = FAMILIES[k % len(FAMILIES)]
        use_encoder = k % 2 == 0
        d_in = 5 if use_encoder else 4
        params = init_params(fam, g, d_in, 4, 3, 2, seed=int(rng.integers(2**31)), use_encoder=use_encoder)
        params = params.with_arrays({name: arr + rng.normal(0.0, 0.3, arr.shape)
                                     for name, arr in params.arrays().items()})
        x = rng.standard_normal((g.n, d_in))
        mask = np.array([0, 2, 3, 5])
        loss_kind = CE if use_encoder else "bce"
        if loss_kind == CE:
            y = np.eye(3)[rng.integers(0, 3, len(mask))]
        else:
            y = (rng.random((len(mask), 3)) > 0.5).astype(np.float64)
        _, grads = loss_and_grad(params, g, x, y, mask, loss_kind)
        numeric = oracles.numeric_gradients(params, g, x, y, mask, loss_kind)
        out.append(oracles.gradient_error(grads, numeric))
    return out


def check_eigen_expansion(rng, layers: int = 30) -> float:
    g = connected_er(12, 0.4, rng)
    a = sym_normalized(g)
    spec = sym_eig(a)
    ws = gaussian_weights(rng, 3, layers)
    x0 = rng.standard_normal((g.n, 3))
    traj = rollout(x0, [LayerSpec(a, w, IDENTITY) for w in ws])
    return _rel(traj.column("fro_norm_sq"), eigen_expansion_norms(x0, ws, spec))


# -- suite -------------------------------------------------------------------------


def _suite(seed: int) -> list[tuple[str, Callable[[], CheckResult]]]:
    def rng(name):
        return _rng(seed, name)

    return [
        ("mixed_product_vec_identity", lambda n: _result(n, check_mixed_product(rng(n)), 1e-12)),
        ("sym_eig_reconstruction", lambda n: _result(n, check_sym_eig(rng(n)), 1e-10)),
        ("svd_reconstruction_spectral_norm", lambda n: _result(n, check_svd(rng(n)), 1e-10)),
        ("subspace_invariance", lambda n: _result(n, check_subspace_invariance(rng(n)), 1e-10)),
        ("fixed_relative_amplification", lambda n: _result(n, check_fixed_amplification(rng(n)), 1e-10)),
        ("dominance_vs_kronecker_oracle", lambda n: _result(n, check_dominance_oracle(rng(n)), 1e-10)),
        ("ratio_independent_of_weights", lambda n: _result(n, check_ratio_weight_independence(rng(n)), 1e-10)),
        ("relu_norm_bound", lambda n: _result(n, check_relu_norm_bound(rng(n)), 1e-9)),
        ("dirichlet_energy_bound", lambda n: _result(n, check_energy_bound(rng(n)), 1e-9)),
        ("normalized_energy_rate", lambda n: _result(n, max(rate_errors(seed)), RATE_TOL)),
        ("softmax_aggregation_oversmooths", lambda n: _result(n, max(rw_final_energies(seed)), RW_TOL)),
        ("rank_collapse_to_one",
         lambda n: _result(n, max(max(r, j) for r, j in rank_one_ranks(seed)), 1)),
        ("tied_spectrum_rank_bound", lambda n: _result(n, tied_spectrum_rank(rng(n))[0], 2)),
        ("skp_amplification_ratio", lambda n: _result(n, skp_ratio_min(rng(n)), 2.0 - SKP_ROUNDING, GE)),
        ("skp_iterated_mass_ratio", lambda n: _result(n, skp_iterated_error(rng(n)), 1e-9)),
        ("parseval_subspace_mass", lambda n: _result(n, check_parseval(rng(n)), 1e-12)),
        ("skp_breaks_fixed_ratio", lambda n: _result(n, skp_weight_dependence(rng(n)), 0.10, GE)),
        ("gradient_finite_difference", lambda n: _result(n, max(gradient_oracle_errors(seed, 3)), 1e-4)),
        ("eigen_expansion_norms", lambda n: _result(n, check_eigen_expansion(rng(n)), 1e-9)),
    ]


def run_checks(seed: int = 42) -> list[CheckResult]:
    return [fn(name) for name, fn in _suite(seed)]


def report_json(results: list[CheckResult], seed: int) -> str:
    return json.dumps(
        {
            "seed": seed,
            "checks": [asdict(r) for r in results],
            "passed": sum(r.passed for r in results),
            "failed": sum(not r.passed for r in results),
        },
        indent=2,
    ) + "\n"


def report_csv(results: list[CheckResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "value", "tolerance", "comparison", "passed"])
    for r in results:
        w.writerow([r.name, repr(r.value), repr(r.tolerance), r.comparison, r.passed])
    return buf.getvalue()
