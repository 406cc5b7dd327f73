"""Graphs, edge-list I/O, random generation and aggregation operators.

Message direction: an edge ``(src, dst)`` lets ``dst`` aggregate from
``src``, so it fills entry ``[dst, src]`` of an aggregation matrix.
Undirected graphs store each edge once and expand to both directions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import IO, Sequence, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, InvalidIndex, IsolatedNode, ParseError

DEFAULT_MIN_WEIGHT = 1e-3


@dataclass(frozen=True)
class Graph:
    n: int
    edges: tuple[tuple[int, int, float], ...]
    directed: bool = False

    def __post_init__(self):
        if self.n <= 0:
            raise ValueError("graph needs at least one node")
        seen = set()
        for src, dst, _ in self.edges:
            if not (0 <= src < self.n and 0 <= dst < self.n):
                raise InvalidIndex(f"edge ({src}, {dst}) outside 0..{self.n - 1}")
            if src == dst:
                raise ValueError(f"self-loop on node {src} is not allowed")
            key = (src, dst) if self.directed else (min(src, dst), max(src, dst))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)

    @classmethod
    def from_pairs(cls, n: int, pairs, directed: bool = False, weights=None) -> "Graph":
        pairs = list(pairs)
        if weights is None:
            weights = [1.0] * len(pairs)
        return cls(n, tuple((int(s), int(d), float(w)) for (s, d), w in zip(pairs, weights)), directed)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def message_edges(self) -> np.ndarray:
        """``(m, 2)`` array of ``(src, dst)`` message directions.

        Undirected edges contribute both directions, the stored direction
        first. Per-edge parameters (logits, learned weights) follow this order.
        """
        out = []
        for src, dst, _ in self.edges:
            out.append((src, dst))
            if not self.directed:
                out.append((dst, src))
        return np.array(out, dtype=np.int64).reshape(-1, 2)

    def message_weights(self) -> np.ndarray:
        out = []
        for *_, w in self.edges:
            out.append(w)
            if not self.directed:
                out.append(w)
        return np.array(out, dtype=np.float64)

    def adjacency(self) -> np.ndarray:
        """Weighted adjacency with ``A[dst, src] = w`` (symmetric when undirected)."""
        a = np.zeros((self.n, self.n))
        e = self.message_edges()
        if len(e):
            a[e[:, 1], e[:, 0]] = self.message_weights()
        return a

    def in_degree(self) -> np.ndarray:
        e = self.message_edges()
        return np.bincount(e[:, 1], minlength=self.n) if len(e) else np.zeros(self.n, dtype=np.int64)

    def is_connected(self) -> bool:
        return largest_scc(self).n == self.n

    def relabel(self, perm: Sequence[int]) -> "Graph":
        """Graph with node ``i`` renamed to ``perm[i]``."""
        perm = list(perm)
        return Graph(self.n, tuple((perm[s], perm[d], w) for s, d, w in self.edges), self.directed)


# -- aggregation kinds -------------------------------------------------------


@dataclass(frozen=True)
class SymNormalized:
    pass


@dataclass(frozen=True, eq=False)
class RowStochastic:
    logits: np.ndarray
    min_weight: float = DEFAULT_MIN_WEIGHT


@dataclass(frozen=True, eq=False)
class RawWeights:
    weights: np.ndarray


@dataclass(frozen=True)
class RandomWalk:
    pass


AggregationKind = Union[SymNormalized, RowStochastic, RawWeights]


def _check_degrees(g: Graph) -> np.ndarray:
    a = g.adjacency()
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        bad = int(np.flatnonzero(deg <= 0)[0])
        raise IsolatedNode(f"node {bad} has no neighbours")
    return deg


def sym_normalized(g: Graph) -> np.ndarray:
    if g.directed:
        raise ValueError("symmetric normalisation needs an undirected graph")
    deg = _check_degrees(g)
    inv = 1.0 / np.sqrt(deg)
    return inv[:, None] * g.adjacency() * inv[None, :]


def row_softmax(n: int, edges: np.ndarray, logits: np.ndarray, min_weight: float = 0.0):
    """Softmax of per-edge logits over each receiving node's incoming edges.

    Returns ``(dense, probs, raw)``: the dense row-stochastic matrix, the
    per-edge probabilities after the ``min_weight`` floor, and the plain
    softmax probabilities before it. The floor clamps small entries up to
    ``min_weight`` and renormalises the row.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (len(edges),):
        raise DimensionMismatch(f"expected {len(edges)} logits, got shape {logits.shape}")
    dst = edges[:, 1]
    row_max = np.full(n, -np.inf)
    np.maximum.at(row_max, dst, logits)
    ex = np.exp(logits - row_max[dst])
    denom = np.bincount(dst, weights=ex, minlength=n)
    raw = ex / denom[dst]
    probs = raw
    if min_weight > 0 and np.any(raw < min_weight):
        deg = np.bincount(dst, minlength=n)
        if np.any(min_weight * deg > 1.0):
            raise ValueError("min_weight too large for the node degrees")
        # pin entries at the floor and rescale the free ones until none drop below it
        fixed = np.zeros(len(raw), dtype=bool)
        while True:
            free_sum = np.bincount(dst, weights=np.where(fixed, 0.0, raw), minlength=n)
            n_fixed = np.bincount(dst, weights=fixed.astype(float), minlength=n)
            scale = (1.0 - min_weight * n_fixed) / np.where(free_sum > 0, free_sum, 1.0)
            probs = np.where(fixed, min_weight, raw * scale[dst])
            newly = ~fixed & (probs < min_weight)
            if not newly.any():
                break
            fixed |= newly
    dense = np.zeros((n, n))
    dense[dst, edges[:, 0]] = probs
    return dense, probs, raw


def aggregation_matrix(g: Graph, kind: AggregationKind = SymNormalized()) -> np.ndarray:
    if isinstance(kind, SymNormalized):
        return sym_normalized(g)
    edges = g.message_edges()
    if isinstance(kind, RowStochastic):
        _check_degrees(g)
        dense, _, _ = row_softmax(g.n, edges, kind.logits, kind.min_weight)
        return dense
    if isinstance(kind, RawWeights):
        w = np.asarray(kind.weights, dtype=np.float64)
        if w.shape != (len(edges),):
            raise DimensionMismatch(f"expected {len(edges)} edge weights, got shape {w.shape}")
        a = np.zeros((g.n, g.n))
        if len(edges):
            a[edges[:, 1], edges[:, 0]] = w
        return a
    raise TypeError(f"unknown aggregation kind {kind!r}")


def sym_incidence(g: Graph) -> np.ndarray:
    """Scaled incidence ``B`` (one row per edge) with ``B^T B = I - D^-1/2 A D^-1/2``.

    ``||B X||_F^2`` is the edge-sum form of the Dirichlet energy and avoids
    the cancellation in ``tr(X^T Delta X)`` for nearly smooth states.
    """
    if g.directed:
        raise ValueError("symmetric normalisation needs an undirected graph")
    deg = _check_degrees(g)
    b = np.zeros((g.num_edges, g.n))
    for k, (s, d, w) in enumerate(g.edges):
        b[k, s] = np.sqrt(w / deg[s])
        b[k, d] = -np.sqrt(w / deg[d])
    return b


def laplacian(g: Graph, kind=SymNormalized()) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` (SymNormalized) or ``I - D^-1 A`` (RandomWalk)."""
    if isinstance(kind, SymNormalized):
        return np.eye(g.n) - sym_normalized(g)
    if isinstance(kind, RandomWalk):
        deg = _check_degrees(g)
        return np.eye(g.n) - g.adjacency() / deg[:, None]
    raise TypeError(f"unknown laplacian kind {kind!r}")


# -- generation and components ----------------------------------------------


def erdos_renyi(n: int, p: float, seed, directed: bool = False) -> Graph:
    """G(n, p): every unordered pair (ordered pair if directed) kept with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    draws = rng.random((n, n))
    if directed:
        mask = draws < p
        np.fill_diagonal(mask, False)
        src, dst = np.nonzero(mask)
    else:
        src, dst = np.nonzero(np.triu(draws < p, k=1))
    return Graph.from_pairs(n, zip(src.tolist(), dst.tolist()), directed=directed)


def largest_scc(g: Graph) -> Graph:
    """Induced subgraph on the largest strongly connected component.

    Undirected graphs use connected components. Ties go to the component
    containing the smallest node index; nodes keep their relative order.
    """
    e = g.message_edges()
    mat = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1]) if len(e) else ([], [])), shape=(g.n, g.n))
    _, labels = connected_components(mat, directed=g.directed, connection="strong")
    best = None
    for lab in np.unique(labels):
        members = np.flatnonzero(labels == lab)
        key = (-len(members), members[0])
        if best is None or key < best[0]:
            best = (key, members)
    keep = best[1]
    remap = {int(old): new for new, old in enumerate(keep)}
    edges = tuple(
        (remap[s], remap[d], w) for s, d, w in g.edges if s in remap and d in remap
    )
    return Graph(len(keep), edges, g.directed)


# -- edge-list text format ---------------------------------------------------


def load_edge_list(stream: IO[str] | str) -> Graph:
    """Parse ``n m [directed|undirected]`` followed by ``m`` lines ``src dst [weight]``."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    header = None
    directed = False
    edges = []
    seen = set()
    for no, line in enumerate(stream, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if header is None:
            if len(parts) not in (2, 3):
                raise ParseError("header must be 'n m [directed|undirected]'", no)
            try:
                n, m = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError("header counts must be integers", no) from None
            if len(parts) == 3:
                if parts[2] not in ("directed", "undirected"):
                    raise ParseError(f"unknown graph kind {parts[2]!r}", no)
                directed = parts[2] == "directed"
            if n <= 0 or m < 0:
                raise ParseError("need n > 0 and m >= 0", no)
            header = (n, m)
            continue
        if len(parts) not in (2, 3):
            raise ParseError("edge line must be 'src dst [weight]'", no)
        try:
            src, dst = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise ParseError("malformed edge line", no) from None
        n = header[0]
        if not (0 <= src < n and 0 <= dst < n):
            raise InvalidIndex(f"node index out of range 0..{n - 1}", no)
        if src == dst:
            raise ParseError(f"self-loop on node {src}", no)
        key = (src, dst) if directed else (min(src, dst), max(src, dst))
        if key in seen:
            raise ParseError(f"duplicate edge {key}", no)
        if not np.isfinite(w):
            raise ParseError("non-finite weight", no)
        seen.add(key)
        edges.append((src, dst, w))
    if header is None:
        raise ParseError("missing header")
    if len(edges) != header[1]:
        raise ParseError(f"header announces {header[1]} edges, found {len(edges)}")
    return Graph(header[0], tuple(edges), directed)


def format_edge_list(g: Graph) -> str:
    kind = "directed" if g.directed else "undirected"
    lines = [f"{g.n} {g.num_edges} {kind}"]
    for s, d, w in g.edges:
        lines.append(f"{s} {d}" if w == 1.0 else f"{s} {d} {w!r}")
    return "\n".join(lines) + "\n"


def save_edge_list(g: Graph, stream: IO[str]) -> None:
    stream.write(format_edge_list(g))
