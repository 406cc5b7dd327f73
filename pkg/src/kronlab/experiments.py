"""Reproducible experiments: the synthetic depth study and the scaled vs unscaled deep ReLU rollouts (figure1)."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dynamics import RELU, LayerSpec, Trajectory, rollout
from .errors import NonFiniteLoss
from .graph import Graph, erdos_renyi, largest_scc, laplacian, RandomWalk, sym_incidence, sym_normalized
from .training import BCE, FAMILIES, TrainConfig, init_params, train

log = logging.getLogger(__name__)

SYNTHETIC_NODES = 20
SYNTHETIC_EDGE_PROB = 0.2
SYNTHETIC_FEATURES = 6
SYNTHETIC_TARGETS = np.array([[1, 1, 1], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=np.float64)
CONNECT_RETRIES = 100

DEFAULT_GRAPHS = 10
DEFAULT_RESTARTS = 3
DEFAULT_MAX_STEPS = 20000
DEFAULT_LR = 0.01
# the synthetic study's stated transform mean for its 6x6 weights; None falls back to 1/d
DEFAULT_TRANSFORM_MEAN: Optional[float] = 1 / 3
FEATURE_STREAM = 7  # spawn key for per-restart node features

FIGURE1_NODES = 50
FIGURE1_EDGE_PROB = 0.1
FIGURE1_WIDTH = 16
FIGURE1_LAYERS = 128


# -- synthetic task ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    graph: Graph
    features: np.ndarray
    nodes: np.ndarray
    targets: np.ndarray = field(default_factory=SYNTHETIC_TARGETS.copy)

    def __post_init__(self):
        if not np.array_equal(self.targets, SYNTHETIC_TARGETS):
            raise ValueError("targets must be the fixed 4x3 matrix")
        if len(set(self.nodes.tolist())) != len(self.nodes):
            raise ValueError("selected nodes must be distinct")
        if np.any(self.nodes < 0) or np.any(self.nodes >= self.graph.n):
            raise ValueError("selected node out of range")
        if self.features.shape[0] != self.graph.n:
            raise ValueError("one feature row per node required")


def make_synthetic_task(seed, n: int = SYNTHETIC_NODES, p: float = SYNTHETIC_EDGE_PROB,
                        d_in: int = SYNTHETIC_FEATURES) -> SyntheticTask:
    """ER graph (redrawn until connected), Gaussian features and four labelled nodes."""
    rng = np.random.default_rng(seed)
    g = None
    for _ in range(CONNECT_RETRIES):
        g = erdos_renyi(n, p, rng)
        if g.is_connected():
            break
    else:
        g = largest_scc(g)
    features = rng.standard_normal((g.n, d_in))
    nodes = rng.choice(g.n, size=len(SYNTHETIC_TARGETS), replace=False)
    return SyntheticTask(g, features, nodes)


# -- synthetic depth study -----------------------------------------------------


@dataclass
class RunRecord:
    family: str
    layers: int
    d: int
    graph_index: int
    restart: int
    seed: int
    accuracy: Optional[float]
    final_loss: Optional[float]
    steps: int
    failed: bool = False


@dataclass
class Aggregate:
    family: str
    layers: int
    max: float
    mean: float
    std: float
    graphs: int
    failed_runs: int


@dataclass
class ExperimentReport:
    records: list
    config: dict

    def per_graph_best(self, family: str, layers: int) -> list[float]:
        best: dict[int, float] = {}
        for r in self.records:
            if r.family != family or r.layers != layers or r.failed:
                continue
            best[r.graph_index] = max(best.get(r.graph_index, -1.0), r.accuracy)
        return [best[k] for k in sorted(best)]

    def aggregates(self) -> list[Aggregate]:
        keys = []
        for r in self.records:
            if (r.family, r.layers) not in keys:
                keys.append((r.family, r.layers))
        out = []
        for fam, l in keys:
            accs = np.array(self.per_graph_best(fam, l))
            failed = sum(1 for r in self.records if r.family == fam and r.layers == l and r.failed)
            if accs.size:
                out.append(Aggregate(fam, l, float(accs.max()), float(accs.mean()), float(accs.std()), int(accs.size), failed))
            else:
                out.append(Aggregate(fam, l, math.nan, math.nan, math.nan, 0, failed))
        return out

    def aggregate(self, family: str, layers: int) -> Aggregate:
        for a in self.aggregates():
            if a.family == family and a.layers == layers:
                return a
        raise KeyError((family, layers))

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "records": [asdict(r) for r in self.records],
                "aggregates": [asdict(a) for a in self.aggregates()],
            },
            indent=2,
        )

    def table_csv(self) -> str:
        """One row per (family, layers): max and mean/std accuracy in percent."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["family", "layers", "max", "mean", "std", "graphs", "failed_runs"])
        for a in self.aggregates():
            w.writerow([a.family, a.layers, f"{100 * a.max:.1f}", f"{100 * a.mean:.1f}",
                        f"{100 * a.std:.1f}", a.graphs, a.failed_runs])
        return buf.getvalue()


def _restart_seed(seed: int, graph_index: int, restart: int) -> int:
    return int(np.random.SeedSequence([seed, graph_index, restart]).generate_state(1)[0])


def restart_features(task: SyntheticTask, init_seed: int) -> np.ndarray:
    """Fresh Gaussian node features for one restart, keyed by its init seed."""
    return np.random.default_rng([init_seed, FEATURE_STREAM]).standard_normal(task.features.shape)


def _run_one(job) -> RunRecord:
    (family, layers, d, g_idx, restart, seed, task_seed, max_steps, lr, transform_mean, window,
     redraw) = job
    task = make_synthetic_task(task_seed)
    init_seed = _restart_seed(seed, g_idx, restart)
    features = restart_features(task, init_seed) if redraw else task.features
    params = init_params(family, task.graph, task.features.shape[1], d, task.targets.shape[1], layers,
                         seed=init_seed, use_encoder=False, transform_mean=transform_mean)
    cfg = TrainConfig(mask=task.nodes, max_steps=max_steps, plateau_window=window, loss_kind=BCE, lr=lr)
    try:
        res = train(params, task.graph, features, task.targets, cfg)
    except NonFiniteLoss as exc:
        return RunRecord(family, layers, d, g_idx, restart, init_seed, None, None, len(exc.history), True)
    return RunRecord(family, layers, d, g_idx, restart, init_seed, res.accuracy, res.best_loss, res.steps)


def run_synthetic(
    families: Sequence[str] = FAMILIES,
    layer_list: Sequence[int] = (1, 8),
    graphs: int = DEFAULT_GRAPHS,
    restarts: int = DEFAULT_RESTARTS,
    seed: int = 0,
    max_steps: int = DEFAULT_MAX_STEPS,
    lr: float = DEFAULT_LR,
    transform_mean: Optional[float] = DEFAULT_TRANSFORM_MEAN,
    plateau_window: int = 500,
    jobs: int = 1,
    redraw_features: bool = True,
) -> ExperimentReport:
    """Train every family at every depth on the same ``graphs`` tasks, ``restarts`` times each.

    The feature width equals the input width (no encoder), so ``d = 6``.
    Runs that diverge are recorded with ``failed=True`` and left out of the
    best-of-restarts. With ``redraw_features`` each restart draws its own
    node features (graph and labelled nodes stay fixed per task); otherwise
    all restarts share the task's features.
    """
    if graphs < 1 or restarts < 1:
        raise ValueError("graphs and restarts must be at least 1")
    for fam in families:
        if fam not in FAMILIES:
            raise ValueError(f"unknown family {fam!r}")
    d = SYNTHETIC_FEATURES
    jobs_list = []
    for l in layer_list:
        for fam in families:
            for g_idx in range(graphs):
                task_seed = [seed, g_idx]
                for r in range(restarts):
                    jobs_list.append((fam, int(l), d, g_idx, r, seed, task_seed, max_steps, lr,
                                      transform_mean, plateau_window, redraw_features))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one, jobs_list))
    else:
        records = [_run_one(j) for j in jobs_list]
    failed = sum(r.failed for r in records)
    if failed:
        log.warning("%d run(s) diverged and were excluded", failed)
    config = {
        "families": list(families), "layers": [int(l) for l in layer_list], "graphs": graphs,
        "restarts": restarts, "seed": seed, "max_steps": max_steps, "lr": lr,
        "transform_mean": transform_mean, "plateau_window": plateau_window, "d": d,
        "redraw_features": redraw_features,
    }
    return ExperimentReport(records, config)


# -- figure1: scaled vs unscaled ReLU rollouts ---------------------------------


def glorot_square(rng: np.random.Generator, d: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (2 * d))
    return rng.uniform(-bound, bound, size=(d, d))


def figure1_graph(seed, n: int = FIGURE1_NODES, p: float = FIGURE1_EDGE_PROB) -> Graph:
    return largest_scc(erdos_renyi(n, p, seed))


def run_figure1(graph: Graph, layers: int = FIGURE1_LAYERS, scale: float = 2.0, seed: int = 0,
                width: int = FIGURE1_WIDTH) -> tuple[Trajectory, Trajectory]:
    """ReLU rollouts with Glorot weights, once as drawn and once multiplied by ``scale``.

    Both runs share the input state and the weight draws.
    """
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((graph.n, width))
    weights = [glorot_square(rng, width) for _ in range(layers)]
    a = sym_normalized(graph)
    metrics = dict(
        delta_rw=laplacian(graph, RandomWalk()),
        sym_incidence=sym_incidence(graph),
    )
    plain = rollout(x0, [LayerSpec(a, w, RELU) for w in weights], **metrics)
    scaled = rollout(x0, [LayerSpec(a, scale * w, RELU) for w in weights], **metrics)
    return plain, scaled


FIGURE1_DECAY = 1e-8
FIGURE1_ENERGY_DROP = 0.1


def figure1_problems(plain: Trajectory, scaled: Trajectory) -> list[str]:
    """Deviations from the expected pattern; empty when it is observed.

    Unscaled: ``||X||^2`` and ``|E_rw|`` end below ``1e-8`` of their input
    values. Scaled: ``||X||^2`` ends at or above its input value, ``|E_rw|``
    does not shrink, and ``|E_rw|`` of the normalized state ends below a
    tenth of its input value. Absolute values are used because ``E_rw``
    is not sign-definite.
    """
    out = []
    p0, pl = plain.records[0], plain.records[-1]
    s0, sl = scaled.records[0], scaled.records[-1]
    if not pl.fro_norm_sq <= FIGURE1_DECAY * p0.fro_norm_sq:
        out.append("unscaled norm did not decay")
    if not abs(pl.e_rw) <= FIGURE1_DECAY * abs(p0.e_rw):
        out.append("unscaled E_rw did not decay")
    if not sl.fro_norm_sq >= s0.fro_norm_sq:
        out.append("scaled norm shrank")
    if not abs(sl.e_rw) >= abs(s0.e_rw):
        out.append("scaled E_rw shrank")
    if sl.e_rw_norm is None or not abs(sl.e_rw_norm) <= FIGURE1_ENERGY_DROP * abs(s0.e_rw_norm):
        out.append("scaled normalized E_rw did not decay")
    return out
