"""Trainable message-passing stack with hand-written backpropagation.

Model: optional encoder ``ReLU(X W_e + b_e)``, then ``l`` layers
``X <- ReLU(sum_t c_t A_t X W_t)``, then an affine decoder. The family
fixes how each ``A_t`` is built from its per-edge parameters:

* ``kp``          one term, learned raw edge weights, ``c = 1``
* ``softmax_skp`` two terms, row softmax over incoming edges, ``c = 1/2``
* ``skp``         two terms, learned raw edge weights, ``c = 1``
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, IsolatedNode, NonFiniteLoss
from .graph import DEFAULT_MIN_WEIGHT, Graph, row_softmax

KP = "kp"
SOFTMAX_SKP = "softmax_skp"
SKP = "skp"
FAMILIES = (KP, SOFTMAX_SKP, SKP)
TERMS = {KP: 1, SOFTMAX_SKP: 2, SKP: 2}

CE = "ce"
BCE = "bce"

INIT_STD = 0.05


@lru_cache(maxsize=256)
def _edge_index(graph: Graph):
    edges = graph.message_edges()
    deg = graph.in_degree()
    if np.any(deg == 0):
        raise IsolatedNode(f"node {int(np.flatnonzero(deg == 0)[0])} has no incoming edges")
    return edges, deg


@dataclass(frozen=True, eq=False)
class ModelParams:
    family: str
    edges: np.ndarray  # (layers, terms, message edges)
    transforms: np.ndarray  # (layers, terms, d, d)
    decoder_w: np.ndarray
    decoder_b: np.ndarray
    encoder_w: Optional[np.ndarray] = None
    encoder_b: Optional[np.ndarray] = None
    min_weight: float = DEFAULT_MIN_WEIGHT

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        l, p, _ = self.edges.shape
        if self.transforms.shape[:2] != (l, p) or p != TERMS[self.family]:
            raise DimensionMismatch("edge and transform parameters disagree with the family")

    @property
    def layers(self) -> int:
        return self.edges.shape[0]

    @property
    def terms(self) -> int:
        return self.edges.shape[1]

    @property
    def width(self) -> int:
        return self.decoder_w.shape[0]

    @property
    def coefficient(self) -> float:
        return 0.5 if self.family == SOFTMAX_SKP else 1.0

    def arrays(self) -> dict:
        out = {
            "edges": self.edges,
            "transforms": self.transforms,
            "decoder_w": self.decoder_w,
            "decoder_b": self.decoder_b,
        }
        if self.encoder_w is not None:
            out["encoder_w"] = self.encoder_w
            out["encoder_b"] = self.encoder_b
        return out

    def with_arrays(self, arrays: dict) -> "ModelParams":
        return replace(self, **arrays)

    def to_dict(self) -> dict:
        d = {k: v.tolist() for k, v in self.arrays().items()}
        d.update(family=self.family, min_weight=self.min_weight)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        arrays = {
            k: np.asarray(d[k], dtype=np.float64)
            for k in ("edges", "transforms", "decoder_w", "decoder_b", "encoder_w", "encoder_b")
            if k in d
        }
        return cls(family=d["family"], min_weight=float(d["min_weight"]), **arrays)


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, (fan_in, fan_out))


def init_params(
    family: str,
    graph: Graph,
    d_in: int,
    d: int,
    n_classes: int,
    layers: int,
    seed=0,
    use_encoder: bool = True,
    transform_mean: Optional[float] = None,
    min_weight: float = DEFAULT_MIN_WEIGHT,
) -> ModelParams:
    """Random parameters.

    Edge parameter of message ``src -> dst`` ~ N(1/indeg(dst), 0.05);
    transform entries ~ N(1/d, 0.05) unless ``transform_mean`` is given;
    encoder/decoder Glorot-uniform with zero bias. Without an encoder the
    input width must equal ``d``.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    if not use_encoder and d_in != d:
        raise DimensionMismatch("without an encoder the input width must equal d")
    edges, deg = _edge_index(graph)
    rng = np.random.default_rng(seed)
    p = TERMS[family]
    enc_w = enc_b = None
    if use_encoder:
        enc_w = _glorot(rng, d_in, d)
        enc_b = np.zeros(d)
    mean = 1.0 / d if transform_mean is None else transform_mean
    edge_mean = 1.0 / deg[edges[:, 1]]
    edge_params = rng.normal(edge_mean, INIT_STD, (layers, p, len(edges)))
    transforms = rng.normal(mean, INIT_STD, (layers, p, d, d))
    dec_w = _glorot(rng, d, n_classes)
    return ModelParams(
        family=family,
        edges=edge_params,
        transforms=transforms,
        decoder_w=dec_w,
        decoder_b=np.zeros(n_classes),
        encoder_w=enc_w,
        encoder_b=enc_b,
        min_weight=min_weight,
    )


def aggregations(params: ModelParams, graph: Graph, layer: int):
    """Dense aggregation matrices of one layer plus the softmax probabilities (or ``None``)."""
    edges, _ = _edge_index(graph)
    n = graph.n
    mats, raws = [], []
    for t in range(params.terms):
        e = params.edges[layer, t]
        if params.family == SOFTMAX_SKP:
            dense, _, raw = row_softmax(n, edges, e, params.min_weight)
        else:
            dense = np.zeros((n, n))
            dense[edges[:, 1], edges[:, 0]] = e
            raw = None
        mats.append(dense)
        raws.append(raw)
    return mats, raws


def forward(params: ModelParams, graph: Graph, x_in):
    """Return ``(logits, cache)``; ``cache`` holds what the backward pass needs."""
    x_in = np.asarray(x_in, dtype=np.float64)
    if x_in.ndim != 2 or x_in.shape[0] != graph.n:
        raise DimensionMismatch(f"features {x_in.shape} do not match {graph.n} nodes")
    cache = {"x_in": x_in, "aggs": [], "raws": [], "states": [], "pre": []}
    if params.encoder_w is not None:
        if x_in.shape[1] != params.encoder_w.shape[0]:
            raise DimensionMismatch("feature width does not match the encoder")
        enc = x_in @ params.encoder_w + params.encoder_b
        cache["enc_pre"] = enc
        x = np.maximum(enc, 0.0)
    else:
        if x_in.shape[1] != params.width:
            raise DimensionMismatch("feature width must equal d when no encoder is used")
        x = x_in
    c = params.coefficient
    for k in range(params.layers):
        mats, raws = aggregations(params, graph, k)
        cache["states"].append(x)
        z = np.zeros((graph.n, params.width))
        for t, a in enumerate(mats):
            z += a @ x @ params.transforms[k, t]
        if c != 1.0:
            z *= c
        cache["aggs"].append(mats)
        cache["raws"].append(raws)
        cache["pre"].append(z)
        x = np.maximum(z, 0.0)
    cache["final"] = x
    logits = x @ params.decoder_w + params.decoder_b
    return logits, cache


def _mask_index(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise DimensionMismatch("boolean mask must have one entry per node")
        return np.flatnonzero(mask)
    return mask.astype(np.int64).reshape(-1)


def _loss_terms(z: np.ndarray, y: np.ndarray, loss_kind: str):
    """Per-node-averaged loss and its gradient w.r.t. the masked logits."""
    m = z.shape[0]
    if loss_kind == CE:
        shifted = z - z.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        loss = -float(np.sum(y * log_p)) / m
        grad = (np.exp(log_p) * y.sum(axis=1, keepdims=True) - y) / m
    elif loss_kind == BCE:
        loss = float(np.sum(np.logaddexp(0.0, z) - y * z)) / m
        grad = (_sigmoid(z) - y) / m
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return loss, grad


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def loss_and_grad(params: ModelParams, graph: Graph, x_in, targets, mask, loss_kind: str = CE):
    """Mean loss over the masked nodes and gradients for every parameter array."""
    idx = _mask_index(mask, graph.n)
    if idx.size == 0:
        raise ValueError("mask selects no nodes")
    targets = np.asarray(targets, dtype=np.float64)
    # non-finite values are reported below as NonFiniteLoss
    with np.errstate(invalid="ignore", over="ignore"):
        logits, cache = forward(params, graph, x_in)
    if targets.shape != (idx.size, logits.shape[1]):
        raise DimensionMismatch(f"targets {targets.shape} vs ({idx.size}, {logits.shape[1]})")
    loss, g_masked = _loss_terms(logits[idx], targets, loss_kind)
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")

    g_logits = np.zeros_like(logits)
    g_logits[idx] = g_masked
    final = cache["final"]
    grads = {
        "decoder_w": final.T @ g_logits,
        "decoder_b": g_logits.sum(axis=0),
    }
    g_x = g_logits @ params.decoder_w.T

    edges, _ = _edge_index(graph)
    src, dst = edges[:, 0], edges[:, 1]
    g_edges = np.zeros_like(params.edges)
    g_trans = np.zeros_like(params.transforms)
    c = params.coefficient
    for k in reversed(range(params.layers)):
        g_z = g_x * (cache["pre"][k] > 0)
        if c != 1.0:
            g_z = g_z * c
        x_prev = cache["states"][k]
        g_prev = np.zeros_like(x_prev)
        for t, a in enumerate(cache["aggs"][k]):
            w = params.transforms[k, t]
            ax = a @ x_prev
            g_trans[k, t] = ax.T @ g_z
            g_a = (g_z @ w.T) @ x_prev.T
            g_prev += a.T @ (g_z @ w.T)
            g_entry = g_a[dst, src]
            raw = cache["raws"][k][t]
            if raw is not None:
                # softmax Jacobian on the unfloored probabilities (floor treated as identity)
                row_dot = np.bincount(dst, weights=raw * g_entry, minlength=graph.n)
                g_entry = raw * (g_entry - row_dot[dst])
            g_edges[k, t] = g_entry
        g_x = g_prev
    grads["edges"] = g_edges
    grads["transforms"] = g_trans

    if params.encoder_w is not None:
        g_pre = g_x * (cache["enc_pre"] > 0)
        grads["encoder_w"] = cache["x_in"].T @ g_pre
        grads["encoder_b"] = g_pre.sum(axis=0)
    return loss, grads


def predictions_correct(logits, targets, loss_kind: str) -> np.ndarray:
    """Boolean array of correct decisions: per node-task for BCE, per node for CE."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if loss_kind == BCE:
        return (logits > 0) == (targets > 0.5)
    return np.argmax(logits, axis=1) == np.argmax(targets, axis=1)


def accuracy(params: ModelParams, graph: Graph, x_in, targets, mask, loss_kind: str) -> float:
    logits, _ = forward(params, graph, x_in)
    idx = _mask_index(mask, graph.n)
    return float(np.mean(predictions_correct(logits[idx], targets, loss_kind)))


# -- optimisation --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(
            lr=d["lr"],
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m={k: np.asarray(v) for k, v in d["m"].items()},
            v={k: np.asarray(v) for k, v in d["v"].items()},
        )


def adam_step(state: AdamState, params: ModelParams, grads: dict):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_arrays, new_m, new_v = {}, {}, {}
    for name, p in params.arrays().items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * (g * g)
        new_arrays[name] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return params.with_arrays(new_arrays), new_state


@dataclass
class TrainConfig:
    mask: np.ndarray
    max_steps: int = 2000
    plateau_window: int = 500
    loss_kind: str = CE
    lr: float = 0.01
    min_delta: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.plateau_window < 1:
            raise ValueError("plateau_window must be at least 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list  # (step, loss, best_loss)
    accuracy: float
    steps: int
    adam: AdamState

    @property
    def best_loss(self) -> float:
        return self.history[-1][2]

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "best_loss"])
        for step, loss, best in self.history:
            w.writerow([step, repr(loss), repr(best)])
        return buf.getvalue()


def train(params: ModelParams, graph: Graph, x_in, targets, config: TrainConfig) -> TrainResult:
    """Adam until ``max_steps`` or until the best loss has not improved by more
    than ``min_delta`` for ``plateau_window`` consecutive steps.

    Accuracy is measured with the best-loss parameters. ``NonFiniteLoss``
    propagates with the history recorded so far attached.
    """
    state = AdamState(lr=config.lr)
    history = []
    best_loss = math.inf
    best_params = params
    stale = 0
    for step in range(config.max_steps):
        try:
            loss, grads = loss_and_grad(params, graph, x_in, targets, config.mask, config.loss_kind)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(str(exc), history) from None
        if loss < best_loss - config.min_delta:
            best_loss, best_params, stale = loss, params, 0
        else:
            stale += 1
        history.append((step, loss, best_loss))
        if stale >= config.plateau_window:
            break
        params, state = adam_step(state, params, grads)
    acc = accuracy(best_params, graph, x_in, targets, config.mask, config.loss_kind)
    return TrainResult(params, best_params, history, acc, len(history), state)


def save_checkpoint(params: ModelParams, state: AdamState) -> str:
    return json.dumps({"params": params.to_dict(), "adam": state.to_dict()})


def load_checkpoint(text: str):
    blob = json.loads(text)
    return ModelParams.from_dict(blob["params"]), AdamState.from_dict(blob["adam"])
