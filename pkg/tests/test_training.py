import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronlab import oracles
from kronlab.errors import DimensionMismatch, NonFiniteLoss
from kronlab.graph import Graph
from kronlab.training import (
    BCE,
    CE,
    FAMILIES,
    KP,
    SKP,
    SOFTMAX_SKP,
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    aggregations,
    forward,
    init_params,
    load_checkpoint,
    loss_and_grad,
    predictions_correct,
    save_checkpoint,
    train,
)
from kronlab.verify import connected_er


def small_instance(seed, n=6, d=4, layers=2, family=SKP, encoder=True, d_in=3, classes=3):
    rng = np.random.default_rng(seed)
    g = connected_er(n, 0.5, rng, non_bipartite=False)
    params = init_params(family, g, d_in if encoder else d, d, classes, layers, seed=seed, use_encoder=encoder)
    x = rng.standard_normal((n, d_in if encoder else d))
    mask = rng.choice(n, size=3, replace=False)
    return g, params, x, mask, rng


def perturbed(params, rng, scale=0.3):
    # move away from the symmetric init so no ReLU sits exactly on its kink
    return params.with_arrays({k: v + scale * rng.standard_normal(v.shape) for k, v in params.arrays().items()})


# -- initialisation ---------------------------------------------------------------------


def test_edge_means_follow_in_degree():
    g = Graph.from_pairs(3, [(0, 1), (1, 2)])  # node 1 has two in-neighbours
    p = init_params(KP, g, 2, 2, 2, layers=4000, seed=0)
    edges = g.message_edges()
    into_middle = edges[:, 1] == 1
    assert np.allclose(p.edges[:, 0, into_middle].mean(axis=0), 0.5, atol=0.005)
    assert np.allclose(p.edges[:, 0, ~into_middle].mean(axis=0), 1.0, atol=0.005)
    assert np.allclose(p.edges[:, 0].std(axis=0), 0.05, rtol=0.05)


def test_transform_mean_is_one_over_width():
    g = Graph.from_pairs(2, [(0, 1)])
    p = init_params(SKP, g, 3, 3, 2, layers=500, seed=1)
    assert p.transforms.mean() == pytest.approx(1 / 3, abs=0.002)
    assert p.transforms.std() == pytest.approx(0.05, rel=0.05)
    q = init_params(SKP, g, 3, 3, 2, layers=500, seed=1, transform_mean=0.2)
    assert q.transforms.mean() == pytest.approx(0.2, abs=0.002)


@pytest.mark.parametrize("family", FAMILIES)
def test_init_is_deterministic_and_shaped(family):
    g = Graph.from_pairs(4, [(0, 1), (1, 2), (2, 3)])
    a = init_params(family, g, 5, 4, 3, layers=3, seed=7)
    b = init_params(family, g, 5, 4, 3, layers=3, seed=7)
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k])
    terms = 1 if family == KP else 2
    assert a.edges.shape == (3, terms, 6)
    assert a.transforms.shape == (3, terms, 4, 4)
    assert a.encoder_w.shape == (5, 4) and a.decoder_w.shape == (4, 3)


def test_init_without_encoder_requires_matching_width():
    g = Graph.from_pairs(2, [(0, 1)])
    with pytest.raises(DimensionMismatch):
        init_params(KP, g, 3, 4, 2, layers=1, use_encoder=False)
    with pytest.raises(ValueError):
        init_params("gat", g, 3, 3, 2, layers=1)


# -- forward ------------------------------------------------------------------------------


def test_zero_layers_is_encoder_then_decoder():
    g, p, x, _, _ = small_instance(0, layers=0)
    logits, _ = forward(p, g, x)
    ref = np.maximum(x @ p.encoder_w + p.encoder_b, 0) @ p.decoder_w + p.decoder_b
    assert np.allclose(logits, ref, atol=1e-14)


def test_equal_logits_give_mean_aggregation():
    g, p, x, _, rng = small_instance(1, family=SOFTMAX_SKP, layers=2)
    p = p.with_arrays({"edges": np.full_like(p.edges, 0.7)})
    adj = g.adjacency()
    mean_agg = adj / adj.sum(axis=1, keepdims=True)
    h = np.maximum(x @ p.encoder_w + p.encoder_b, 0)
    for k in range(2):
        h = np.maximum(0.5 * sum(mean_agg @ h @ p.transforms[k, t] for t in range(2)), 0)
    ref = h @ p.decoder_w + p.decoder_b
    logits, _ = forward(p, g, x)
    assert np.max(np.abs(logits - ref)) <= 1e-12


def test_raw_edge_families_place_weights_by_destination():
    g, p, _, _, _ = small_instance(2, family=KP, layers=1)
    mats, raws = aggregations(p, g, 0)
    edges = g.message_edges()
    assert raws == [None]
    for e, (s, d) in enumerate(edges):
        assert mats[0][d, s] == p.edges[0, 0, e]
    assert np.count_nonzero(mats[0]) == len(edges)


def test_forward_rejects_bad_features():
    g, p, x, _, _ = small_instance(3)
    with pytest.raises(DimensionMismatch):
        forward(p, g, x[:, :2])
    with pytest.raises(DimensionMismatch):
        forward(p, g, x[:4])


def test_forward_is_equivariant_to_relabelling():
    g, p, x, _, rng = small_instance(4, n=7, family=SOFTMAX_SKP)
    p = perturbed(p, rng)
    perm = rng.permutation(g.n)
    h = g.relabel(perm)
    old_edges = [tuple(e) for e in g.message_edges()]
    position = {(int(perm[s]), int(perm[d])): k for k, (s, d) in enumerate(old_edges)}
    order = [position[(int(s), int(d))] for s, d in h.message_edges()]
    q = p.with_arrays({"edges": p.edges[:, :, order]})
    y = np.empty_like(x)
    y[perm] = x
    logits, _ = forward(p, g, x)
    logits_h, _ = forward(q, h, y)
    assert np.allclose(logits_h[perm], logits, atol=1e-12)


# -- losses and gradients --------------------------------------------------------------


@pytest.mark.parametrize("classes", [2, 3, 7])
def test_uniform_prediction_loss_is_log_classes(classes):
    g, p, x, mask, _ = small_instance(5, classes=classes)
    p = p.with_arrays({"decoder_w": np.zeros_like(p.decoder_w)})
    y = np.eye(classes)[np.arange(3) % classes]
    loss, _ = loss_and_grad(p, g, x, y, mask, CE)
    assert loss == pytest.approx(math.log(classes), abs=1e-15)


def test_bce_saturates_at_perfect_logits():
    g, _, _, mask, _ = small_instance(6)
    y = np.array([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    # zero-layer model whose logits are +-20 on exactly the right entries
    q = init_params(SKP, g, 3, 3, 3, layers=0, seed=0)
    q = q.with_arrays({"encoder_w": np.eye(3), "encoder_b": np.zeros(3), "decoder_w": np.eye(3),
                       "decoder_b": np.full(3, -20.0)})
    feats = np.zeros((g.n, 3))
    feats[mask] = 40.0 * y
    logits, _ = forward(q, g, feats)
    assert np.array_equal(np.abs(logits[mask]), np.full((3, 3), 20.0))
    loss, _ = loss_and_grad(q, g, feats, y, mask, BCE)
    assert loss <= 1e-8


def test_predictions_correct_thresholds():
    logits = np.array([[0.3, -0.1], [-2.0, 5.0]])
    assert predictions_correct(logits, np.array([[1, 0], [1, 1]]), BCE).tolist() == [[True, True], [False, True]]
    assert predictions_correct(logits, np.array([[1, 0], [1, 0]]), CE).tolist() == [True, False]


def test_loss_input_checks():
    g, p, x, mask, _ = small_instance(7)
    with pytest.raises(ValueError):
        loss_and_grad(p, g, x, np.zeros((0, 3)), np.array([], dtype=int), CE)
    with pytest.raises(DimensionMismatch):
        loss_and_grad(p, g, x, np.zeros((2, 3)), mask, CE)
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss):
        loss_and_grad(p, g, bad, np.eye(3), np.arange(3), CE)


GRADIENT_CASES = [(fam, loss, seed) for fam in FAMILIES for loss in (CE, BCE) for seed in range(4)]


@pytest.mark.parametrize("family, loss_kind, seed", GRADIENT_CASES)
def test_gradients_match_central_differences(family, loss_kind, seed):
    g, p, x, mask, rng = small_instance(100 + seed, family=family, encoder=seed % 2 == 0)
    p = perturbed(p, rng)
    y = (rng.random((3, 3)) < 0.5).astype(float) if loss_kind == BCE else np.eye(3)[rng.integers(0, 3, 3)]
    _, analytic = loss_and_grad(p, g, x, y, mask, loss_kind)
    numeric = oracles.numeric_gradients(p, g, x, y, mask, loss_kind)
    assert set(analytic) == set(numeric)
    assert oracles.gradient_error(analytic, numeric) <= 1e-4


# -- optimiser -------------------------------------------------------------------------------


def scalar_params(value):
    return ModelParams(
        family=KP,
        edges=np.array([[[value]]]),
        transforms=np.zeros((1, 1, 1, 1)),
        decoder_w=np.zeros((1, 1)),
        decoder_b=np.zeros(1),
    )


def zero_grads(p):
    return {k: np.zeros_like(v) for k, v in p.arrays().items()}


def test_adam_zero_gradient_leaves_parameters():
    p = scalar_params(1.5)
    q, state = adam_step(AdamState(), p, zero_grads(p))
    assert q.edges[0, 0, 0] == 1.5 and state.step == 1


@pytest.mark.parametrize("g", [0.3, -4.0])
def test_adam_scalar_steps_by_hand(g):
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = scalar_params(1.0)
    state = AdamState(lr=lr)
    m = v = 0.0
    theta = 1.0
    for t in range(1, 4):
        grads = zero_grads(p)
        grads["edges"] = np.array([[[g * t]]])
        p, state = adam_step(state, p, grads)
        m = b1 * m + (1 - b1) * g * t
        v = b2 * v + (1 - b2) * (g * t) ** 2
        theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.edges[0, 0, 0] == pytest.approx(theta, abs=1e-15)
    # first step moves by lr in the direction opposite the gradient
    q, _ = adam_step(AdamState(lr=lr), scalar_params(1.0), {**zero_grads(p), "edges": np.array([[[g]]])})
    assert q.edges[0, 0, 0] - 1.0 == pytest.approx(-lr * np.sign(g), rel=1e-6)


def test_adam_rejects_wrong_gradient_shape():
    p = scalar_params(0.0)
    grads = zero_grads(p)
    grads["edges"] = np.zeros(2)
    with pytest.raises(DimensionMismatch):
        adam_step(AdamState(), p, grads)


# -- training loop ---------------------------------------------------------------------------


def test_training_is_deterministic_and_best_loss_monotone():
    g, p, x, mask, _ = small_instance(8, family=SKP)
    y = np.eye(3)
    cfg = TrainConfig(mask=mask, max_steps=60, plateau_window=500)
    a, b = train(p, g, x, y, cfg), train(p, g, x, y, cfg)
    assert a.history == b.history
    for k, v in a.params.arrays().items():
        assert np.array_equal(v, b.params.arrays()[k])
    best = [h[2] for h in a.history]
    assert all(later <= earlier for earlier, later in zip(best, best[1:]))
    assert a.best_loss < a.history[0][1]


def test_plateau_stops_converged_run():
    g, p, x, mask, _ = small_instance(9)
    res = train(p, g, x, np.eye(3), TrainConfig(mask=mask, max_steps=10_000, plateau_window=25, lr=0.0))
    assert res.steps == 26
    assert all(h[1] == res.history[0][1] for h in res.history)


def test_training_learns_a_small_task():
    g, p, x, mask, _ = small_instance(10, family=SKP)
    y = np.eye(3)
    res = train(p, g, x, y, TrainConfig(mask=mask, max_steps=400, loss_kind=CE, lr=0.05))
    assert res.accuracy == 1.0
    assert res.history[-1][2] < 0.1
    assert res.history_csv().splitlines()[0] == "step,loss,best_loss"


def test_softmax_aggregations_stay_row_stochastic_during_training():
    g, p, x, mask, _ = small_instance(11, family=SOFTMAX_SKP)
    cfg = TrainConfig(mask=mask, max_steps=1, plateau_window=10)
    state = AdamState(lr=0.2)
    y = np.eye(3)
    for _ in range(30):
        _, grads = loss_and_grad(p, g, x, y, mask, CE)
        p, state = adam_step(state, p, grads)
        for k in range(p.layers):
            mats, _ = aggregations(p, g, k)
            for a in mats:
                assert np.allclose(a.sum(axis=1), 1.0, atol=1e-10)
                assert a[a > 0].min() >= p.min_weight - 1e-15


def test_divergence_is_reported_with_history():
    g, p, x, mask, _ = small_instance(12)
    bad = x.copy()
    bad[:, 0] = np.inf
    with pytest.raises(NonFiniteLoss) as err:
        train(p, g, bad, np.eye(3), TrainConfig(mask=mask, max_steps=5))
    assert err.value.history == []


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mask=np.arange(2), plateau_window=0)
    with pytest.raises(ValueError):
        TrainConfig(mask=np.arange(2), max_steps=0)


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(0, 2**16))
def test_checkpoint_round_trip(family, seed):
    g, p, x, mask, _ = small_instance(seed % 50, family=family)
    grads = loss_and_grad(p, g, x, np.eye(3), mask, CE)[1]
    p2, state = adam_step(AdamState(), p, grads)
    q, state_back = load_checkpoint(save_checkpoint(p2, state))
    assert q.family == family and q.min_weight == p2.min_weight
    for k, v in p2.arrays().items():
        assert np.array_equal(q.arrays()[k], v)
    assert state_back.step == 1
    for k in state.m:
        assert np.array_equal(state_back.m[k], state.m[k]) and np.array_equal(state_back.v[k], state.v[k])
