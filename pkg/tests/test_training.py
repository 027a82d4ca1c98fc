import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import finite_difference_report, toy_model
from mgformer.config import RunConfig
from mgformer.graph import InteractionGraph, split_edges
from mgformer.spectral import truncated_svd
from mgformer.synthetic import make_block_graph
from mgformer.training import (
    Adam,
    ModelParams,
    TrainingDiverged,
    degree_bucket,
    directau_loss,
    directau_loss_and_grad,
    train,
)


def _reference_loss(U, I, lam):
    """Loop form: squared distances of normalized pairs and pairwise log-mean-exp."""
    def unit(v):
        n = math.sqrt(sum(x * x for x in v))
        return [x / n for x in v]

    U = [unit(u) for u in np.asarray(U).tolist()]
    I = [unit(i) for i in np.asarray(I).tolist()]

    def sq(a, b):
        return sum((x - y) ** 2 for x, y in zip(a, b))

    align = sum(sq(u, i) for u, i in zip(U, I)) / len(U)

    def uniform(Y):
        vals = [math.exp(-sq(Y[p], Y[q])) for p, q in itertools.permutations(range(len(Y)), 2)]
        return math.log(sum(vals) / len(vals))

    return align + lam * (uniform(U) + uniform(I))


def _unit_rows(n, d):
    return st.lists(st.lists(st.floats(-2, 2), min_size=d, max_size=d), min_size=n, max_size=n).filter(
        lambda rows: all(sum(x * x for x in r) > 1e-3 for r in rows)
    )


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6).flatmap(lambda n: st.tuples(_unit_rows(n, 3), _unit_rows(n, 3))), st.floats(0, 2))
def test_loss_matches_loop_reference(pair, lam):
    U, I = np.array(pair[0]), np.array(pair[1])
    U = U / np.linalg.norm(U, axis=1, keepdims=True) * np.arange(1, len(U) + 1)[:, None]
    I = I / np.linalg.norm(I, axis=1, keepdims=True)
    assert directau_loss(U, I, lam).total == pytest.approx(_reference_loss(U, I, lam), rel=1e-10, abs=1e-12)


def test_loss_is_scale_invariant_when_normalized():
    rng = np.random.default_rng(0)
    U, I = rng.normal(size=(2, 8, 4))
    a = directau_loss(U, I)
    b = directau_loss(3.0 * U, 0.5 * I)
    assert a.total == pytest.approx(b.total, rel=1e-12)


def test_loss_bounds():
    rng = np.random.default_rng(1)
    U, I = rng.normal(size=(2, 10, 5))
    loss = directau_loss(U, I)
    # unit vectors: squared distances lie in [0, 4]
    assert 0 <= loss.align <= 4
    assert -8 <= loss.uniform <= 0
    assert directau_loss(U, U).align == 0.0


def test_loss_needs_two_pairs():
    with pytest.raises(ValueError):
        directau_loss(np.ones((1, 3)), np.ones((1, 3)))


@pytest.mark.parametrize("normalize", [True, False])
@pytest.mark.parametrize("lam", [0.0, 0.7])
def test_loss_gradient_matches_finite_differences(normalize, lam):
    rng = np.random.default_rng(2)
    U, I = rng.normal(size=(2, 6, 3))
    _, g_u, g_i = directau_loss_and_grad(U, I, lam, normalize)
    eps = 1e-6
    for X, G, which in ((U, g_u, 0), (I, g_i, 1)):
        for idx in np.ndindex(X.shape):
            up, down = X.copy(), X.copy()
            up[idx] += eps
            down[idx] -= eps
            args_up = (up, I) if which == 0 else (U, up)
            args_down = (down, I) if which == 0 else (U, down)
            fd = (directau_loss(*args_up, lam, normalize).total - directau_loss(*args_down, lam, normalize).total) / (2 * eps)
            assert G[idx] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_degree_bucket_is_log2_floor():
    deg = np.array([0, 1, 2, 3, 6, 7, 1023, 10**9])
    expected = [min(int(math.floor(math.log2(d + 1))), 15) for d in deg.tolist()]
    assert degree_bucket(deg, 16).tolist() == expected
    with pytest.raises(ValueError):
        degree_bucket(np.array([-1]), 4)


@pytest.mark.parametrize(
    "changes",
    [
        {},
        {"mask_mode": "all_ones"},
        {"mask_mode": "adjacency"},
        {"feature_map": "positive_rf"},
        {"feature_map": "elu1"},
        {"feature_map": "focused"},
        {"structural_encodings": False},
        {"residual": True},
        {"normalize": False},
    ],
    ids=lambda c: ",".join(f"{k}={v}" for k, v in c.items()) or "default",
)
def test_model_gradients_match_finite_differences(changes):
    mask_mode = changes.pop("mask_mode", "sine_degree")
    model, users, items = toy_model(mask_mode=mask_mode, d=4, **changes)
    worst = finite_difference_report(model, users, items, lam=0.7, per_tensor=40)
    assert max(e for e, _ in worst.values()) <= 1e-4, worst


def test_adam_matches_hand_update():
    p = ModelParams(*(np.array([1.0, -2.0]) for _ in range(6)))
    g = ModelParams(*(np.array([0.5, 0.25]) for _ in range(6)))
    Adam(lr=0.1).step(p, g)
    # first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.E, [0.9, -2.1], rtol=1e-7)


def _small_run_config(**changes):
    base = dict(d=8, lr=1e-2, epochs=6, batch_size=128, patience=1, k=10, eval_k=10)
    base.update(changes)
    return RunConfig(**base)


def _block_graph():
    b = make_block_graph(60, 60, per_user=10, seed=3)
    return split_edges(InteractionGraph.from_pairs(b.pairs, 60, 60), seed=0)


def test_training_reduces_loss_and_logs_each_epoch():
    graph = _block_graph()
    enc = truncated_svd(graph.matrix(0), 8)
    seen = []
    result = train(graph, enc, _small_run_config(patience=10), callback=seen.append)
    assert [r["epoch"] for r in result.log] == list(range(1, len(result.log) + 1))
    assert seen == result.log
    assert result.log[-1]["loss"] < result.log[0]["loss"]
    assert len(result.timings) == len(result.log)
    assert "wall_time" not in result.log[0]


def test_early_stopping_restores_best_epoch():
    graph = _block_graph()
    enc = truncated_svd(graph.matrix(0), 8)
    result = train(graph, enc, _small_run_config(epochs=40, patience=0, lr=0.05))
    recalls = [r["val_recall@10"] for r in result.log]
    assert recalls[result.best_epoch - 1] == max(recalls)
    assert len(result.log) <= 40


def test_divergence_raises_with_best_params(monkeypatch):
    graph = _block_graph()
    enc = truncated_svd(graph.matrix(0), 8)
    from mgformer import training

    calls = {"n": 0}
    original = training.MGFormerModel.loss_and_grad

    def flaky(self, *args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 3:
            raise TrainingDiverged("injected")
        return original(self, *args, **kwargs)

    monkeypatch.setattr(training.MGFormerModel, "loss_and_grad", flaky)
    with pytest.raises(TrainingDiverged) as info:
        train(graph, enc, _small_run_config())
    assert info.value.params is not None and info.value.params.all_finite()


def test_stale_summaries_still_train():
    graph = _block_graph()
    enc = truncated_svd(graph.matrix(0), 8)
    result = train(graph, enc, _small_run_config(summary_refresh=4, patience=10))
    assert result.log[-1]["loss"] < result.log[0]["loss"]


def test_identical_representations_give_zero_loss():
    H = np.tile([[0.6, 0.8]], (4, 1))
    loss = directau_loss(H, H)
    assert (loss.align, loss.uniform, loss.total) == (0.0, 0.0, 0.0)


def test_single_pair_uniformity_closed_form():
    # unit vectors at chord length sqrt(ln 2)
    theta = 2 * math.asin(math.sqrt(math.log(2)) / 2)
    U = np.array([[1.0, 0.0], [math.cos(theta), math.sin(theta)]])
    I = np.array([[1.0, 0.0], [1.0, 0.0]])
    loss = directau_loss(U, I, lam=1.0)
    assert loss.uniform == pytest.approx(-math.log(2), abs=1e-12)


def test_zero_lambda_drops_uniformity_gradient():
    rng = np.random.default_rng(3)
    U, I = rng.normal(size=(2, 5, 3))
    _, g_u, g_i = directau_loss_and_grad(U, I, lam=0.0)
    Un = U / np.linalg.norm(U, axis=1, keepdims=True)
    In = I / np.linalg.norm(I, axis=1, keepdims=True)
    g = 2 * (Un - In) / 5
    expected = (g - Un * np.sum(g * Un, axis=1, keepdims=True)) / np.linalg.norm(U, axis=1, keepdims=True)
    np.testing.assert_allclose(g_u, expected, rtol=1e-13)


def test_fresh_centrality_is_one_half_and_buckets_cap():
    params = ModelParams.init(5, 2, 4, 8, 3, seed=0)
    from mgformer.training import degree_centrality

    np.testing.assert_array_equal(degree_centrality(params, np.array([0, 1, 5, 10**6])), 0.5)
    assert degree_bucket(np.array([10**6]), 8).tolist() == [7]


def test_lambda_range_accepted():
    for lam in (0.1, 0.5, 1.0, 2.5, 5.0):
        RunConfig(lam=lam)


def test_frozen_inputs_do_not_change():
    graph = _block_graph()
    enc = truncated_svd(graph.matrix(0), 8)
    from mgformer.training import MGFormerModel

    model = MGFormerModel.build(graph, enc, _small_run_config())
    P, W = model.P.tobytes(), model.fmap.W.tobytes()
    train(graph, enc, _small_run_config(epochs=2), model=model)
    assert model.P.tobytes() == P and model.fmap.W.tobytes() == W


def test_loss_windows_decrease_and_blocks_separate():
    b = make_block_graph(seed=0)
    graph = split_edges(InteractionGraph.from_pairs(b.pairs, 200, 200), seed=0)
    enc = truncated_svd(graph.matrix(0), 16)
    result = train(graph, enc, _small_run_config(d=16, lr=1e-3, epochs=50, batch_size=256, patience=50))
    losses = np.array([r["loss"] for r in result.log])
    windows = losses.reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)
    H = result.model.transform()
    U, I = H[:200], H[200:]
    D = np.sum(U**2, 1)[:, None] + np.sum(I**2, 1)[None, :] - 2 * U @ I.T
    same = b.user_block[:, None] == b.item_block[None, :]
    assert D[same].mean() < D[~same].mean()
