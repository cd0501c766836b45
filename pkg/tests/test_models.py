import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coin_placer.dataset import TaskGraph, build_graph, kfold_split, normalize_adjacency
from coin_placer.models import (
    AdamState,
    CheckpointError,
    EmptyDataset,
    ShapeMismatch,
    TrainConfig,
    adam_step,
    batch_graphs,
    cross_entropy,
    dt_fit,
    dt_predict,
    gcn_backward,
    gcn_forward,
    gcn_loss,
    init_gcn,
    init_mlp,
    load_gcn,
    load_mlp,
    mlp_backward,
    mlp_forward,
    save_gcn,
    save_mlp,
    softmax,
    train_gcn,
    train_mlp,
    tree_from_json,
    tree_to_json,
)

from conftest import max_relative_error, random_graph


def _zero(p):
    for v in p.as_dict().values():
        v[...] = 0.0
    return p


# dense kernel

def test_softmax_rows_and_cross_entropy():
    z = np.random.default_rng(0).normal(size=(20, 9)) * 30
    p = softmax(z)
    assert np.allclose(p.sum(1), 1, atol=1e-9) and (p >= 0).all()
    assert cross_entropy(np.full((4, 9), 1 / 9), [0, 3, 5, 8]) == pytest.approx(math.log(9))
    assert cross_entropy(np.eye(3), [0, 1, 2]) <= 1e-9
    probs = np.array([[0.5, 0.5], [0.75, 0.25]])
    assert cross_entropy(probs, [0, 1]) == pytest.approx(-(math.log(0.5) + math.log(0.25)) / 2)
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


# GCN forward

def test_gcn_rows_sum_to_one():
    rng = np.random.default_rng(1)
    for _ in range(10):
        g = random_graph(rng, 10, 6, 4)
        p = init_gcn(6, 4, 8, seed=int(rng.integers(100)))
        probs = gcn_forward(p, g)
        assert np.allclose(probs.sum(1), 1, atol=1e-9) and (probs >= 0).all()


def test_gcn_zero_weights_uniform():
    g = random_graph(np.random.default_rng(2), 7, 5, 9)
    probs = gcn_forward(_zero(init_gcn(5, 9, 8)), g)
    assert np.allclose(probs, 1 / 9, atol=1e-15)


def test_gcn_isolated_node_matches_single_graph():
    rng = np.random.default_rng(3)
    g = random_graph(rng, 8, 6, 3)
    p = init_gcn(6, 3, 8, seed=4)
    alone = TaskGraph(g.features[:1], np.zeros((1, 1)), np.zeros((1, 1)), np.array([True]))
    # equal up to BLAS rounding, which depends on the matrix height
    assert np.allclose(gcn_forward(p, g)[0], gcn_forward(p, alone)[0], rtol=1e-14, atol=0)


def test_gcn_isolated_node_ignores_others():
    rng = np.random.default_rng(5)
    g = random_graph(rng, 9, 6, 3)
    p = init_gcn(6, 3, 8, seed=1)
    before = gcn_forward(p, g)[0]
    g2 = copy.copy(g)
    g2.features = g.features.copy()
    g2.features[1:] = rng.normal(size=g2.features[1:].shape) * 100
    assert np.array_equal(gcn_forward(p, g2)[0], before)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 12))
def test_gcn_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, n, 5, 4)
    p = init_gcn(5, 4, 8, seed=seed % 97)
    perm = rng.permutation(n)
    a = g.adjacency[np.ix_(perm, perm)]
    gp = TaskGraph(g.features[perm], a, normalize_adjacency(a), a.sum(1) == 0)
    assert np.allclose(gcn_forward(p, gp), gcn_forward(p, g)[perm], rtol=0, atol=1e-12)


def test_gcn_shape_mismatch():
    g = random_graph(np.random.default_rng(0), 4, 5, 3)
    with pytest.raises(ShapeMismatch):
        gcn_forward(init_gcn(6, 3, 4), g)


# gradients

@pytest.mark.parametrize("seed", range(5))
def test_gcn_gradient_check(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 11))
    g = random_graph(rng, n, 5, 3)
    assert g.isolated_mask.any() and not g.isolated_mask.all()
    p = init_gcn(5, 3, int(rng.integers(2, 9)), seed=seed)
    grads = gcn_backward(p, g, g.labels)
    err = max_relative_error(lambda: gcn_loss(gcn_forward(p, g), g.labels), p.as_dict(), grads)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradient_check(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 5))
    y = rng.integers(0, 3, 8)
    p = init_mlp(5, 3, hidden=6, seed=seed)
    grads = mlp_backward(p, x, y)
    err = max_relative_error(lambda: cross_entropy(mlp_forward(p, x), y), p.as_dict(), grads)
    assert err < 1e-4


def test_gcn_gradient_vanishes_at_one_hot():
    g = random_graph(np.random.default_rng(0), 5, 4, 3)
    p = _zero(init_gcn(4, 3, 4))
    p.b_out[:] = [200.0, 0.0, 0.0]
    grads = gcn_backward(p, g, np.zeros(5, dtype=int))
    assert math.sqrt(sum((v**2).sum() for v in grads.values())) < 1e-6


def test_gcn_duplicate_graph_gradient():
    g = random_graph(np.random.default_rng(7), 6, 4, 3)
    p = init_gcn(4, 3, 5, seed=2)
    single = gcn_backward(p, g, g.labels)
    both = batch_graphs([g, g])
    double = gcn_backward(p, both, both.labels)
    # mean loss over 2N nodes: the N-scaled sums double
    for name in single:
        assert np.allclose(double[name] * 2 * g.n, 2 * single[name] * g.n, atol=1e-12)


def test_clique_operator_equals_block_diagonal():
    rng = np.random.default_rng(11)
    graphs = []
    for _ in range(5):
        n = int(rng.integers(1, 15))
        graphs.append(build_graph(rng.normal(size=(n, 3)), "same_ap", aps=rng.integers(0, 4, n),
                                  labels=rng.integers(0, 3, n)))
    op = batch_graphs(graphs).normalized_adjacency
    dense = np.zeros((sum(g.n for g in graphs),) * 2)
    pos = 0
    for g in graphs:
        dense[pos:pos + g.n, pos:pos + g.n] = g.normalized_adjacency
        pos += g.n
    h = rng.normal(size=(dense.shape[0], 4))
    assert np.allclose(op @ h, dense @ h, rtol=0, atol=1e-14)
    assert np.allclose(op.T @ h, dense.T @ h, rtol=0, atol=1e-14)


def test_batched_forward_matches_per_graph():
    rng = np.random.default_rng(12)
    graphs = [random_graph(rng, int(rng.integers(2, 8)), 4, 3) for _ in range(4)]
    p = init_gcn(4, 3, 6, seed=0)
    joint = gcn_forward(p, batch_graphs(graphs))
    assert np.allclose(joint, np.vstack([gcn_forward(p, g) for g in graphs]), atol=1e-14)


# Adam

def test_adam_zero_grad_noop():
    w = {"w": np.array([1.0, -2.0])}
    adam_step(w, {"w": np.zeros(2)}, AdamState(), 0.01)
    assert np.array_equal(w["w"], [1.0, -2.0])


def test_adam_first_step():
    w = {"w": np.array([1.0])}
    state = AdamState()
    adam_step(w, {"w": np.array([1.0])}, state, 0.01)
    assert w["w"][0] == pytest.approx(1 - 0.01 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_updates_decay_without_sign_flip():
    w = {"w": np.array([1.0])}
    state = AdamState()
    adam_step(w, {"w": np.array([1.0])}, state, 0.01)
    steps = []
    for _ in range(2):
        before = w["w"][0]
        adam_step(w, {"w": np.array([0.0])}, state, 0.01)
        steps.append(before - w["w"][0])
    assert steps[0] > 0 and steps[1] > 0 and steps[1] < steps[0]


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.01)


# training

def _toy_graphs(n_graphs=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_graphs):
        n = 12
        x = rng.normal(size=(n, 5))
        y = (x[:, 0] > 0).astype(int) + (x[:, 1] > 0.5).astype(int)
        out.append(build_graph(x, "same_ap", aps=rng.integers(0, 3, n), labels=y))
    return out


def test_train_gcn_learns_and_is_deterministic():
    graphs = _toy_graphs()
    plan = kfold_split(len(graphs), 3, 0)
    cfg = TrainConfig(epochs=60, learning_rate=0.01, seed=0, delta=8)
    a = train_gcn(graphs, plan, cfg, 3)
    b = train_gcn(graphs, plan, cfg, 3)
    assert len(a) == 3 and all(len(r.history) == 60 for r in a)
    assert a[0].history[-1]["train_loss"] <= a[0].history[0]["train_loss"]
    assert [r.history for r in a] == [r.history for r in b]
    only = train_gcn(graphs, plan, cfg, 3, sessions=[1])
    assert only[0].history == a[1].history


def test_train_mlp_learns():
    graphs = _toy_graphs()
    plan = kfold_split(len(graphs), 3, 0)
    res = train_mlp([g.features for g in graphs], [g.labels for g in graphs], plan,
                    TrainConfig(epochs=60, delta=8), 3)
    assert res[0].history[-1]["train_loss"] < res[0].history[0]["train_loss"]


def test_train_requires_data():
    with pytest.raises(EmptyDataset):
        train_gcn([], kfold_split(3, 3), TrainConfig(), 3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


# MLP

def test_mlp_zero_weights_uniform():
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert np.allclose(mlp_forward(_zero(init_mlp(4, 9)), x), 1 / 9)


def test_mlp_rows_independent():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 4))
    p = init_mlp(4, 3, seed=3)
    full = mlp_forward(p, x)
    perm = rng.permutation(10)
    assert np.allclose(mlp_forward(p, x[perm]), full[perm], atol=1e-15)
    assert np.allclose(mlp_forward(p, x[:1]), full[:1], atol=1e-15)


# decision tree

def test_tree_single_label():
    t = dt_fit(np.random.default_rng(0).normal(size=(10, 3)), np.full(10, 4))
    assert t.depth() == 0 and (dt_predict(t, np.zeros((3, 3))) == 4).all()


def test_tree_two_samples():
    t = dt_fit(np.array([[0.0, 5.0], [1.0, 5.0]]), np.array([0, 1]))
    assert t.depth() == 1 and t.feature[0] == 0
    assert list(dt_predict(t, np.array([[0.0, 5.0], [1.0, 5.0]]))) == [0, 1]


def test_tree_consistency_unlimited_depth():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(300, 5))
    y = rng.integers(0, 4, 300)
    t = dt_fit(x, y, max_depth=None)
    assert (dt_predict(t, x) == y).all()


def test_tree_depth_limit_and_json():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(200, 4))
    y = (x[:, 0] + x[:, 1] > 0).astype(int) + (x[:, 2] > 1).astype(int)
    t = dt_fit(x, y, max_depth=3)
    assert t.depth() <= 3 and np.isfinite(t.threshold).all()
    back = tree_from_json(tree_to_json(t))
    assert np.array_equal(dt_predict(back, x), dt_predict(t, x))
    assert json.loads(tree_to_json(t))["max_depth"] == 3


def test_tree_empty():
    with pytest.raises(EmptyDataset):
        dt_fit(np.zeros((0, 3)), np.zeros(0, dtype=int))


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    g = init_gcn(27, 9, 64, seed=1)
    save_gcn(tmp_path / "g.ckpt", g)
    back = load_gcn(tmp_path / "g.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(g.as_dict().values(), back.as_dict().values()))
    m = init_mlp(27, 9, seed=2)
    save_mlp(tmp_path / "m.ckpt", m)
    back_m = load_mlp(tmp_path / "m.ckpt")
    assert all(np.array_equal(a, b) for a, b in zip(m.as_dict().values(), back_m.as_dict().values()))


def test_checkpoint_layout(tmp_path):
    g = init_gcn(27, 9, 4, seed=1)
    save_gcn(tmp_path / "g.ckpt", g)
    raw = (tmp_path / "g.ckpt").read_bytes()
    assert raw[:5] == b"CPGCN"
    header = np.frombuffer(raw[8:24], dtype="<u4")
    assert list(header) == [1, 27, 4, 9]
    first = np.frombuffer(raw[24:24 + 8 * 27 * 4], dtype="<f8").reshape(27, 4)
    assert np.array_equal(first, g.W_embed)


def test_checkpoint_rejects_bad_files(tmp_path):
    save_gcn(tmp_path / "g.ckpt", init_gcn(5, 3, 4))
    raw = (tmp_path / "g.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_gcn(tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError):
        load_mlp(tmp_path / "g.ckpt")
