import math

import numpy as np
import pytest

from doublespend_gnn import InvalidInputError, InvalidParametersError, ShapeError
from doublespend_gnn import gnn
from doublespend_gnn.gnn import (
    AdamState, GraphData, LayerKind, adam_step, apply_dropout, attention_coefficients, backward,
    cross_entropy, forward, gat_forward, gcn_forward, grad_check, init_params, load_checkpoint,
    normalize_adjacency, readout_classify, sage_forward, save_checkpoint)
from doublespend_gnn.topology import Topology, generate_ba
from oracles import gat_loop, gcn_dense, random_graph, sage_loop

SIX = Topology.from_edges(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 2), (1, 4)])


def rand_graph(seed, n):
    rng = np.random.default_rng(seed)
    edges = random_graph(rng, n, 0.5)
    return Topology.from_edges(n, edges), rng


# -- normalisation -----------------------------------------------------------

def test_norm_adj_examples():
    assert normalize_adjacency(Topology.from_edges(1, [])).toarray().tolist() == [[1.0]]
    k2 = normalize_adjacency(Topology.from_edges(2, [(0, 1)])).toarray()
    np.testing.assert_allclose(k2, [[0.5, 0.5], [0.5, 0.5]])
    path = normalize_adjacency(Topology.from_edges(3, [(0, 1), (1, 2)]))
    assert path[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-4)
    assert abs(path - path.T).max() == 0


# -- layers --------------------------------------------------------------------

def test_gcn_examples():
    one = normalize_adjacency(Topology.from_edges(1, []))
    assert gcn_forward(one, np.array([[1.0, -2.0]]), np.eye(2)).tolist() == [[1.0, 0.0]]
    t, rng = rand_graph(0, 4)
    x = rng.normal(size=(4, 3))
    assert not gcn_forward(normalize_adjacency(t), x, np.zeros((3, 5))).any()


@pytest.mark.parametrize("seed", range(5))
def test_gcn_matches_dense(seed):
    t, rng = rand_graph(seed, 4)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    np.testing.assert_allclose(gcn_forward(normalize_adjacency(t), x, w), gcn_dense(t.adjacency, x, w),
                               rtol=1e-12, atol=1e-14)


def test_sage_examples():
    iso = Topology.from_edges(1, [])
    out = sage_forward(iso, np.array([[3.0, -1.0]]), np.eye(2), np.full((2, 2), 7.0))
    assert out.tolist() == [[3.0, 0.0]]
    rng = np.random.default_rng(1)
    k2 = Topology.from_edges(2, [(0, 1)])
    x0 = rng.normal(size=3)
    ws, wn = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    out = sage_forward(k2, np.array([x0, x0]), ws, wn)
    expected = np.maximum((ws + wn).T @ x0, 0)
    np.testing.assert_allclose(out, [expected, expected], rtol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_sage_matches_loop(seed):
    t, rng = rand_graph(seed, 5)
    x, ws, wn = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(sage_forward(t, x, ws, wn), sage_loop(t.adjacency, x, ws, wn),
                               rtol=1e-12, atol=1e-14)


def test_gat_examples():
    rng = np.random.default_rng(2)
    iso = Topology.from_edges(1, [])
    x, w, a = rng.normal(size=(1, 3)), rng.normal(size=(3, 4)), rng.normal(size=8)
    np.testing.assert_allclose(gat_forward(iso, x, w, a), np.maximum(x @ w, 0))
    assert attention_coefficients(iso, x, w, a).toarray().tolist() == [[1.0]]
    t = generate_ba(12, 2, 0)
    x = rng.normal(size=(12, 3))
    att = attention_coefficients(t, x, w, np.zeros(8)).toarray()
    for v in range(12):
        hood = [v] + list(t.neighbors(v))
        np.testing.assert_allclose(att[v, hood], 1 / len(hood))


@pytest.mark.parametrize("seed", range(5))
def test_gat_matches_loop(seed):
    t, rng = rand_graph(seed, 4)
    x, w, a = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=10)
    expected, alphas = gat_loop(t.adjacency, x, w, a)
    np.testing.assert_allclose(gat_forward(t, x, w, a), expected, rtol=1e-12, atol=1e-14)
    att = attention_coefficients(t, x, w, a).toarray()
    np.testing.assert_allclose(att.sum(axis=1), 1.0, atol=1e-12)
    for v, row in enumerate(alphas):
        for u, al in row.items():
            assert att[v, u] == pytest.approx(al, rel=1e-12)


@pytest.mark.parametrize("kind", list(LayerKind))
def test_shape_errors(kind):
    t = generate_ba(10, 2, 0)
    x = np.ones((10, 3))
    with pytest.raises(ShapeError):
        gcn_forward(normalize_adjacency(t), x, np.ones((4, 2)))
    with pytest.raises(ShapeError):
        sage_forward(t, x, np.ones((3, 2)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        gat_forward(t, x, np.ones((3, 2)), np.ones(3))
    params = init_params(kind, 12, 8)
    with pytest.raises(ShapeError):
        forward(params, t, np.ones((10, 11)))


@pytest.mark.parametrize("kind", list(LayerKind))
def test_permutation_equivariance(kind):
    rng = np.random.default_rng(7)
    n = 15
    edges = random_graph(rng, n, 0.3)
    x = rng.normal(size=(n, 12))
    perm = rng.permutation(n)
    t = Topology.from_edges(n, edges)
    tp = Topology.from_edges(n, [(perm[u], perm[v]) for u, v in edges])
    xp = np.empty_like(x)
    xp[perm] = x
    params = init_params(kind, 12, 8, seed=3)
    a, b = forward(params, t, x), forward(params, tp, xp)
    np.testing.assert_allclose(b.h_out[perm], a.h_out, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(b.logits, a.logits, rtol=1e-10)


# -- readout, dropout, loss ------------------------------------------------------

def test_readout_examples():
    assert readout_classify(np.zeros((1, 2)), np.eye(2), np.zeros(2)).tolist() == [0.5, 0.5]
    rng = np.random.default_rng(0)
    h = rng.normal(size=(7, 4))
    assert readout_classify(h, np.zeros((4, 2)), np.array([1.5, -2.0])).tolist() == [1.5, -2.0]
    e = np.array([1.0, -1.0])
    s = 1 / (1 + math.exp(-2))
    assert s == pytest.approx(0.8808, abs=1e-4)
    assert gnn.softmax_rows(e[None])[0] == pytest.approx([s, 1 - s])
    pooled = gnn.pooled_readout(np.array([e, -e]))
    np.testing.assert_allclose(pooled, [0.5, 0.5], atol=1e-15)
    with pytest.raises(InvalidInputError):
        gnn.pooled_readout(np.zeros((0, 2)))


def test_pooled_is_probability_vector():
    rng = np.random.default_rng(4)
    pooled = gnn.pooled_readout(rng.normal(scale=30, size=(50, 16)))
    assert (pooled > 0).all() and (pooled < 1).all()
    assert pooled.sum() == pytest.approx(1.0, abs=1e-12)


def test_dropout():
    h = np.random.default_rng(0).normal(size=(5, 4))
    assert apply_dropout(h, 0.0, 1) is h
    assert apply_dropout(h, 0.9, 1, training=False) is h
    big = apply_dropout(np.ones(10**6), 0.5, 123)
    assert abs(big.mean() - 1.0) < 0.01
    assert set(np.unique(big)) == {0.0, 2.0}
    with pytest.raises(InvalidParametersError):
        apply_dropout(h, 1.0, 0)


def test_cross_entropy():
    assert cross_entropy(np.array([0.0, 0.0]), 0) == pytest.approx(math.log(2))
    assert cross_entropy(np.array([0.0, 0.0]), 1) == pytest.approx(0.6931, abs=1e-4)
    big = cross_entropy(np.array([100.0, -100.0]), 0)
    assert math.isfinite(big) and 0 <= big < 1e-80
    assert cross_entropy(np.array([1.0, 3.0]), 1) == pytest.approx(math.log1p(math.exp(-2)), rel=1e-12)
    assert cross_entropy(np.array([1.0, 3.0]), 1) == pytest.approx(0.1269, abs=1e-4)


def test_predict_tie_goes_to_attack():
    assert gnn.predict_label(np.array([0.3, 0.3])) == 0
    assert gnn.predict_label(np.array([0.3, 0.31])) == 1


# -- gradients -----------------------------------------------------------------

def test_head_bias_gradient_at_equal_logits():
    params = init_params(LayerKind.GCN, 12, 8, seed=0)
    params.blocks["head.W"][:] = 0
    params.blocks["head.b"][:] = [0.4, 0.4]
    x = np.random.default_rng(0).normal(size=(6, 12))
    grads = backward(params, forward(params, SIX, x), 1)
    np.testing.assert_allclose(grads["head.b"], [0.5, -0.5])


@pytest.mark.parametrize("kind", list(LayerKind))
@pytest.mark.parametrize("seed", range(3))
def test_grad_check(kind, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 12))
    params = init_params(kind, 12, 32, seed=seed)
    assert grad_check(params, SIX, x, seed % 2, h=1e-5, seed=seed) < 1e-4


@pytest.mark.parametrize("kind", list(LayerKind))
def test_gradients_deterministic_with_dropout(kind):
    x = np.random.default_rng(1).normal(size=(6, 12))
    params = init_params(kind, 12, 16, 0.5, seed=2)
    g1 = backward(params, forward(params, SIX, x, training=True, rng=77), 1)
    g2 = backward(params, forward(params, SIX, x, training=True, rng=77), 1)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])
        assert np.isfinite(g1[k]).all()
        assert g1[k].shape == params.blocks[k].shape


@pytest.mark.parametrize("kind", list(LayerKind))
def test_dropout_gradient_matches_fixed_mask_difference(kind):
    # With masks fixed, the trained network is still a smooth function of the weights.
    x = np.random.default_rng(5).normal(size=(6, 12))
    params = init_params(kind, 12, 16, 0.3, seed=4)
    cache = forward(params, SIX, x, training=True, rng=9)
    grads = backward(params, cache, 0)
    name = "layer1." + ("W_self" if kind is LayerKind.SAGE else "W")
    h = 1e-6
    for idx in [(0, 0), (3, 5), (11, 15)]:
        def loss(delta):
            p = params.copy()
            p.blocks[name][idx] += delta
            return cross_entropy(forward(p, SIX, x, training=True, rng=9).logits, 0)
        fd = (loss(h) - loss(-h)) / (2 * h)
        assert grads[name][idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)


# -- optimiser -----------------------------------------------------------------

def test_adam_first_step():
    blocks = {"w": np.array([2.0])}
    new, state = adam_step(blocks, {"w": np.array([1.0])}, AdamState.fresh(blocks, lr=0.1))
    assert new["w"][0] == pytest.approx(1.9, abs=1e-6)
    assert state.t == 1
    assert blocks["w"][0] == 2.0


def test_adam_zero_gradient():
    blocks = {"w": np.array([[1.0, -3.0]])}
    new, _ = adam_step(blocks, {"w": np.zeros((1, 2))}, AdamState.fresh(blocks))
    assert np.array_equal(new["w"], blocks["w"])


def test_adam_descends_quadratic():
    blocks = {"w": np.array([3.0])}
    state = AdamState.fresh(blocks, lr=0.1)
    losses = [float(blocks["w"][0] ** 2)]
    for _ in range(2):
        blocks, state = adam_step(blocks, {"w": 2 * blocks["w"]}, state)
        losses.append(float(blocks["w"][0] ** 2))
    assert losses[0] > losses[1] > losses[2]


def test_adam_shape_mismatch():
    blocks = {"w": np.zeros(3)}
    with pytest.raises(ShapeError):
        adam_step(blocks, {"w": np.zeros(4)}, AdamState.fresh(blocks))


# -- model plumbing ------------------------------------------------------------

@pytest.mark.parametrize("kind", list(LayerKind))
def test_init_shapes(kind):
    p = init_params(kind, 12, 32, seed=0)
    assert {k: v.shape for k, v in p.blocks.items()} == p.expected_shapes()
    assert list(p.blocks) == gnn.block_names(kind)
    assert not p.blocks["head.b"].any()
    for k, v in p.blocks.items():
        if k != "head.b":
            fan = v.shape if v.ndim == 2 else (v.shape[0], 1)
            assert np.abs(v).max() <= math.sqrt(6 / sum(fan))
    with pytest.raises(InvalidParametersError):
        init_params(kind, dropout_p=1.0)


@pytest.mark.parametrize("kind", list(LayerKind))
def test_checkpoint_round_trip(tmp_path, kind):
    p = init_params(kind, 12, 8, 0.25, seed=5)
    path = tmp_path / "m.json"
    save_checkpoint(p, path, {"lr": 0.01})
    back, config = load_checkpoint(path)
    assert config == {"lr": 0.01}
    assert back.layer_kind is kind and back.dropout_p == 0.25
    for k in p.blocks:
        assert np.array_equal(back.blocks[k], p.blocks[k])
    save_checkpoint(back, tmp_path / "again.json", config)
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()


def test_graphdata_reuse_matches_topology():
    t = generate_ba(30, 3, 2)
    x = np.random.default_rng(0).normal(size=(30, 12))
    p = init_params(LayerKind.GAT, 12, 8, seed=1)
    assert np.array_equal(forward(p, t, x).logits, forward(p, GraphData.from_topology(t), x).logits)
