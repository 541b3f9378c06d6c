import numpy as np
import pytest

from conftest import tiny_sbm
from gltprune import diffcore as dc
from gltprune import gnn, otax
from gltprune.graphio import Graph
from oracles import cross_entropy_sum, dense_gcn


def _setup(seed=0, hidden=5):
    g = tiny_sbm(seed)
    params = gnn.GcnParams.init((g.f, hidden, g.c), seed)
    rng = np.random.default_rng(seed + 100)
    wmask = [rng.uniform(0.2, 1.0, w.shape) for w in params.weights]
    emask = rng.uniform(0.0, 1.0, g.num_edges)
    return g, params, wmask, emask


@pytest.mark.parametrize("mode", ["post", "renormalize"])
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_dense_oracle(mode, seed):
    g, params, wmask, emask = _setup(seed)
    ev = gnn.evaluate(g, params.weights, wmask, emask, mode=mode, wrt=())
    expected = dense_gcn(g.features, g.n, g.edges, emask, params.weights, wmask, mode)
    np.testing.assert_allclose(ev.z, expected, atol=1e-12)
    assert ev.l0 == pytest.approx(cross_entropy_sum(expected, g.labels, g.train), abs=1e-10)


def test_three_layer_forward_matches_oracle():
    g, _, _, emask = _setup(1)
    params = gnn.GcnParams.init((g.f, 4, 4, g.c), 3)
    ones = [np.ones_like(w) for w in params.weights]
    ev = gnn.evaluate(g, params.weights, ones, emask, wrt=())
    np.testing.assert_allclose(ev.z, dense_gcn(g.features, g.n, g.edges, emask, params.weights, ones), atol=1e-12)


def test_softmax_rows_sum_to_one():
    g, params, wmask, emask = _setup(2)
    z = gnn.evaluate(g, params.weights, wmask, emask, wrt=()).z
    np.testing.assert_allclose(z.sum(axis=1), 1.0)
    assert np.all(z >= 0)


def test_loss_combined_adds_lambda_times_l1():
    g, params, wmask, emask = _setup(0)
    cfg = otax.SinkhornConfig()
    ev0 = gnn.evaluate(g, params.weights, wmask, emask, lam=0.0, wrt=())
    ev = gnn.evaluate(g, params.weights, wmask, emask, lam=0.25, ot_cfg=cfg, wrt=())
    l1 = float(otax.aux_loss_l1(ev0.z, cfg).value)
    assert ev.l1 == pytest.approx(l1, rel=1e-12)
    assert ev.loss == pytest.approx(ev0.l0 + 0.25 * l1, rel=1e-12)
    with pytest.raises(ValueError):
        gnn.evaluate(g, params.weights, wmask, emask, lam=-1.0)


def test_gradient_keys_follow_wrt():
    g, params, wmask, emask = _setup(0)
    ev = gnn.evaluate(g, params.weights, wmask, emask, wrt=("m", "g"))
    assert set(ev.grads) == {"m0", "m1", "g"}


def test_forward_rejects_width_mismatch():
    g, params, wmask, emask = _setup(0)
    bad = [params.weights[0], np.ones((3, g.c))]
    with pytest.raises(ValueError, match="width"):
        gnn.evaluate(g, bad, None, emask)


def test_glorot_init_bounds_and_determinism():
    a = gnn.GcnParams.init((10, 6, 3), 5)
    b = gnn.GcnParams.init((10, 6, 3), 5)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    assert np.abs(a.w0).max() <= np.sqrt(6 / 16)
    assert a.dims == (10, 6, 3) and a.hidden == 6


def test_rewind_restores_bitwise_and_theta0_read_only():
    p = gnn.GcnParams.init((4, 3, 2), 0)
    snap = [t.copy() for t in p.theta0]
    p.weights = [w * 7 + 1 for w in p.weights]
    p.rewind()
    for w, s in zip(p.weights, snap):
        assert np.array_equal(w, s)
    p.rewind()
    for w, s in zip(p.weights, snap):
        assert np.array_equal(w, s)
    with pytest.raises(ValueError):
        p.theta0[0][0, 0] = 1.0
    p.weights[0][0, 0] = 99.0  # the working copy is separate from the snapshot
    assert p.theta0[0][0, 0] == snap[0][0, 0]


def test_weight_mask_flat_round_trip():
    m = gnn.WeightMask.ones([(2, 3), (3, 1)])
    vals = np.arange(9.0)
    frozen = vals % 2 == 0
    m.set_flat(vals, frozen)
    assert m.m0.shape == (2, 3) and m.m1.shape == (3, 1)
    np.testing.assert_array_equal(m.flat(), vals)
    np.testing.assert_array_equal(m.flat_frozen(), frozen)


def test_weight_mask_noise_range():
    m = gnn.WeightMask.ones([(50, 4)], noise=1e-3, rng=np.random.default_rng(0))
    assert np.all((m.m0 >= 1.0) & (m.m0 <= 1.001))


def test_fit_uses_validation_for_selection(small_graph):
    p = gnn.GcnParams.init((small_graph.f, 8, small_graph.c), 0)
    res = gnn.fit(small_graph, p.weights, None, np.ones(small_graph.num_edges), 30, 0.05)
    vals = [h["val_acc"] for h in res.history]
    assert len(res.history) == 31
    assert res.best_epoch == int(np.argmax(vals))
    assert res.test_acc == res.history[res.best_epoch]["test_acc"]


def test_fit_trains_dense_sbm_well(sbm_graph):
    p = gnn.GcnParams.init((sbm_graph.f, 16, sbm_graph.c), 0)
    res = gnn.fit(sbm_graph, p.weights, None, np.ones(sbm_graph.num_edges), 100, 0.01)
    assert res.test_acc >= 0.95
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_fit_frozen_layer_stays_fixed(small_graph):
    p = gnn.GcnParams.init((small_graph.f, 4, small_graph.c), 0)
    res = gnn.fit(small_graph, p.weights, None, np.ones(small_graph.num_edges), 5, 0.1, trainable=[False, True])
    assert np.array_equal(res.weights[0], p.weights[0])
    assert not np.array_equal(res.weights[1], p.weights[1])


def test_zero_edge_mask_is_feature_only_model(sbm_graph):
    # all edges removed: the model becomes a per-node MLP; it must beat the majority class
    p = gnn.GcnParams.init((sbm_graph.f, 16, sbm_graph.c), 0)
    res = gnn.fit(sbm_graph, p.weights, None, np.zeros(sbm_graph.num_edges), 200, 0.01, mode="renormalize")
    majority = np.bincount(sbm_graph.labels[sbm_graph.test]).max() / len(sbm_graph.test)
    assert res.test_acc > majority


def test_accuracy_empty_index_is_nan(small_graph):
    assert np.isnan(gnn.accuracy(np.ones((small_graph.n, 3)), small_graph, []))


def test_l0_gradient_vanishes_outside_receptive_field():
    # path 0-1-2-3-4, node 0 labeled; only edges 0-1 and 1-2 can influence L0
    g = Graph(5, np.eye(5)[:, :3] + 0.1, np.array([0, 1, 2, 0, 1]), [[0, 1], [1, 2], [2, 3], [3, 4]], [0], [1], [2, 3, 4])
    p = gnn.GcnParams.init((3, 4, 3), 0)
    ev = gnn.evaluate(g, p.weights, None, np.full(4, 0.7), wrt=("g",))
    grad = ev.grads["g"]
    assert grad[2] == 0.0 and grad[3] == 0.0
    assert grad[0] != 0.0 and grad[1] != 0.0


def test_loss_l0_hand_value():
    tape = dc.Tape()
    z = tape.const(np.array([[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]]))
    g = Graph(3, np.zeros((3, 1)), np.array([0, 0, 1]), np.zeros((0, 2)), [1, 2], [0], [])
    assert float(gnn.loss_l0(z, g).value) == pytest.approx(-np.log(0.9) - np.log(0.8))
