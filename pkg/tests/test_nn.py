import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp, softmax as sp_softmax

from hrslab import nn
from hrslab.stochastic import RunMode
from oracles import central_diff, max_rel_err


def dense_net(W, b):
    W, b = np.asarray(W, float), np.asarray(b, float)
    layer = nn.Dense(W.shape[1], W.shape[0])
    return nn.Network([layer], (W.shape[1],), [{"W": W, "b": b}])


# forward ---------------------------------------------------------------------


def test_dense_identity():
    y, _ = dense_net([[1.0]], [0.0]).forward(np.array([[0.7]]))
    assert y.tolist() == [[0.7]]


def test_relu_definition():
    y, _ = nn.ReLU().forward({}, np.array([[-1.0, 2.0]]), None, RunMode.FIXED)
    assert y.tolist() == [[0.0, 2.0]]


def test_dense_affine():
    y, _ = dense_net([[1.0, 2.0]], [0.5]).forward(np.array([[1.0, 1.0]]))
    assert y.tolist() == [[3.5]]


def test_shape_mismatch_is_descriptive():
    net = nn.build_network([nn.Dense(4, 2)], (4,))
    with pytest.raises(nn.ShapeError, match="expected input"):
        net.forward(np.zeros((3, 5)))


def test_layers_must_compose():
    with pytest.raises(nn.ShapeError, match="layer 1"):
        nn.Network([nn.Dense(4, 3), nn.Dense(2, 2)], (4,))


def test_params_must_match_specs():
    with pytest.raises(nn.ShapeError):
        nn.Network([nn.Dense(2, 2)], (2,), [{"W": np.zeros((3, 2)), "b": np.zeros(2)}])


def test_conv_matches_direct_correlation(rng):
    conv = nn.Conv2D(2, 2, 3, stride=2)
    x = rng.normal(size=(1, 3, 5, 7))
    p = conv.init_params((3, 5, 7), rng)
    y, _ = conv.forward(p, x, None, RunMode.FIXED)
    ref = np.zeros((1, 2, 2, 3))
    for f in range(2):
        for i in range(2):
            for j in range(3):
                patch = x[0, :, 2 * i : 2 * i + 2, 2 * j : 2 * j + 3]
                ref[0, f, i, j] = (patch * p["W"][f]).sum() + p["b"][f]
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_maxpool_ties_go_to_first_element():
    pool = nn.MaxPool(2)
    x = np.ones((1, 1, 2, 2))
    _, cache = pool.forward({}, x, None, RunMode.FIXED)
    _, dx = pool.backward({}, cache, np.array([[[[3.0]]]]))
    assert dx[0, 0].tolist() == [[3.0, 0.0], [0.0, 0.0]]


# loss ------------------------------------------------------------------------


def test_loss_symmetric_logits():
    loss, g = nn.loss_and_grad(np.array([0.0, 0.0]), 0)
    assert loss == pytest.approx(0.693147, abs=1e-6)
    np.testing.assert_allclose(g, [-0.5, 0.5])


def test_loss_saturated():
    loss, _ = nn.loss_and_grad(np.array([20.0, -20.0]), 0)
    assert 0 <= loss < 1e-8


def test_loss_label_out_of_range():
    with pytest.raises(ValueError):
        nn.loss_and_grad(np.zeros(3), 3)


def test_loss_rejects_non_finite():
    with pytest.raises(ValueError):
        nn.loss_and_grad(np.array([np.nan, 0.0]), 0)


@pytest.mark.parametrize("seed", range(5))
def test_loss_matches_logsumexp_oracle(seed):
    r = np.random.default_rng(seed)
    z = r.normal(0, 5, 5)
    label = int(r.integers(5))
    loss, g = nn.loss_and_grad(z, label)
    assert loss == pytest.approx(logsumexp(z) - z[label], rel=1e-12)
    np.testing.assert_allclose(g, sp_softmax(z) - np.eye(5)[label], atol=1e-12)


def test_cw_margin_values():
    z = np.array([[1.0, 3.0, 2.0]])
    loss, g = nn.cw_margin(z, np.array([0]))
    assert loss.tolist() == [2.0]
    assert g.tolist() == [[-1.0, 1.0, 0.0]]
    loss, g = nn.cw_margin(z, np.array([1]), kappa=0.5)
    assert loss.tolist() == [-0.5]
    assert not g.any()


# backprop --------------------------------------------------------------------


def _small_cnn(seed):
    layers = [nn.Conv2D(3, 3, 3), nn.ReLU(), nn.MaxPool(2), nn.Flatten(),
              nn.Dense(12, 6), nn.ReLU(), nn.Dense(6, 3)]
    return nn.build_network(layers, (1, 6, 6), seed)


def test_zero_dlogits_give_zero_input_grad(rng):
    net = _small_cnn(0)
    _, cache = net.forward(rng.random((2, 1, 6, 6)), cache=True)
    _, dx = net.backprop(cache, np.zeros((2, 3)))
    assert dx.shape == (2, 1, 6, 6) and not dx.any()


def test_scalar_chain_rule():
    ws = [0.5, -2.0, 3.0]
    layers = [nn.Dense(1, 1) for _ in ws]
    net = nn.Network(layers, (1,), [{"W": np.array([[w]]), "b": np.zeros(1)} for w in ws])
    _, cache = net.forward(np.array([[0.3]]), cache=True)
    grads, dx = net.backprop(cache, np.array([[1.5]]))
    assert dx[0, 0] == pytest.approx(np.prod(ws) * 1.5)
    assert [g["W"].shape for g in grads] == [(1, 1)] * 3


def test_backprop_needs_fresh_cache(rng):
    net = nn.build_network([nn.Dense(2, 2)], (2,))
    with pytest.raises(nn.StaleCacheError):
        net.backprop(None, np.zeros((1, 2)))
    _, cache = net.forward(rng.random((1, 2)), cache=True)
    net.touch()
    with pytest.raises(nn.StaleCacheError):
        net.backprop(cache, np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(3))
def test_cnn_gradients_match_finite_differences(seed):
    net = _small_cnn(seed)
    r = np.random.default_rng(100 + seed)
    x = r.random((2, 1, 6, 6))
    y = np.array([0, 2])

    def loss_at(xv, params=None):
        n = net if params is None else nn.Network(net.layers, net.input_shape, params)
        z, _ = n.forward(xv)
        return nn.softmax_cross_entropy(z, y)[0].sum()

    z, cache = net.forward(x, cache=True)
    grads, dx = net.backprop(cache, nn.softmax_cross_entropy(z, y)[1])
    assert max_rel_err(dx, central_diff(loss_at, x), floor=1e-6) < 1e-4
    for i, p in enumerate(net.params):
        for k in p:
            def f(v, i=i, k=k):
                params = [dict(q) for q in net.params]
                params[i][k] = v
                return loss_at(x, params)
            assert max_rel_err(grads[i][k], central_diff(f, p[k]), floor=1e-6) < 1e-4


# sgd -------------------------------------------------------------------------


def test_sgd_examples():
    p = [{"w": np.array([1.0])}]
    assert nn.sgd_update(p, [{"w": np.array([2.0])}], 0.5)[0]["w"].tolist() == [0.0]
    same = nn.sgd_update(p, [{"w": np.zeros(1)}], 0.5)
    assert same[0]["w"].tobytes() == p[0]["w"].tobytes()


def test_sgd_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        nn.sgd_update([{"w": np.zeros(2)}], [{"w": np.zeros(3)}], 0.1)
    with pytest.raises(ValueError):
        nn.sgd_update([{"w": np.zeros(2)}], [{"w": np.zeros(2)}], 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=5),
       st.floats(0.01, 2.0), st.floats(0.01, 2.0))
def test_sgd_two_steps_equal_summed_step(vals, lr1, lr2):
    p = [{"w": np.array(vals)}]
    g1 = [{"w": np.array(vals) * 0.3}]
    g2 = [{"w": np.array(vals) * -0.7}]
    two = nn.sgd_update(nn.sgd_update(p, g1, lr1), g2, lr2)
    one = nn.sgd_update(p, [{"w": (lr1 * g1[0]["w"] + lr2 * g2[0]["w"])}], 1.0)
    np.testing.assert_allclose(two[0]["w"], one[0]["w"], rtol=1e-12, atol=1e-12)


def test_momentum_accumulates():
    p = [{"w": np.zeros(1)}]
    opt = nn.SGD(1.0, momentum=0.9)
    opt.step(p, [{"w": np.ones(1)}])
    opt.step(p, [{"w": np.ones(1)}])
    assert p[0]["w"][0] == pytest.approx(-(1 + 1.9))


# init ------------------------------------------------------------------------


def test_init_deterministic_and_seed_sensitive():
    layers = [nn.Dense(5, 4), nn.ReLU(), nn.Dense(4, 2)]
    a = nn.build_network(layers, (5,), seed=7)
    b = nn.build_network(layers, (5,), seed=7)
    c = nn.build_network(layers, (5,), seed=8)
    assert nn.param_digest(a.params) == nn.param_digest(b.params)
    assert nn.param_digest(a.params) != nn.param_digest(c.params)
    assert not a.params[0]["b"].any()


def test_he_init_variance():
    w = nn.build_network([nn.Dense(100, 100)], (100,), seed=3).params[0]["W"]
    assert abs(w.var() / (2 / 100) - 1) < 0.2


# properties --------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_is_pure(seed):
    net = _small_cnn(seed % 97)
    x = np.random.default_rng(seed).random((3, 1, 6, 6))
    a, _ = net.forward(x)
    b, _ = net.forward(x)
    assert a.tobytes() == b.tobytes()
    assert np.isfinite(a).all()


def test_separable_set_trains_to_full_accuracy():
    r = np.random.default_rng(0)
    x = np.concatenate([r.normal(-2, 0.5, (40, 2)), r.normal(2, 0.5, (40, 2))]) / 10 + 0.5
    y = np.repeat([0, 1], 40)
    net = nn.build_network([nn.Dense(2, 8), nn.ReLU(), nn.Dense(8, 2)], (2,), seed=1)
    cfg = nn.TrainConfig(epochs=300, lr=0.5, batch_size=80, val_fraction=0, patience=None,
                         momentum=0.9)
    rep = nn.fit(net, x, y, cfg, np.random.default_rng(0))
    assert rep.train_loss[-1] < 0.01
    assert nn.accuracy(net, x, y) == 100.0


def test_fit_warns_when_budget_exhausted():
    r = np.random.default_rng(0)
    x, y = r.random((30, 2)), r.integers(0, 2, 30)
    net = nn.build_network([nn.Dense(2, 2)], (2,))
    with pytest.warns(RuntimeWarning, match="epoch cap"):
        rep = nn.fit(net, x, y, nn.TrainConfig(epochs=1, patience=3), np.random.default_rng(0))
    assert not rep.converged


# checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = _small_cnn(4)
    path = tmp_path / "net.swnb"
    nn.save_params(net, path)
    back = nn.load_params(nn.build_network(net.layers, net.input_shape, seed=99), path)
    assert nn.param_digest(back.params) == nn.param_digest(net.params)


def test_checkpoint_layout():
    net = dense_net([[1.0, 2.0]], [0.5])
    raw = nn.params_to_bytes(net)
    buf = io.BytesIO(raw)
    assert buf.read(5) == b"SWNB1"
    # records sorted by key within a layer: W then b
    assert struct.unpack("<II", buf.read(8)) == (0, 2)
    assert struct.unpack("<2I", buf.read(8)) == (1, 2)
    assert struct.unpack("<2d", buf.read(16)) == (1.0, 2.0)
    assert struct.unpack("<II", buf.read(8)) == (0, 1)
    assert struct.unpack("<I", buf.read(4)) == (1,)
    assert struct.unpack("<d", buf.read(8)) == (0.5,)
    assert buf.read() == b""


def test_checkpoint_rejects_garbage():
    net = dense_net([[1.0]], [0.0])
    with pytest.raises(ValueError, match="SWNB1"):
        nn.params_from_bytes(net, b"XXXXX")
    with pytest.raises(ValueError, match="truncated"):
        nn.params_from_bytes(net, nn.params_to_bytes(net)[:-3])
