import numpy as np
import pytest

from hrslab import data, models, nn
from hrslab.stochastic import Dropout, DropoutSpec, GaussianNoise, GaussianSpec, Sap, SapSpec


def test_presets_build_and_run(rng):
    for name in ("mlp", "cnn"):
        layers, shape = models.preset(name)
        net = nn.build_network(layers, shape, seed=0)
        assert net.logits(rng.random((2, *shape))).shape == (2, 10)
    with pytest.raises(ValueError, match="unknown architecture"):
        models.preset("resnet")


def test_default_hrs_splits_exist():
    assert models.hrs_split("mlp", 2) == [2]
    with pytest.raises(ValueError):
        models.hrs_split("mlp", 7)


def test_sap_and_dropout_go_before_second_dense():
    layers = models.mlp_layers(16, 8, 3)
    sap = models.with_defense(layers, SapSpec())
    assert isinstance(sap[2], Sap) and len(sap) == 6
    cnn = models.with_defense(models.cnn_layers(), DropoutSpec(0.3))
    assert isinstance(cnn[9], Dropout) and isinstance(cnn[10], nn.Dense)
    nn.build_network(cnn, (1, 28, 28), seed=0)


def test_explicit_insert_position():
    layers = models.mlp_layers(16, 8, 3)
    out = models.with_defense(layers, DropoutSpec(0.1, insert_at=0))
    assert isinstance(out[0], Dropout)
    with pytest.raises(ValueError):
        models.with_defense(layers, DropoutSpec(0.1, insert_at=9))


def test_gaussian_noise_on_input_and_before_later_weighted_layers():
    out = models.with_defense(models.mlp_layers(16, 8, 3), GaussianSpec(0.1, 0.05))
    kinds = [type(x).__name__ for x in out]
    assert kinds == ["GaussianNoise", "Dense", "ReLU", "GaussianNoise", "Dense", "ReLU",
                     "GaussianNoise", "Dense"]
    sigmas = [x.sigma for x in out if isinstance(x, GaussianNoise)]
    assert sigmas == [0.1, 0.05, 0.05]


def test_no_defense_returns_copy():
    layers = models.mlp_layers(16, 8, 3)
    out = models.with_defense(layers, None)
    assert out == layers and out is not layers


def _blobs():
    b = data.gen_synthetic(0, 3, 4, 90, jitter=0.3)
    return b.inputs.reshape(90, -1), b.labels


def test_adv_train_at_zero_epsilon_equals_plain_training():
    x, y = _blobs()
    cfg = nn.TrainConfig(epochs=3, lr=0.05, batch_size=15, patience=None)
    a = nn.build_network(models.mlp_layers(16, 8, 3), (16,), seed=1)
    b = nn.build_network(models.mlp_layers(16, 8, 3), (16,), seed=1)
    models.adv_train(a, x, y, cfg, 0.0, np.random.default_rng(5))
    nn.fit(b, x, y, cfg, np.random.default_rng(5))
    assert nn.param_digest(a.params) == nn.param_digest(b.params)


def test_adv_train_changes_training_and_is_reproducible():
    x, y = _blobs()
    cfg = nn.TrainConfig(epochs=2, lr=0.05, batch_size=15, patience=None)
    nets = [nn.build_network(models.mlp_layers(16, 8, 3), (16,), seed=1) for _ in range(3)]
    models.adv_train(nets[0], x, y, cfg, 0.1, np.random.default_rng(5), iters=3)
    models.adv_train(nets[1], x, y, cfg, 0.1, np.random.default_rng(5), iters=3)
    nn.fit(nets[2], x, y, cfg, np.random.default_rng(5))
    d = [nn.param_digest(n.params) for n in nets]
    assert d[0] == d[1] != d[2]


def test_pgd_perturbation_stays_in_budget(rng):
    net = nn.build_network(models.mlp_layers(16, 8, 3), (16,), seed=0)
    xb = rng.random((5, 16))
    adv = models.pgd_perturbation(0.1, iters=4)(net, xb, np.array([0, 1, 2, 0, 1]))
    assert np.abs(adv - xb).max() <= 0.1 + 1e-12
    assert models.pgd_perturbation(0.0) is None
