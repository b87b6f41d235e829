"""Desk-scale model presets, defense insertion and adversarial training."""

from __future__ import annotations

import numpy as np

from . import nn
from .attacks import AttackConfig, GradientOracle, pgd
from .stochastic import (Dropout, DropoutSpec, GaussianNoise, GaussianSpec, Sap, SapSpec,
                         derive_seed)

MNIST_SHAPE = (28, 28)

# HRS block boundaries (layer indices) by block count
HRS_SPLITS = {
    "mlp": {1: (), 2: (2,), 3: (2, 4)},
    "cnn": {1: (), 2: (9,), 3: (6, 9)},
}

DESK_TRAIN = nn.TrainConfig(epochs=40, lr=0.05, batch_size=32, momentum=0.9, patience=None)


def mlp_layers(in_dim=784, hidden=200, classes=10):
    return [nn.Dense(in_dim, hidden), nn.ReLU(), nn.Dense(hidden, hidden), nn.ReLU(),
            nn.Dense(hidden, classes)]


def cnn_layers(classes=10):
    """Small 28x28 CNN: two conv/pool stages followed by three dense layers."""
    return [nn.Conv2D(8, 3, 3), nn.ReLU(), nn.MaxPool(2),
            nn.Conv2D(16, 3, 3), nn.ReLU(), nn.MaxPool(2),
            nn.Flatten(), nn.Dense(400, 100), nn.ReLU(),
            nn.Dense(100, 100), nn.ReLU(), nn.Dense(100, classes)]


PRESETS = {
    "mlp": (mlp_layers, (784,)),
    "cnn": (cnn_layers, (1, 28, 28)),
}


def preset(name):
    """``(layers, input_shape)`` for a named architecture."""
    try:
        make, shape = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; expected one of {sorted(PRESETS)}")
    return make(), shape


def hrs_split(name, blocks):
    """Default block boundaries for an HRS version of preset ``name``."""
    try:
        return list(HRS_SPLITS[name][blocks])
    except KeyError:
        raise ValueError(f"no default {blocks}-block split for {name!r}; give 'split' explicitly")


def _is_weighted(layer):
    return isinstance(layer, (nn.Dense, nn.Conv2D))


def _before_second_dense(layers):
    dense = [i for i, layer in enumerate(layers) if isinstance(layer, nn.Dense)]
    if len(dense) < 2:
        raise ValueError("architecture needs at least two fully connected layers")
    return dense[1]


def with_defense(layers, spec):
    """Copy of ``layers`` with the stochastic defense described by ``spec`` spliced in.

    SAP and dropout go between the first and second fully connected layer unless
    ``insert_at`` says otherwise.  Gaussian noise is added to the input and
    in front of every later weighted layer.
    """
    layers = list(layers)
    if spec is None:
        return layers
    if isinstance(spec, GaussianSpec):
        out = [GaussianNoise(spec.sigma_init)]
        for i, layer in enumerate(layers):
            if i and _is_weighted(layer):
                out.append(GaussianNoise(spec.sigma_inner))
            out.append(layer)
        return out
    if isinstance(spec, SapSpec):
        new = Sap(spec.k)
    elif isinstance(spec, DropoutSpec):
        new = Dropout(spec.rate, spec.infer_rate)
    else:
        raise TypeError(f"unsupported defense spec {spec!r}")
    at = _before_second_dense(layers) if spec.insert_at is None else spec.insert_at
    if not 0 <= at <= len(layers):
        raise ValueError(f"insert_at={at} outside 0..{len(layers)}")
    return layers[:at] + [new] + layers[at:]


def flatten_for(input_shape, x):
    return np.asarray(x, dtype=np.float64).reshape(len(x), *input_shape)


def pgd_perturbation(epsilon, iters=10, alpha=None, seed=0):
    """Minibatch hook for :func:`nn.fit` replacing inputs with untargeted PGD examples.

    ``epsilon == 0`` returns the batch untouched and draws no randomness, so
    training is then identical to plain training.
    """
    if epsilon == 0:
        return None
    alpha = 2.5 * epsilon / iters if alpha is None else alpha
    cfg = AttackConfig(epsilon=epsilon, alpha=alpha, iters=iters, targeted=False)
    batches = iter(range(2**62))

    def perturb(model, xb, yb):
        # fresh stream per minibatch for stochastic models
        oracle = GradientOracle(model, "whitebox", seed=derive_seed(seed, "advtrain", next(batches)),
                                rows=len(xb))
        return pgd(oracle, xb, np.zeros(len(xb), dtype=np.int64), cfg, label=yb).x_adv

    return perturb


def adv_train(model, x, y, cfg: nn.TrainConfig, epsilon, rng, iters=10, seed=0):
    """PGD adversarial training; ``epsilon`` is in [0, 1] pixel units."""
    return nn.fit(model, x, y, cfg, rng, perturb=pgd_perturbation(epsilon, iters, seed=seed))
