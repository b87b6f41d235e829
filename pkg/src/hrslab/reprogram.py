"""Adversarial reprogramming with a locally connected input transform.

The attacker keeps the target classifier frozen and learns only a
locally connected layer (unshared ``k x k`` kernel plus bias at every output
pixel) that maps task-B images into the target's input space; target class
``i`` is read as task-B class ``i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .nn import SGD, param_digest, softmax_cross_entropy
from .stochastic import BatchRng, RowRng, RunMode, derive_rng

log = logging.getLogger(__name__)


class TargetMutationError(RuntimeError):
    pass


class AdversarialProgram:
    def __init__(self, src_shape, tgt_shape, kernel, weights, bias):
        self.src_shape = tuple(src_shape)
        self.tgt_shape = tuple(tgt_shape)
        self.kernel = int(kernel)
        self.params = [{"W": np.asarray(weights, dtype=np.float64),
                        "b": np.asarray(bias, dtype=np.float64)}]
        h, w = self.tgt_shape
        k = self.kernel
        if self.params[0]["W"].shape != (h, w, k, k) or self.params[0]["b"].shape != (h, w):
            raise ValueError("program weights must be (H, W, k, k) with bias (H, W)")

    @property
    def n_params(self):
        return sum(a.size for a in self.params[0].values())

    def _pad(self, x):
        hs, ws = self.src_shape
        ht, wt = self.tgt_shape
        k = self.kernel
        top, left = (ht - hs) // 2, (wt - ws) // 2
        before = (k - 1) // 2
        out = np.zeros((len(x), ht + k - 1, wt + k - 1))
        out[:, before + top : before + top + hs, before + left : before + left + ws] = x
        return out

    def transform(self, x, cache=False):
        x = np.asarray(x, dtype=np.float64).reshape(len(x), *self.src_shape)
        win = sliding_window_view(self._pad(x), (self.kernel, self.kernel), axis=(1, 2))
        p = self.params[0]
        y = np.einsum("nhwij,hwij->nhw", win, p["W"]) + p["b"]
        return (y, win) if cache else y

    def grads(self, win, dy):
        return [{"W": np.einsum("nhw,nhwij->hwij", dy, win), "b": dy.sum(axis=0)}]


def build_program(src_shape, tgt_shape, kernel, seed=0) -> AdversarialProgram:
    """He-initialised program; source images are centred inside the target frame."""
    if kernel < 1:
        raise ValueError("kernel size must be at least 1")
    if len(src_shape) != 2 or len(tgt_shape) != 2:
        raise ValueError("programs map 2-D grayscale images")
    if any(s > t for s, t in zip(src_shape, tgt_shape)):
        raise ValueError(f"source {tuple(src_shape)} does not fit inside target {tuple(tgt_shape)}")
    rng = np.random.default_rng(seed)
    h, w = tgt_shape
    weights = rng.normal(0.0, np.sqrt(2.0 / kernel**2), (h, w, kernel, kernel))
    return AdversarialProgram(src_shape, tgt_shape, kernel, weights, np.zeros((h, w)))


def identity_program(shape, kernel=1):
    h, w = shape
    weights = np.zeros((h, w, kernel, kernel))
    c = (kernel - 1) // 2
    weights[:, :, c, c] = 1.0
    return AdversarialProgram(shape, shape, kernel, weights, np.zeros((h, w)))


@dataclass(frozen=True)
class LabelMap:
    """Identity map from the first ``n`` target classes to task-B classes."""

    n: int

    def __call__(self, logits):
        return logits[:, : self.n].argmax(axis=1)


def _model_input(model, y):
    return y.reshape(len(y), *model.input_shape)


def eval_reprogram(model, program, x, y, seed=0, labelmap=None, batch=500):
    """Task-B accuracy (%) of ``labelmap . model . program``; fresh randomness per example."""
    labelmap = labelmap or LabelMap(model.num_classes)
    hits = 0
    for s in range(0, len(x), batch):
        xb = program.transform(x[s : s + batch])
        rng = None
        if model.stochastic:
            rng = RowRng([derive_rng(seed, "reprogram-eval", i) for i in range(s, s + len(xb))])
        logits = model.logits(_model_input(model, xb), rng=rng, mode=RunMode.STOCHASTIC)
        hits += int((labelmap(logits) == y[s : s + batch]).sum())
    return 100.0 * hits / len(x)


def program_loss_and_grads(model, program, x, y, rng=None):
    """Mean cross-entropy of the reprogrammed model and its program gradients."""
    xt, win = program.transform(x, cache=True)

    def loss_fn(logits):
        l, d = softmax_cross_entropy(logits, y)
        return l, d / len(y)

    loss, dx, _ = model.value_and_grad(_model_input(model, xt), loss_fn, rng=rng,
                                       mode=RunMode.STOCHASTIC)
    return float(loss.mean()), program.grads(win, dx.reshape(xt.shape))


def train_program(model, program, x, y, x_test, y_test, epochs=50, lr=0.05, batch_size=64,
                  momentum=0.9, seed=0):
    """Fit the program against the frozen ``model``; returns per-epoch test accuracy.

    Entry 0 of the curve is the untrained program.  Stochastic targets get
    fresh randomness every step.  Any change to the target's parameters is
    treated as a hard failure.
    """
    before = _target_digest(model)
    rng = np.random.default_rng(derive_rng(seed, "reprogram").integers(2**63))
    opt = SGD(lr, momentum)
    curve = [eval_reprogram(model, program, x_test, y_test, seed)]
    n = len(x)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            sub = BatchRng(rng, len(idx)) if model.stochastic else None
            _, grads = program_loss_and_grads(model, program, x[idx], y[idx], sub)
            opt.step(program.params, grads)
        curve.append(eval_reprogram(model, program, x_test, y_test, seed))
        log.info("reprogram epoch %d: %.2f%%", epoch + 1, curve[-1])
    if _target_digest(model) != before:
        raise TargetMutationError("target model parameters changed during reprogramming")
    return curve


def _target_digest(model):
    if hasattr(model, "blocks"):
        return param_digest([p for b in model.blocks for ch in b.channels for p in ch.params])
    return param_digest(model.params)


target_digest = _target_digest
