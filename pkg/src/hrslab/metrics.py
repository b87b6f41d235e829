"""Robustness/accuracy trade-off metrics and the input-gradient dispersion probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import cw_loss, target_of
from .stochastic import BatchRng, RunMode, derive_rng

ETA = 0.002


@dataclass(frozen=True)
class DefenseRecord:
    defense: str
    theta: str
    test_accuracy: float
    defense_rates: dict  # (attack, epsilon) -> percent

    def __post_init__(self):
        vals = [self.test_accuracy, *self.defense_rates.values()]
        if any(not 0.0 <= v <= 100.0 for v in vals):
            raise ValueError("percentages must lie in [0, 100]")


@dataclass(frozen=True)
class DesRecord:
    defense: str
    theta: str
    delta_d: float
    delta_t: float
    eta: float = ETA

    @property
    def value(self):
        return des(self.delta_d, self.delta_t, self.eta)


def defense_rate(asr):
    if not 0.0 <= asr <= 100.0:
        raise ValueError(f"attack success rate {asr} outside [0, 100]")
    return 100.0 - asr


def des(delta_d, delta_t, eta=ETA):
    """Defense-rate gain per point of test-accuracy drop, ``dd / (dt + eta)``."""
    if not (np.isfinite(delta_d) and np.isfinite(delta_t)):
        raise ValueError("DES inputs must be finite")
    return delta_d / (delta_t + eta)


def des_record(defense, theta, base_acc, base_rate, acc, rate, eta=ETA):
    """DES record of a defense relative to the unprotected base model."""
    return DesRecord(defense, str(theta), rate - base_rate, base_acc - acc, eta)


def mean_des(records, delta_d_range=None, delta_t_range=None):
    """Mean and population variance of DES over records in the chosen range."""
    vals = []
    for r in records:
        if delta_d_range and not delta_d_range[0] <= r.delta_d <= delta_d_range[1]:
            continue
        if delta_t_range and not delta_t_range[0] <= r.delta_t <= delta_t_range[1]:
            continue
        vals.append(r.value)
    if not vals:
        raise ValueError("no DES records fall inside the requested range")
    v = np.asarray(vals)
    return float(v.mean()), float(v.var())


def des_fit(points):
    """Least-squares line ``dd = slope * dt + intercept`` through (dt, dd) points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    t, d = p[:, 0], p[:, 1]
    if len(p) < 2 or np.ptp(t) == 0:
        raise ValueError("need at least two distinct accuracy drops to fit a line")
    tc = t - t.mean()
    slope = float((tc * (d - d.mean())).sum() / (tc**2).sum())
    return slope, float(d.mean() - slope * t.mean())


def gradient_samples(model, x, label, n=200, seed=0, example_id=0, kappa=0.0):
    """``n`` input gradients of the CW margin loss at the clean input.

    This is the first step of a targeted CW-PGD attack toward
    ``(label + 1) mod classes``; randomness is fresh for every sample.
    """
    x = np.asarray(x, dtype=np.float64)[None]
    if not model.stochastic:
        # every sample would be the same gradient
        _, g, _ = model.value_and_grad(x, cw_loss(np.array([target_of(label, model.num_classes)]),
                                                  kappa), mode=RunMode.FIXED)
        return np.repeat(g.reshape(1, -1), n, axis=0)
    xs = np.repeat(x, n, axis=0)
    target = np.full(n, target_of(label, model.num_classes))
    rng = BatchRng(derive_rng(seed, "gradstd", example_id), n)
    _, g, _ = model.value_and_grad(xs, cw_loss(target, kappa), rng=rng, mode=RunMode.STOCHASTIC)
    return g.reshape(n, -1)


def grad_std_per_example(model, x, y, n=200, seed=0, ids=None):
    if n < 2:
        raise ValueError("need at least two gradient samples")
    ids = range(len(x)) if ids is None else ids
    out = []
    for xi, yi, i in zip(x, y, ids):
        g = gradient_samples(model, xi, yi, n, seed, i)
        # shifting by one sample leaves the std unchanged and makes identical samples exact zeros
        out.append((g - g[0]).std(axis=0, ddof=1).mean())
    return np.array(out)


def grad_std(model, x, y, n=200, seed=0):
    """Mean over examples and input dimensions of the per-dimension gradient std."""
    return float(grad_std_per_example(model, x, y, n, seed).mean())


@dataclass(frozen=True)
class GradStd:
    value: float
    stderr: float


def grad_std_stats(model, x, y, n=200, seed=0):
    """``grad_std`` with a Monte-Carlo standard error.

    A sample std from ``n`` draws has relative standard error about
    ``1 / sqrt(2 (n - 1))``; the bound is applied to the aggregate without
    crediting averaging over dimensions or examples, so it is conservative.
    """
    value = grad_std(model, x, y, n, seed)
    return GradStd(value, value / np.sqrt(2.0 * (n - 1)))
