"""Randomized defense layers: stochastic activation pruning, defensive dropout
and Gaussian noise injection.

Each layer follows the same protocol as the deterministic layers in
:mod:`hrslab.nn` (``output_shape`` / ``init_params`` / ``forward`` /
``backward``) and can be spliced anywhere in a layer list.  Randomness is
always supplied by the caller, so a model forward pass is reproducible given
its random stream.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class RunMode(enum.Enum):
    TRAIN = "train"
    STOCHASTIC = "stochastic"
    FIXED = "fixed"


class BatchRng:
    """A single generator shared by every row of a batch."""

    def __init__(self, gen: np.random.Generator, n: int):
        self.gen = gen
        self.n = n

    def random(self, shape=()):
        return self.gen.random((self.n, *shape))

    def normal(self, scale, shape=()):
        return self.gen.normal(0.0, scale, (self.n, *shape))

    def integers(self, high):
        return self.gen.integers(0, high, self.n)

    def rows(self, idx):
        return BatchRng(self.gen, len(idx))


class RowRng:
    """One generator per batch row.

    Row ``i`` only ever consumes ``gens[i]``, so results for an example do not
    depend on which other examples share its batch.
    """

    def __init__(self, gens: Sequence[np.random.Generator]):
        self.gens = list(gens)
        self.n = len(self.gens)

    def random(self, shape=()):
        return np.stack([g.random(shape) for g in self.gens]).reshape(self.n, *shape)

    def normal(self, scale, shape=()):
        return np.stack([g.normal(0.0, scale, shape) for g in self.gens]).reshape(
            self.n, *shape
        )

    def integers(self, high):
        return np.array([g.integers(0, high) for g in self.gens], dtype=np.int64)

    def rows(self, idx):
        return RowRng([self.gens[i] for i in idx])


def as_batch_rng(rng, n):
    """Normalize ``None`` / Generator / list of Generators to a batch stream."""
    if rng is None or isinstance(rng, (BatchRng, RowRng)):
        if rng is not None and rng.n != n:
            raise ValueError(f"random stream covers {rng.n} rows, batch has {n}")
        return rng
    if isinstance(rng, np.random.Generator):
        return BatchRng(rng, n)
    gens = list(rng)
    if len(gens) != n:
        raise ValueError(f"got {len(gens)} generators for a batch of {n}")
    return RowRng(gens)


def derive_rng(seed, *keys) -> np.random.Generator:
    """Independent stream for (seed, *keys); keys are non-negative ints or str."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        if isinstance(k, str):
            words.append(int.from_bytes(k.encode()[:8].ljust(8, b"\0"), "little"))
        else:
            words.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


def _need_rng(rng, layer):
    if rng is None:
        raise ValueError(f"{layer} needs a random stream outside FIXED mode")
    return rng


def _sap_multiplier(flat, k, rng):
    # flat: (N, d); returns the per-unit factor (0 for pruned units)
    n, d = flat.shape
    mag = np.abs(flat)
    total = mag.sum(axis=1, keepdims=True)
    mult = np.ones_like(flat)
    live = total[:, 0] > 0
    if not live.any():
        return mult
    p = np.zeros_like(flat)
    p[live] = mag[live] / total[live]
    u = rng.random((k,))
    for i in np.flatnonzero(live):
        cdf = np.cumsum(p[i])
        cdf[-1] = 1.0
        draws = np.searchsorted(cdf, u[i], side="right")
        hit = np.zeros(d, dtype=bool)
        hit[np.minimum(draws, d - 1)] = True
        keep = 1.0 - (1.0 - p[i, hit]) ** k
        row = np.zeros(d)
        row[hit] = 1.0 / keep
        mult[i] = row
    return mult


def sap_forward(act, k, rng):
    """Stochastic activation pruning.

    Draws ``k`` units with replacement, each with probability proportional to
    its magnitude; every unit hit at least once is rescaled by the inverse of
    its survival probability ``1 - (1 - p)**k`` and the rest are zeroed.
    ``act`` is a single activation vector or a batch of them.
    """
    if k < 1:
        raise ValueError("SAP needs k >= 1")
    a = np.asarray(act, dtype=np.float64)
    single = a.ndim == 1
    batch = a.reshape(1, -1) if single else a.reshape(a.shape[0], -1)
    if isinstance(rng, np.random.Generator):
        rng = BatchRng(rng, batch.shape[0])
    mult = _sap_multiplier(batch, k, rng)
    return (batch * mult).reshape(a.shape)


def dropout_forward(act, rate, rng, mode=RunMode.STOCHASTIC):
    """Inverted dropout; identity under FIXED mode or ``rate == 0``."""
    out, _ = _dropout(np.asarray(act, dtype=np.float64), rate, rng, mode)
    return out


def _dropout(a, rate, rng, mode):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode is RunMode.FIXED or rate == 0.0:
        return a, None
    if isinstance(rng, np.random.Generator):
        mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    else:
        rng = _need_rng(rng, "dropout")
        mask = (rng.random(a.shape[1:]) >= rate) / (1.0 - rate)
    return a * mask, mask


def gaussian_forward(act, sigma, rng, mode=RunMode.STOCHASTIC):
    """Additive i.i.d. N(0, sigma^2) noise; identity under FIXED or sigma 0."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    a = np.asarray(act, dtype=np.float64)
    if mode is RunMode.FIXED or sigma == 0.0:
        return a
    if isinstance(rng, np.random.Generator):
        return a + rng.normal(0.0, sigma, a.shape)
    rng = _need_rng(rng, "gaussian noise")
    return a + rng.normal(sigma, a.shape[1:])


@dataclass(frozen=True)
class Sap:
    """SAP layer; ``k=None`` samples as many times as there are units."""

    k: int | None = None
    stochastic = True

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        # pruning is an inference-time defense only
        if mode is not RunMode.STOCHASTIC:
            return x, None
        flat = x.reshape(x.shape[0], -1)
        k = self.k if self.k is not None else flat.shape[1]
        if k < 1:
            raise ValueError("SAP needs k >= 1")
        mult = _sap_multiplier(flat, k, _need_rng(rng, "SAP")).reshape(x.shape)
        return x * mult, mult

    def backward(self, params, cache, dy):
        return {}, dy if cache is None else dy * cache


@dataclass(frozen=True)
class Dropout:
    """Dropout kept on at inference; ``infer_rate`` overrides the test rate."""

    rate: float
    infer_rate: float | None = None
    stochastic = True

    def __post_init__(self):
        for r in (self.rate, self.infer_rate):
            if r is not None and not 0.0 <= r < 1.0:
                raise ValueError(f"dropout rate must lie in [0, 1), got {r}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        rate = self.rate
        if mode is RunMode.STOCHASTIC and self.infer_rate is not None:
            rate = self.infer_rate
        if mode is RunMode.FIXED or rate == 0.0:
            return x, None
        return _dropout(x, rate, _need_rng(rng, "dropout"), mode)

    def backward(self, params, cache, dy):
        return {}, dy if cache is None else dy * cache


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float
    stochastic = True

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and non-negative")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        if mode is RunMode.FIXED or self.sigma == 0.0:
            return x, None
        return x + _need_rng(rng, "gaussian noise").normal(self.sigma, x.shape[1:]), None

    def backward(self, params, cache, dy):
        return {}, dy


# Defense descriptions as they appear in experiment configs.


@dataclass(frozen=True)
class SapSpec:
    k: int | None = None
    insert_at: int | None = None


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    infer_rate: float | None = None
    insert_at: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class GaussianSpec:
    sigma_init: float
    sigma_inner: float

    def __post_init__(self):
        for s in (self.sigma_init, self.sigma_inner):
            if not (np.isfinite(s) and s >= 0):
                raise ValueError("noise deviations must be finite and non-negative")


def derive_seed(seed, *keys) -> int:
    """64-bit seed for the stream ``derive_rng(seed, *keys)`` would use."""
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))
