"""Small dense-tensor network engine with explicit forward / backward passes.

Tensors are plain float64 numpy arrays with a leading batch axis.  A
:class:`Network` is an ordered list of layer specs plus one parameter dict per
layer; layers are stateless and only read their parameters, so inference is
a pure function of ``(params, input, random stream)``.
"""

from __future__ import annotations

import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .stochastic import RunMode, as_batch_rng

log = logging.getLogger(__name__)

MAGIC = b"SWNB1"


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# layers


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    stochastic = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ShapeError(f"Dense dims must be positive: {self}")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"Dense expects input ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def param_shapes(self, in_shape):
        return {"W": (self.out_dim, self.in_dim), "b": (self.out_dim,)}

    def init_params(self, in_shape, rng):
        std = math.sqrt(2.0 / self.in_dim)
        return {
            "W": rng.normal(0.0, std, (self.out_dim, self.in_dim)),
            "b": np.zeros(self.out_dim),
        }

    def forward(self, params, x, rng, mode):
        return x @ params["W"].T + params["b"], x

    def backward(self, params, x, dy):
        return {"W": dy.T @ x, "b": dy.sum(axis=0)}, dy @ params["W"]


@dataclass(frozen=True)
class Conv2D:
    """Valid (unpadded) 2-D convolution over ``(C, H, W)`` inputs."""

    filters: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    stochastic = False

    def __post_init__(self):
        if min(self.filters, self.kh, self.kw, self.stride) < 1:
            raise ShapeError(f"Conv2D dims must be positive: {self}")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"Conv2D expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.kh or w < self.kw:
            raise ShapeError(f"kernel {self.kh}x{self.kw} larger than input {h}x{w}")
        return (
            self.filters,
            (h - self.kh) // self.stride + 1,
            (w - self.kw) // self.stride + 1,
        )

    def param_shapes(self, in_shape):
        return {"W": (self.filters, in_shape[0], self.kh, self.kw), "b": (self.filters,)}

    def init_params(self, in_shape, rng):
        fan_in = in_shape[0] * self.kh * self.kw
        std = math.sqrt(2.0 / fan_in)
        return {
            "W": rng.normal(0.0, std, (self.filters, in_shape[0], self.kh, self.kw)),
            "b": np.zeros(self.filters),
        }

    def _cols(self, x):
        s = self.stride
        win = sliding_window_view(x, (self.kh, self.kw), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        return cols, (n, c, ho, wo)

    def forward(self, params, x, rng, mode):
        cols, (n, c, ho, wo) = self._cols(x)
        w = params["W"].reshape(self.filters, -1)
        y = cols @ w.T + params["b"]
        y = y.reshape(n, ho, wo, self.filters).transpose(0, 3, 1, 2)
        return y, (cols, x.shape, (n, c, ho, wo))

    def backward(self, params, cache, dy):
        cols, x_shape, (n, c, ho, wo) = cache
        dyr = dy.transpose(0, 2, 3, 1).reshape(-1, self.filters)
        w = params["W"].reshape(self.filters, -1)
        grads = {"W": (dyr.T @ cols).reshape(params["W"].shape), "b": dyr.sum(axis=0)}
        dcols = (dyr @ w).reshape(n, ho, wo, c, self.kh, self.kw)
        dx = np.zeros(x_shape)
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return grads, dx


@dataclass(frozen=True)
class MaxPool:
    """Non-overlapping max pooling; gradient goes to the first maximal entry."""

    size: int = 2
    stochastic = False

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError("pool size must be positive")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"MaxPool expects (C, H, W), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise ShapeError("pool window larger than input")
        return (c, h // self.size, w // self.size)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        n, c, h, w = x.shape
        k = self.size
        ho, wo = h // k, w // k
        xc = x[:, :, : ho * k, : wo * k]
        win = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, ho, wo, k * k)
        arg = win.argmax(axis=-1)
        y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        return y, (arg, x.shape)

    def backward(self, params, cache, dy):
        arg, x_shape = cache
        n, c, h, w = x_shape
        k = self.size
        ho, wo = dy.shape[2], dy.shape[3]
        win = np.zeros((n, c, ho, wo, k * k))
        np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
        win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape)
        dx[:, :, : ho * k, : wo * k] = win.reshape(n, c, ho * k, wo * k)
        return {}, dx


@dataclass(frozen=True)
class ReLU:
    stochastic = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, params, mask, dy):
        return {}, dy * mask


@dataclass(frozen=True)
class Flatten:
    stochastic = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, dy):
        return {}, dy.reshape(shape)


@dataclass(frozen=True)
class SoftmaxOutput:
    """Marks the logit layer; forward passes logits through unchanged."""

    stochastic = False

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError("SoftmaxOutput expects a flat logit vector")
        return tuple(in_shape)

    def init_params(self, in_shape, rng):
        return {}

    def forward(self, params, x, rng, mode):
        return x, None

    def backward(self, params, cache, dy):
        return {}, dy


# ---------------------------------------------------------------------------
# network


def infer_shapes(layers, input_shape):
    shapes = [tuple(int(d) for d in input_shape)]
    if any(d < 1 for d in shapes[0]):
        raise ShapeError(f"input dims must be positive: {input_shape}")
    for i, layer in enumerate(layers):
        try:
            shapes.append(tuple(layer.output_shape(shapes[-1])))
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({layer}): {e}") from None
    return shapes


@dataclass
class ForwardCache:
    net_id: int
    version: int
    layer_caches: list
    input_shape: tuple


class Network:
    """Sequential network over ``input_shape`` (excluding the batch axis)."""

    def __init__(self, layers, input_shape, params=None, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.seed = int(seed)
        self.version = 0
        if params is None:
            params = [{} for _ in self.layers]
        if len(params) != len(self.layers):
            raise ShapeError("one parameter dict per layer is required")
        self.params = [dict(p) for p in params]
        self._check_params()

    def _check_params(self):
        for i, (layer, p) in enumerate(zip(self.layers, self.params)):
            if not p:
                continue
            want = layer.param_shapes(self.shapes[i]) if hasattr(layer, "param_shapes") else {}
            if set(p) != set(want) or any(p[k].shape != want[k] for k in want):
                raise ShapeError(f"parameters of layer {i} do not match {layer}")

    @property
    def output_dim(self):
        return self.shapes[-1][0]

    num_classes = output_dim

    @property
    def stochastic(self):
        return any(getattr(l, "stochastic", False) for l in self.layers)

    def n_params(self):
        return sum(a.size for p in self.params for a in p.values())

    def copy(self):
        return Network(
            self.layers,
            self.input_shape,
            [{k: v.copy() for k, v in p.items()} for p in self.params],
            self.seed,
        )

    def touch(self):
        """Mark parameters as modified; outstanding caches become stale."""
        self.version += 1

    def forward(self, x, cache=False, rng=None, mode=RunMode.STOCHASTIC):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        rng = as_batch_rng(rng, x.shape[0])
        caches = []
        for layer, p in zip(self.layers, self.params):
            x, c = layer.forward(p, x, rng, mode)
            caches.append(c if cache else None)
        if not cache:
            return x, None
        return x, ForwardCache(id(self), self.version, caches, self.input_shape)

    def backprop(self, cache, dlogits, param_grads=True):
        """Gradients w.r.t. parameters (list of dicts) and the network input."""
        if cache is None or cache.net_id != id(self):
            raise StaleCacheError("backprop needs a cache from forward(..., cache=True)")
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since the forward pass")
        dy = np.asarray(dlogits, dtype=np.float64)
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            g, dy = self.layers[i].backward(self.params[i], cache.layer_caches[i], dy)
            if param_grads:
                grads[i] = g
        return grads, dy

    def logits(self, x, rng=None, mode=RunMode.STOCHASTIC, paths=None):
        if paths is not None:
            raise ValueError("plain networks have no switching paths")
        return self.forward(x, rng=rng, mode=mode)[0]

    def value_and_grad(self, x, loss_fn, rng=None, mode=RunMode.STOCHASTIC, paths=None):
        """Per-row loss, input gradient and logits for ``loss_fn(logits)``."""
        if paths is not None:
            raise ValueError("plain networks have no switching paths")
        logits, cache = self.forward(x, cache=True, rng=rng, mode=mode)
        loss, dlogits = loss_fn(logits)
        _, dx = self.backprop(cache, dlogits, param_grads=False)
        return loss, dx, logits

    def sample_fixed(self, rng):
        return None

    # training protocol used by fit()
    def trainable(self):
        return self.params

    def loss_and_param_grads(self, x, y, rng):
        logits, cache = self.forward(x, cache=True, rng=rng, mode=RunMode.TRAIN)
        loss, dlogits = softmax_cross_entropy(logits, y)
        n = x.shape[0]
        grads, _ = self.backprop(cache, dlogits / n)
        return float(loss.mean()), grads


def init_params(net, seed):
    """Fresh He-normal weights and zero biases drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    params = [layer.init_params(s, rng) for layer, s in zip(net.layers, net.shapes)]
    return Network(net.layers, net.input_shape, params, seed)


def build_network(layers, input_shape, seed=0):
    return init_params(Network(layers, input_shape), seed)


# ---------------------------------------------------------------------------
# losses


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Row-wise cross-entropy and its gradient ``softmax - onehot``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = lse - z[rows, labels]
    grad = np.exp(z - lse[:, None])
    grad[rows, labels] -= 1.0
    return np.maximum(loss, 0.0), grad


def loss_and_grad(logits, label):
    """Cross-entropy of a single logit vector against ``label``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    loss, grad = softmax_cross_entropy(logits.reshape(1, -1), np.array([label]))
    return float(loss[0]), grad[0]


def cw_margin(logits, target, kappa=0.0):
    """``max(max_{j != t} Z_j - Z_t, -kappa)`` per row, with its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    rows = np.arange(n)
    other = logits.copy()
    other[rows, target] = -np.inf
    j = other.argmax(axis=1)
    raw = logits[rows, j] - logits[rows, target]
    loss = np.maximum(raw, -kappa)
    grad = np.zeros_like(logits)
    active = raw > -kappa
    grad[rows[active], j[active]] = 1.0
    grad[rows[active], target[active]] -= 1.0
    return loss, grad


# ---------------------------------------------------------------------------
# optimisation


def sgd_update(params, grads, lr):
    """Return ``p - lr * g`` for every parameter; inputs are left untouched."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        if set(p) != set(g or {}):
            raise ShapeError("parameter and gradient keys differ")
        new = {}
        for k in p:
            if p[k].shape != g[k].shape:
                raise ShapeError(f"shape mismatch for {k}: {p[k].shape} vs {g[k].shape}")
            new[k] = p[k] - lr * g[k]
        out.append(new)
    return out


class SGD:
    """In-place SGD with optional heavy-ball momentum."""

    def __init__(self, lr, momentum=0.0):
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.momentum = momentum
        self._velocity = {}

    def step(self, params, grads):
        for i, (p, g) in enumerate(zip(params, grads)):
            for k, gk in (g or {}).items():
                if self.momentum:
                    v = self._velocity.get((i, k))
                    v = gk.copy() if v is None else self.momentum * v + gk
                    self._velocity[(i, k)] = v
                    gk = v
                p[k] -= self.lr * gk


@dataclass
class TrainConfig:
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 64
    momentum: float = 0.9
    val_fraction: float = 0.1
    patience: int | None = 3  # None: fixed epoch budget, no early stopping
    min_delta: float = 1e-4


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    converged: bool = False

    @property
    def epochs_run(self):
        return len(self.train_loss)


def _mean_loss(model, x, y, batch=1000):
    # fixed stream: the validation curve must not jitter between epochs
    rng = np.random.default_rng(0)
    total = 0.0
    for s in range(0, len(x), batch):
        logits = model.logits(x[s : s + batch], rng=rng, mode=RunMode.FIXED)
        total += softmax_cross_entropy(logits, y[s : s + batch])[0].sum()
    return total / len(x)


def fit(model, x, y, cfg: TrainConfig, rng, perturb: Callable | None = None):
    """Minibatch training of ``model.trainable()`` on ``(x, y)``.

    Runs at most ``cfg.epochs`` epochs and stops early once the validation
    loss has improved by less than ``cfg.min_delta`` over ``cfg.patience``
    epochs; with ``patience=None`` every epoch of the budget is run.  ``perturb(model, xb, yb)`` may replace each minibatch before the
    update (adversarial training).  Models with stochastic layers are trained
    with those layers active.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x)
    if n == 0:
        raise ValueError("training data is empty")
    order = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n)) if cfg.val_fraction > 0 else 0
    n_val = min(n_val, n - 1)
    val_idx, tr_idx = order[:n_val], order[n_val:]
    xv, yv = x[val_idx], y[val_idx]
    xt, yt = x[tr_idx], y[tr_idx]

    opt = SGD(cfg.lr, cfg.momentum)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(len(xt))
        losses = []
        for s in range(0, len(xt), cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            xb, yb = xt[idx], yt[idx]
            if perturb is not None:
                xb = perturb(model, xb, yb)
            loss, grads = model.loss_and_param_grads(xb, yb, rng)
            opt.step(model.trainable(), grads)
            model.touch()
            losses.append(loss * len(idx))
        report.train_loss.append(float(np.sum(losses) / len(xt)))
        if n_val:
            report.val_loss.append(float(_mean_loss(model, xv, yv)))
            vl = report.val_loss
            if cfg.patience is not None and len(vl) > cfg.patience and min(vl[: -cfg.patience]) - min(vl[-cfg.patience :]) < cfg.min_delta:
                report.converged = True
                break
    if cfg.patience is None:
        report.converged = True
    if not report.converged:
        msg = f"training hit the {cfg.epochs}-epoch cap before the validation loss settled"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return report


def accuracy(model, x, y, rng=None, mode=RunMode.STOCHASTIC, batch=1000):
    """Top-1 accuracy in percent; one stochastic pass per example."""
    hits = 0
    for s in range(0, len(x), batch):
        r = rng
        if r is not None and not isinstance(r, np.random.Generator):
            r = r[s : s + batch]
        pred = model.logits(x[s : s + batch], rng=r, mode=mode).argmax(axis=1)
        hits += int((pred == y[s : s + batch]).sum())
    return 100.0 * hits / len(x)


# ---------------------------------------------------------------------------
# checkpoints


def _write_records(buf, params):
    for i, p in enumerate(params):
        for k in sorted(p):
            a = np.ascontiguousarray(p[k], dtype="<f8")
            buf.write(struct.pack("<II", i, a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(a.tobytes())


def _read_records(buf, params, count=None):
    """Fill ``params`` (list of dicts, keys known) from records in ``buf``."""
    slots = [(i, k) for i, p in enumerate(params) for k in sorted(p)]
    if count is not None and count != len(slots):
        raise ValueError(f"checkpoint holds {count} tensors, model expects {len(slots)}")
    for i, k in slots:
        head = buf.read(8)
        if len(head) < 8:
            raise ValueError("truncated checkpoint")
        layer, rank = struct.unpack("<II", head)
        dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        if layer != i or dims != params[i][k].shape:
            raise ValueError(
                f"checkpoint record (layer {layer}, shape {dims}) does not match "
                f"layer {i} {k} {params[i][k].shape}"
            )
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise ValueError("truncated checkpoint")
        params[i][k] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)


def params_to_bytes(net):
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_records(buf, net.params)
    return buf.getvalue()


def params_from_bytes(net, data):
    """Copy of ``net`` carrying the parameters stored in ``data``."""
    buf = io.BytesIO(data)
    if buf.read(len(MAGIC)) != MAGIC:
        raise ValueError("not a SWNB1 checkpoint")
    params = [{k: v.copy() for k, v in p.items()} for p in net.params]
    _read_records(buf, params)
    if buf.read(1):
        raise ValueError("trailing bytes in checkpoint")
    return Network(net.layers, net.input_shape, params, net.seed)


def save_params(net, path):
    with open(path, "wb") as f:
        f.write(params_to_bytes(net))


def load_params(net, path):
    with open(path, "rb") as f:
        return params_from_bytes(net, f.read())


def param_digest(params) -> str:
    import hashlib

    h = hashlib.sha256()
    for i, p in enumerate(params):
        for k in sorted(p):
            h.update(f"{i}:{k}:{p[k].shape}".encode())
            h.update(np.ascontiguousarray(p[k]).tobytes())
    return h.hexdigest()
