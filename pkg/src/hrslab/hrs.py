"""Hierarchical random switching.

A base layer list is cut into ``M`` consecutive blocks; block ``i`` is
replaced by ``N_i`` structurally identical channels with independent weights.
At run time every example is routed through one uniformly chosen channel per
block (its *active path*), so any single path is an ordinary network of the
base architecture.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .stochastic import RunMode, as_batch_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass
class SwitchingBlock:
    channels: list
    frozen: bool = False

    def __post_init__(self):
        if not self.channels:
            raise ValueError("a switching block needs at least one channel")
        first = self.channels[0]
        for ch in self.channels[1:]:
            if ch.layers != first.layers or ch.input_shape != first.input_shape:
                raise ValueError("channels of one block must share their structure")

    def __len__(self):
        return len(self.channels)


class Switcher:
    """Uniform, independent channel choice per block."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def sample(self, counts):
        return tuple(int(self.rng.integers(0, n)) for n in counts)


@dataclass
class _Cache:
    paths: np.ndarray
    groups: list  # per block: list of (channel, rows or None, channel cache)
    shapes: list


class HrsModel:
    def __init__(self, base_arch, input_shape, split_points, blocks):
        self.base_arch = list(base_arch)
        self.input_shape = tuple(input_shape)
        self.split_points = list(split_points)
        self.blocks = list(blocks)
        if len(self.blocks) != len(self.split_points) + 1:
            raise ValueError("need exactly one more block than split points")

    @property
    def channel_counts(self):
        return [len(b) for b in self.blocks]

    @property
    def num_classes(self):
        return self.blocks[-1].channels[0].output_dim

    @property
    def stochastic(self):
        return self.path_count() > 1 or any(ch.stochastic for b in self.blocks for ch in b.channels)

    def path_count(self):
        return int(np.prod(self.channel_counts, dtype=object))

    def iter_paths(self):
        return (tuple(int(c) for c in p) for p in np.ndindex(*self.channel_counts))

    def check_path(self, path):
        path = tuple(int(c) for c in path)
        if len(path) != len(self.blocks):
            raise ValueError(f"path has {len(path)} entries, model has {len(self.blocks)} blocks")
        for b, (c, n) in enumerate(zip(path, self.channel_counts)):
            if not 0 <= c < n:
                raise ValueError(f"channel {c} out of range for block {b} ({n} channels)")
        return path

    def assemble(self, path) -> nn.Network:
        """Flat network made of the path's channels (parameters copied)."""
        path = self.check_path(path)
        layers, params = [], []
        for block, c in zip(self.blocks, path):
            ch = block.channels[c]
            layers += ch.layers
            params += [{k: v.copy() for k, v in p.items()} for p in ch.params]
        return nn.Network(layers, self.input_shape, params)

    def sample_paths(self, rng, n):
        rng = as_batch_rng(rng, n)
        cols = []
        for count in self.channel_counts:
            # single-channel blocks draw nothing, keeping the stream aligned
            # with a plain network's
            if rng is None or count == 1:
                cols.append(np.zeros(n, dtype=np.int64))
            else:
                cols.append(rng.integers(count))
        return np.stack(cols, axis=1) if cols else np.zeros((n, 0), dtype=np.int64)

    def sample_fixed(self, rng):
        """One frozen path per row (fixed-randomness setting)."""
        return self.sample_paths(rng, rng.n)

    # -- forward / backward --------------------------------------------------

    def forward(self, x, paths=None, cache=False, rng=None, mode=RunMode.STOCHASTIC):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise nn.ShapeError(f"expected input (N, {self.input_shape}), got {x.shape}")
        n = x.shape[0]
        rng = as_batch_rng(rng, n)
        if paths is None:
            if rng is None and self.path_count() > 1:
                raise ValueError("switching needs a random stream or explicit paths")
            paths = self.sample_paths(rng, n)
        else:
            paths = np.asarray(paths, dtype=np.int64)
            if paths.ndim == 1:
                paths = np.broadcast_to(self.check_path(paths), (n, len(self.blocks)))
            elif paths.shape != (n, len(self.blocks)):
                raise ValueError(f"paths must have shape ({n}, {len(self.blocks)})")
            if (paths < 0).any() or (paths >= np.array(self.channel_counts)).any():
                raise ValueError("path refers to a channel that does not exist")
        groups, shapes = [], []
        h = x
        for b, block in enumerate(self.blocks):
            col = paths[:, b]
            used = np.unique(col)
            shapes.append(h.shape)
            if len(used) == 1:
                y, c = block.channels[used[0]].forward(h, cache=cache, rng=rng, mode=mode)
                groups.append([(int(used[0]), None, c)])
            else:
                out, grp = None, []
                for ch in used:
                    rows = np.flatnonzero(col == ch)
                    sub = None if rng is None else rng.rows(rows)
                    y_ch, c = block.channels[ch].forward(h[rows], cache=cache, rng=sub, mode=mode)
                    if out is None:
                        out = np.empty((n, *y_ch.shape[1:]))
                    out[rows] = y_ch
                    grp.append((int(ch), rows, c))
                y = out
                groups.append(grp)
            h = y
        return h, (_Cache(paths, groups, shapes) if cache else None)

    def backprop(self, cache, dlogits, param_grads=True, input_grad=True):
        """Gradients for every channel of every non-frozen block, plus dx.

        Returns ``(grads, dx)`` where ``grads[b][c]`` is the per-layer gradient
        list of channel ``c`` in block ``b`` (``None`` if frozen or unused).
        """
        grads = [[None] * len(b) for b in self.blocks]
        dy = np.asarray(dlogits, dtype=np.float64)
        lowest_needed = 0
        if not input_grad:
            live = [i for i, b in enumerate(self.blocks) if not b.frozen]
            lowest_needed = live[0] if live else len(self.blocks)
        for b in range(len(self.blocks) - 1, lowest_needed - 1, -1):
            block = self.blocks[b]
            want = param_grads and not block.frozen
            dx = None
            for ch, rows, c in cache.groups[b]:
                d_in = dy if rows is None else dy[rows]
                g, d = block.channels[ch].backprop(c, d_in, param_grads=want)
                if want:
                    grads[b][ch] = g
                if rows is None:
                    dx = d
                else:
                    if dx is None:
                        dx = np.empty(cache.shapes[b])
                    dx[rows] = d
            dy = dx
        return grads, (dy if input_grad else None)

    def forward_active(self, x, path, cache=False, rng=None, mode=RunMode.STOCHASTIC):
        return self.forward(x, paths=self.check_path(path), cache=cache, rng=rng, mode=mode)

    def logits(self, x, rng=None, mode=RunMode.STOCHASTIC, paths=None):
        return self.forward(x, paths=paths, rng=rng, mode=mode)[0]

    def value_and_grad(self, x, loss_fn, rng=None, mode=RunMode.STOCHASTIC, paths=None):
        logits, cache = self.forward(x, paths=paths, cache=True, rng=rng, mode=mode)
        loss, dlogits = loss_fn(logits)
        _, dx = self.backprop(cache, dlogits, param_grads=False)
        return loss, dx, logits

    # -- training protocol ---------------------------------------------------

    def _live(self):
        return [(b, c) for b, blk in enumerate(self.blocks) if not blk.frozen for c in range(len(blk))]

    def trainable(self):
        out = []
        for b, c in self._live():
            out += self.blocks[b].channels[c].params
        return out

    def touch(self):
        for b, c in self._live():
            self.blocks[b].channels[c].touch()

    def loss_and_param_grads(self, x, y, rng):
        logits, cache = self.forward(x, cache=True, rng=rng, mode=RunMode.TRAIN)
        loss, dlogits = nn.softmax_cross_entropy(logits, y)
        grads, _ = self.backprop(cache, dlogits / x.shape[0], input_grad=False)
        flat = []
        for b, c in self._live():
            g = grads[b][c]
            if g is None:  # channel saw no rows in this batch
                g = [{k: np.zeros_like(v) for k, v in p.items()} for p in self.blocks[b].channels[c].params]
            flat += g
        return float(loss.mean()), flat

    def frozen_digest(self):
        return {b: nn.param_digest([p for ch in blk.channels for p in ch.params])
                for b, blk in enumerate(self.blocks)}


def _segments(base_arch, input_shape, split_points):
    n = len(base_arch)
    pts = list(split_points)
    if any(b <= a for a, b in zip(pts, pts[1:])):
        raise ValueError(f"split points must be strictly increasing: {pts}")
    if pts and (pts[0] <= 0 or pts[-1] >= n):
        raise ValueError(f"split points must lie strictly inside the {n}-layer list: {pts}")
    shapes = nn.infer_shapes(base_arch, input_shape)
    bounds = [0, *pts, n]
    return [(base_arch[a:b], shapes[a]) for a, b in zip(bounds, bounds[1:])]


def build_hrs(base_arch, input_shape, split_points, channel_counts, seed=0) -> HrsModel:
    """Untrained HRS model; channel ``c`` of block ``b`` is seeded from (seed, b, c)."""
    segs = _segments(base_arch, input_shape, split_points)
    if len(channel_counts) != len(segs):
        raise ValueError(f"{len(segs)} blocks but {len(channel_counts)} channel counts")
    if any(int(n) < 1 for n in channel_counts):
        raise ValueError("every block needs at least one channel")
    blocks = []
    for b, ((layers, shape), count) in enumerate(zip(segs, channel_counts)):
        chans = [nn.build_network(layers, shape, derive_seed(seed, b, c)) for c in range(int(count))]
        blocks.append(SwitchingBlock(chans))
    return HrsModel(base_arch, input_shape, split_points, blocks)


def path_count(model) -> int:
    return model.path_count()


def sample_path(model, switcher: Switcher):
    return switcher.sample(model.channel_counts)


def forward_active(model, x, path, cache=False, rng=None, mode=RunMode.STOCHASTIC):
    return model.forward_active(x, path, cache=cache, rng=rng, mode=mode)


def stage_seeds(seed, block, channel):
    """(init seed, training seed) used for stage ``(block, channel)``."""
    return derive_seed(seed, "init", block, channel), derive_seed(seed, "train", block, channel)


@dataclass
class StageReport:
    block: int
    channel: int
    train: nn.TrainReport


@dataclass
class HrsTrainReport:
    stages: list = field(default_factory=list)

    @property
    def converged(self):
        return all(s.train.converged for s in self.stages)


def bottom_up_train(model: HrsModel, x, y, cfg: nn.TrainConfig, seed=0, perturb=None):
    """Bottom-up training, one block at a time.

    For block ``i`` and each of its channels ``j``: lower blocks keep all their
    (frozen, switching) channels, every block from ``i`` upward gets a single
    freshly initialised channel, the trainable part is fitted, and only the
    block-``i`` channel is kept.  Block ``i`` is frozen before moving up.
    """
    if len(x) == 0:
        raise ValueError("training data is empty")
    segs = _segments(model.base_arch, model.input_shape, model.split_points)
    report = HrsTrainReport()
    for i, block in enumerate(model.blocks):
        kept = []
        for j in range(len(block)):
            init_seed, train_seed = stage_seeds(seed, i, j)
            init_rng = np.random.default_rng(init_seed)
            fresh = []
            for layers, shape in segs[i:]:
                net = nn.Network(layers, shape)
                params = [l.init_params(s, init_rng) for l, s in zip(net.layers, net.shapes)]
                fresh.append(SwitchingBlock([nn.Network(layers, shape, params)]))
            tmp = HrsModel(model.base_arch, model.input_shape, model.split_points,
                           model.blocks[:i] + fresh)
            rep = nn.fit(tmp, x, y, cfg, np.random.default_rng(train_seed), perturb=perturb)
            log.info("block %d channel %d: %d epochs, final loss %.4f",
                     i, j, rep.epochs_run, rep.train_loss[-1])
            report.stages.append(StageReport(i, j, rep))
            kept.append(tmp.blocks[i].channels[0])
        model.blocks[i] = SwitchingBlock(kept, frozen=True)
    return report


def path_accuracies(model, x, y, mode=RunMode.FIXED):
    """Test accuracy (%) of every path, keyed by path tuple."""
    return {p: nn.accuracy(model.assemble(p), x, y, mode=mode) for p in model.iter_paths()}


# ---------------------------------------------------------------------------
# checkpoints: SWNB1 magic, a group directory, then tensor records


def hrs_to_bytes(model):
    buf = io.BytesIO()
    buf.write(nn.MAGIC)
    groups = [(b, c, ch) for b, blk in enumerate(model.blocks) for c, ch in enumerate(blk.channels)]
    buf.write(struct.pack("<I", len(groups)))
    for b, c, ch in groups:
        count = sum(len(p) for p in ch.params)
        buf.write(struct.pack("<III", b, c, count))
        nn._write_records(buf, ch.params)
    return buf.getvalue()


def hrs_from_bytes(model, data):
    """Copy of ``model`` (same structure) carrying the stored channel weights."""
    buf = io.BytesIO(data)
    if buf.read(len(nn.MAGIC)) != nn.MAGIC:
        raise ValueError("not a SWNB1 checkpoint")
    (n_groups,) = struct.unpack("<I", buf.read(4))
    expected = sum(model.channel_counts)
    if n_groups != expected:
        raise ValueError(f"checkpoint has {n_groups} channels, model has {expected}")
    blocks = []
    for b, blk in enumerate(model.blocks):
        chans = []
        for c, ch in enumerate(blk.channels):
            gb, gc, count = struct.unpack("<III", buf.read(12))
            if (gb, gc) != (b, c):
                raise ValueError(f"expected block {b} channel {c}, found {gb}/{gc}")
            params = [{k: v.copy() for k, v in p.items()} for p in ch.params]
            nn._read_records(buf, params, count)
            chans.append(nn.Network(ch.layers, ch.input_shape, params))
        blocks.append(SwitchingBlock(chans, frozen=blk.frozen))
    if buf.read(1):
        raise ValueError("trailing bytes in checkpoint")
    return HrsModel(model.base_arch, model.input_shape, model.split_points, blocks)


def save_hrs(model, path):
    with open(path, "wb") as f:
        f.write(hrs_to_bytes(model))


def load_hrs(model, path):
    with open(path, "rb") as f:
        return hrs_from_bytes(model, f.read())
