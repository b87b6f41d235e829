"""Targeted gradient attacks (FGSM, PGD, CW-L2, CW-PGD) and ASR evaluation.

Every attack talks to the model through a :class:`GradientOracle`, which
decides how randomness is handled when a gradient is requested:

* ``whitebox`` - fresh randomness (switching path / mask / noise) per query;
* ``eot``      - mean of ``n`` fresh queries per gradient;
* ``fixed``    - randomness frozen once at construction: stochastic layers are
  removed and an HRS model keeps one active path per example.

Pixel domain is ``[0, 1]`` throughout; inputs are batches.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .nn import cw_margin, softmax_cross_entropy
from .stochastic import RowRng, RunMode, derive_rng

MODES = ("whitebox", "eot", "fixed")


def parse_epsilon(value) -> float:
    """``"8/255"`` -> 8/255 exactly as a float; numbers pass through."""
    if isinstance(value, str):
        return float(Fraction(value.strip()))
    return float(value)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.3
    alpha: float | None = None
    iters: int = 100
    kappa: float = 0.0
    c_search: tuple = (10, 1e-3, 1e3)
    cw_iters: int = 100
    cw_lr: float = 0.1
    targeted: bool = True
    loss: str = "ce"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.iters < 0 or self.cw_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        rounds, lo, hi = self.c_search
        if rounds < 1 or not 0 < lo < hi:
            raise ValueError("c_search needs rounds >= 1 and 0 < c_min < c_max")
        if self.loss not in ("ce", "cw"):
            raise ValueError(f"unknown attack loss {self.loss!r}")

    @property
    def step_size(self):
        if self.alpha is not None:
            return self.alpha
        return max(self.epsilon / 10.0, 1.0 / 510.0)


@dataclass
class AdvResult:
    x_adv: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    queries: int


def ce_loss(target):
    target = np.asarray(target)
    return lambda logits: softmax_cross_entropy(logits, target)


def cw_loss(target, kappa=0.0):
    target = np.asarray(target)
    return lambda logits: cw_margin(logits, target, kappa)


def _loss_for(cfg, target):
    return ce_loss(target) if cfg.loss == "ce" else cw_loss(target, cfg.kappa)


class GradientOracle:
    """Gradient/logit access to ``model`` under one randomness regime.

    Each row ``i`` of the attacked batch owns the stream derived from
    ``(seed, example_ids[i])``, so an example's trajectory does not depend on
    how examples are batched.
    """

    def __init__(self, model, mode="whitebox", n=10, seed=0, example_ids=None, rows=None):
        if mode not in MODES:
            raise ValueError(f"unknown oracle mode {mode!r}; expected one of {MODES}")
        if mode == "eot" and n < 1:
            raise ValueError("EOT needs n >= 1")
        if example_ids is None:
            if rows is None:
                raise ValueError("pass example_ids or rows")
            example_ids = range(rows)
        self.model = model
        self.mode = mode
        self.n = n if mode == "eot" else 1
        self.ids = [int(i) for i in example_ids]
        self.rng = RowRng([derive_rng(seed, "oracle", i) for i in self.ids])
        self.paths = None
        if mode == "fixed":
            fixed_rng = RowRng([derive_rng(seed, "fixed", i) for i in self.ids])
            self.paths = model.sample_fixed(fixed_rng)
        self.queries = 0

    def query(self, x, loss_fn):
        """One gradient sample: (per-row loss, input gradient, logits)."""
        self.queries += 1
        if self.mode == "fixed":
            return self.model.value_and_grad(x, loss_fn, mode=RunMode.FIXED, paths=self.paths)
        return self.model.value_and_grad(x, loss_fn, rng=self.rng, mode=RunMode.STOCHASTIC)

    def gradient(self, x, loss_fn):
        if self.mode == "eot":
            return eot_gradient(self, x, loss_fn, self.n)
        return self.query(x, loss_fn)

    def logits(self, x):
        if self.mode == "fixed":
            return self.model.logits(x, mode=RunMode.FIXED, paths=self.paths)
        return self.model.logits(x, rng=self.rng, mode=RunMode.STOCHASTIC)


def eot_gradient(oracle, x, loss_fn, n):
    """Average of ``n`` independent gradient queries (loss and logits too)."""
    if n < 1:
        raise ValueError("EOT needs n >= 1")
    loss, grad, logits = oracle.query(x, loss_fn)
    if n == 1:
        return loss, grad, logits
    loss, grad, logits = loss.copy(), grad.copy(), logits.copy()
    for _ in range(n - 1):
        l, g, z = oracle.query(x, loss_fn)
        loss += l
        grad += g
        logits += z
    return loss / n, grad / n, logits / n


def _result(x, x_adv, success, queries):
    d = (x_adv - x).reshape(len(x), -1)
    return AdvResult(
        x_adv=x_adv,
        success=np.asarray(success, dtype=bool),
        linf=np.abs(d).max(axis=1) if d.size else np.zeros(len(x)),
        l2=np.sqrt((d**2).sum(axis=1)),
        queries=queries,
    )


def _hits(logits, target):
    return logits.argmax(axis=1) == target


def fgsm(oracle, x, target, epsilon, targeted=True, label=None) -> AdvResult:
    """One signed-gradient step of size ``epsilon``, clipped to the pixel box."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target)
    q0 = oracle.queries
    if targeted:
        _, g, _ = oracle.gradient(x, ce_loss(target))
        x_adv = np.clip(x - epsilon * np.sign(g), 0.0, 1.0)
    else:
        _, g, _ = oracle.gradient(x, ce_loss(label))
        x_adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    ok = _hits(oracle.logits(x_adv), target) if targeted else ~_hits(oracle.logits(x_adv), label)
    return _result(x, x_adv, ok, oracle.queries - q0)


def project(x_adv, x, epsilon):
    return np.clip(np.clip(x_adv, x - epsilon, x + epsilon), 0.0, 1.0)


def pgd(oracle, x, target, cfg: AttackConfig, label=None, on_step=None) -> AdvResult:
    """Iterated signed-gradient steps projected onto the epsilon-ball and box.

    Descends the configured loss toward ``target``; with ``cfg.targeted``
    false it instead ascends cross-entropy of ``label``.  The gradient is
    re-queried every iteration, so stochastic models are re-randomized.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target)
    q0 = oracle.queries
    if cfg.targeted:
        loss_fn, sign = _loss_for(cfg, target), -1.0
    else:
        if label is None:
            raise ValueError("untargeted PGD needs the true labels")
        loss_fn, sign = ce_loss(label), 1.0
    alpha = cfg.step_size
    x_adv = x.copy()
    for t in range(cfg.iters):
        _, g, _ = oracle.gradient(x_adv, loss_fn)
        x_adv = project(x_adv + sign * alpha * np.sign(g), x, cfg.epsilon)
        if on_step is not None:
            on_step(t, x_adv)
    z = oracle.logits(x_adv)
    ok = _hits(z, target) if cfg.targeted else ~_hits(z, label)
    return _result(x, x_adv, ok, oracle.queries - q0)


def cw_pgd(oracle, x, target, cfg: AttackConfig, on_step=None) -> AdvResult:
    """PGD descending the CW margin loss with confidence ``cfg.kappa``."""
    return pgd(oracle, x, target, replace(cfg, loss="cw", targeted=True), on_step=on_step)


def cw_l2(oracle, x, target, cfg: AttackConfig) -> AdvResult:
    """Carlini-Wagner L2 attack with a per-example search over ``c``.

    For each ``c`` the objective ``||delta||^2 + c * f(x + delta)`` is
    minimized by ``cfg.cw_iters`` plain gradient steps of size ``cfg.cw_lr``
    (clipping to the box after each step).  ``f`` is the margin loss
    ``max(max_{j!=t} Z_j - Z_t, -kappa)``.  ``c`` is bisected geometrically in
    ``[c_min, c_max]`` for ``rounds`` rounds; the smallest-L2 successful
    iterate over all rounds is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(target)
    n = len(x)
    rounds, c_min, c_max = cfg.c_search
    lo = np.full(n, float(c_min))
    hi = np.full(n, float(c_max))
    c = np.sqrt(lo * hi)
    q0 = oracle.queries
    shape = (n,) + (1,) * (x.ndim - 1)
    margin = cw_loss(target, cfg.kappa)

    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    fallback_f = np.full(n, np.inf)
    fallback = x.copy()
    for _ in range(rounds):
        cc = c.copy()

        def objective(logits, cc=cc):
            f, df = margin(logits)
            return cc * f, cc[:, None] * df

        delta = np.zeros_like(x)
        won = np.zeros(n, dtype=bool)
        for it in range(cfg.cw_iters + 1):
            x_adv = x + delta
            _, g, logits = oracle.query(x_adv, objective)
            f, _ = margin(logits)
            ok = f <= -cfg.kappa
            l2 = (delta.reshape(n, -1) ** 2).sum(axis=1)
            better = ok & (l2 < best_l2)
            best_l2[better] = l2[better]
            best_adv[better] = x_adv[better]
            worse = ~ok & (f < fallback_f)
            fallback_f[worse] = f[worse]
            fallback[worse] = x_adv[worse]
            won |= ok
            if it == cfg.cw_iters:
                break
            step = 2.0 * delta + g
            delta = np.clip(x + delta - cfg.cw_lr * step, 0.0, 1.0) - x
        hi = np.where(won, c, hi)
        lo = np.where(won, lo, c)
        c = np.sqrt(lo * hi)
    success = np.isfinite(best_l2)
    x_adv = np.where(success.reshape(shape), best_adv, fallback)
    return _result(x, x_adv, success, oracle.queries - q0)


ATTACKS = {
    "fgsm": lambda oracle, x, t, cfg: fgsm(oracle, x, t, cfg.epsilon),
    "pgd": lambda oracle, x, t, cfg: pgd(oracle, x, t, replace(cfg, loss="ce")),
    "cw": cw_l2,
    "cwpgd": cw_pgd,
}


# ---------------------------------------------------------------------------
# evaluation


def fixed_predictions(model, x, seed, ids):
    """Predictions with randomness disabled (HRS: a per-example fixed path)."""
    paths = model.sample_fixed(RowRng([derive_rng(seed, "fixed", i) for i in ids]))
    return model.logits(x, mode=RunMode.FIXED, paths=paths).argmax(axis=1)


def stochastic_predictions(model, x, seed, ids, votes=1, tag="eval"):
    """Class predicted by one (or a majority of ``votes``) fresh stochastic pass."""
    rng = RowRng([derive_rng(seed, tag, i) for i in ids])
    counts = np.zeros((len(x), model.num_classes), dtype=np.int64)
    for _ in range(votes):
        pred = model.logits(x, rng=rng, mode=RunMode.STOCHASTIC).argmax(axis=1)
        counts[np.arange(len(x)), pred] += 1
    return counts.argmax(axis=1)


@dataclass
class AttackRow:
    example_id: int
    attack: str
    epsilon: float
    success: bool
    linf: float
    l2: float
    queries: int


@dataclass
class EvalResult:
    asr: float
    rows: list = field(default_factory=list)

    @property
    def defense_rate(self):
        return 100.0 - self.asr


def target_of(labels, classes):
    return (np.asarray(labels) + 1) % classes


def evaluate_attack(model, attack, x, y, cfg: AttackConfig, *, name="attack", mode="whitebox",
                    eot_n=10, seed=0, ids=None, votes=1, workers=1, chunk=50,
                    prefiltered=False) -> EvalResult:
    """Attack success rate (percent) over the correctly classified examples.

    Examples are first filtered to those the model gets right with its
    randomness disabled; the target is ``(label + 1) mod classes``.  Success
    means a fresh stochastic pass (majority of ``votes`` passes) on the
    adversarial input predicts the target.  Work is split in fixed-size
    chunks, so serial and threaded runs give identical results.
    """
    if isinstance(attack, str):
        attack = ATTACKS[attack]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    if not prefiltered:
        keep = fixed_predictions(model, x, seed, ids) == y
        x, y, ids = x[keep], y[keep], ids[keep]
    if len(x) == 0:
        raise ValueError("no correctly classified examples left to attack")
    target = target_of(y, model.num_classes)

    def run(s):
        sl = slice(s, s + chunk)
        oracle = GradientOracle(model, mode, eot_n, seed, ids[sl])
        res = attack(oracle, x[sl], target[sl], cfg)
        pred = stochastic_predictions(model, res.x_adv, seed, ids[sl], votes)
        ok = pred == target[sl]
        per = res.queries
        return [
            AttackRow(int(i), name, cfg.epsilon, bool(o), float(li), float(l2), int(per))
            for i, o, li, l2 in zip(ids[sl], ok, res.linf, res.l2)
        ]

    starts = range(0, len(x), chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    rows = [r for p in parts for r in p]
    asr = 100.0 * sum(r.success for r in rows) / len(rows)
    return EvalResult(asr, rows)


ATTACK_CSV_FIELDS = ("example_id", "attack", "epsilon", "success", "linf", "l2", "queries")


def write_attack_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ATTACK_CSV_FIELDS)
        for r in rows:
            w.writerow([r.example_id, r.attack, repr(r.epsilon), int(r.success),
                        repr(r.linf), repr(r.l2), r.queries])
