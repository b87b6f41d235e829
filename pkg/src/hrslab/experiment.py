"""End-to-end experiment pipeline and report emission.

``run_experiment`` trains (or loads from the model cache) every configured
defense, runs the attack grid, and collects accuracy, ASR, DES, gradient
dispersion and reprogramming tables into a :class:`ReportBundle`.
``emit_report`` writes the bundle as CSV and JSON files.  Every number is a
function of ``(config, seed)`` only.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import attacks, config as config_mod, data, hrs, metrics, models, nn, reprogram
from .stochastic import DropoutSpec, GaussianSpec, SapSpec, derive_seed

log = logging.getLogger(__name__)

ACCURACY_FIELDS = ("defense", "kind", "theta", "accuracy")
ASR_FIELDS = ("defense", "kind", "theta", "attack", "mode", "epsilon", "asr", "attacked")
PATH_FIELDS = ("defense", "path", "accuracy")
DES_FIELDS = ("defense", "theta", "delta_t", "delta_d", "des")
GRADSTD_FIELDS = ("defense", "kind", "theta", "grad_std", "stderr", "samples")
REPROGRAM_FIELDS = ("epoch", "defense", "kernel", "accuracy")

DEFAULT_EXAMPLES = 200


@dataclass
class ReportBundle:
    config: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""
    accuracy: list = field(default_factory=list)
    asr: list = field(default_factory=list)
    attack_rows: dict = field(default_factory=dict)
    paths: list = field(default_factory=list)
    des: list = field(default_factory=list)
    des_summary: dict = field(default_factory=dict)
    gradstd: list = field(default_factory=list)
    reprogram: list = field(default_factory=list)

    def asr_of(self, defense, attack, epsilon, mode="whitebox"):
        eps = attacks.parse_epsilon(epsilon)
        for r in self.asr:
            if (r["defense"], r["attack"], r["mode"]) == (defense, attack, mode) and \
                    abs(r["epsilon"] - eps) < 1e-12:
                return r["asr"]
        raise KeyError((defense, attack, epsilon, mode))

    def accuracy_of(self, defense):
        return next(r["accuracy"] for r in self.accuracy if r["defense"] == defense)

    def gradstd_of(self, defense):
        return next(r for r in self.gradstd if r["defense"] == defense)


# ---------------------------------------------------------------------------
# defenses


def theta_of(d):
    kind = d["kind"]
    if kind == "sap":
        return f"k={d['k']}" if d.get("k") else "k=units"
    if kind == "dropout":
        return repr(float(d["rate"]))
    if kind == "gaussian":
        return f"{float(d['sigma'])!r}/{float(d.get('sigma_inner', d['sigma']))!r}"
    if kind == "hrs":
        return f"{len(d['channels'])}x[{','.join(str(c) for c in d['channels'])}]"
    if kind == "advtrain":
        return str(d["epsilon"]).replace(" ", "")
    return "-"


def defense_name(d):
    if "name" in d:
        return d["name"]
    return d["kind"] if d["kind"] == "none" else f"{d['kind']}-{theta_of(d)}"


def _safe(name):
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name).strip("_")


def _arch(cfg, image_shape, classes):
    m = cfg.get("model", {})
    name = m.get("preset", "mlp")
    if name == "mlp":
        in_dim = int(np.prod(image_shape))
        return models.mlp_layers(in_dim, m.get("hidden", 200), classes), (in_dim,), name
    if tuple(image_shape) != (28, 28):
        raise config_mod.ConfigError(f"model/preset: {name!r} needs 28x28 images")
    layers, shape = models.preset(name)
    if classes != 10:
        layers = models.cnn_layers(classes)
    return layers, shape, name


def _train_cfg(cfg):
    base = models.DESK_TRAIN
    over = cfg.get("model", {}).get("train", {})
    fields = {k: over.get(k, getattr(base, k)) for k in
              ("epochs", "lr", "batch_size", "momentum", "val_fraction", "patience")}
    return nn.TrainConfig(**fields)


class _ModelCache:
    """Trained-weight store keyed by everything that determines training."""

    def __init__(self, directory):
        self.dir = directory
        if directory:
            os.makedirs(directory, exist_ok=True)

    def path(self, key):
        if not self.dir:
            return None
        digest = hashlib.sha256(config_mod.canonical(key).encode()).hexdigest()[:24]
        return os.path.join(self.dir, f"{digest}.swnb")

    def network(self, key, net, train):
        p = self.path(key)
        if p and os.path.exists(p):
            return nn.load_params(net, p)
        train(net)
        if p:
            _atomic_bytes(p, nn.params_to_bytes(net))
        return net

    def hrs(self, key, model, train):
        p = self.path(key)
        if p and os.path.exists(p):
            loaded = hrs.load_hrs(model, p)
            for b in loaded.blocks:
                b.frozen = True
            return loaded
        train(model)
        if p:
            _atomic_bytes(p, hrs.hrs_to_bytes(model))
        return model


def build_defense(d, layers, shape, preset, x, y, tcfg, seed, cache, key, base=None):
    """Trained model for defense description ``d``.

    SAP is an inference-time wrapper around the trained base weights.
    """
    kind = d["kind"]
    init_seed = derive_seed(seed, "init")
    train_rng = lambda: np.random.default_rng(derive_seed(seed, "train"))  # noqa: E731
    key = {**key, "defense": {k: v for k, v in d.items() if k != "name"}}
    if kind == "sap":
        if base is None:
            base = build_defense({"kind": "none"}, layers, shape, preset, x, y, tcfg, seed,
                                 cache, {k: v for k, v in key.items() if k != "defense"})
        spec = SapSpec(d.get("k"), d.get("insert_at"))
        wrapped = models.with_defense(layers, spec)
        at = wrapped.index(next(layer for layer in wrapped if getattr(layer, "stochastic", False)))
        return nn.Network(wrapped, shape, base.params[:at] + [{}] + base.params[at:])
    if kind == "hrs":
        sp = d["split"] if "split" in d else models.hrs_split(preset, len(d["channels"]))
        model = hrs.build_hrs(layers, shape, sp, d["channels"], seed=init_seed)
        return cache.hrs(key, model,
                         lambda m: hrs.bottom_up_train(m, x, y, tcfg, seed=derive_seed(seed, "hrs")))
    if kind == "none":
        arch = layers
    elif kind == "dropout":
        arch = models.with_defense(layers, DropoutSpec(d["rate"], d.get("infer_rate"),
                                                       d.get("insert_at")))
    elif kind == "gaussian":
        arch = models.with_defense(layers, GaussianSpec(d["sigma"], d.get("sigma_inner", d["sigma"])))
    elif kind == "advtrain":
        arch = layers
    else:
        raise config_mod.ConfigError(f"defenses: unknown defense kind {kind!r}")
    net = nn.build_network(arch, shape, seed=init_seed)

    def train(n):
        if kind == "advtrain":
            eps = attacks.parse_epsilon(d["epsilon"])
            models.adv_train(n, x, y, tcfg, eps, train_rng(), iters=d.get("iters", 10),
                             seed=derive_seed(seed, "advtrain"))
        else:
            nn.fit(n, x, y, tcfg, train_rng())

    return cache.network(key, net, train)


# ---------------------------------------------------------------------------
# data


def load_dataset(ds, shape=None):
    kind = ds["kind"]
    n_train, n_test = ds.get("train"), ds.get("test")
    if kind == "mnist":
        train, test = data.mnist_subset(ds.get("seed", 0), n_train or 3000, n_test or 2000)
    elif kind == "idx":
        try:
            train = data.load_idx(ds["train_images"], ds["train_labels"])
            test = data.load_idx(ds["test_images"], ds["test_labels"])
        except KeyError as e:
            raise config_mod.ConfigError(f"dataset/{e.args[0]}: required for idx datasets") from None
        if n_train:
            train = train.subset(slice(0, n_train))
        if n_test:
            test = test.subset(slice(0, n_test))
    else:
        n_train, n_test = n_train or 3000, n_test or 1000
        full = data.gen_synthetic(ds.get("seed", 0), ds.get("classes", 10), ds.get("hw", 28),
                                  n_train + n_test)
        train, test = full.subset(slice(0, n_train)), full.subset(slice(n_train, None))
    if shape is None:
        return train, test
    return train.reshape(*shape), test.reshape(*shape)


# ---------------------------------------------------------------------------
# pipeline


def _attack_cfg(a, eps):
    alpha = a.get("alpha")
    return attacks.AttackConfig(
        epsilon=eps,
        alpha=None if alpha is None else attacks.parse_epsilon(alpha),
        iters=a.get("iters", 100),
        kappa=a.get("kappa", 0.0),
        c_search=tuple(a.get("c_search", (10, 1e-3, 1e3))),
        cw_iters=a.get("cw_iters", 100),
        cw_lr=a.get("cw_lr", 0.1),
        loss="cw" if a["kind"] == "cwpgd" else "ce",
    )


PARTS = ("attacks", "des", "gradstd", "reprogram")


@dataclass
class Prepared:
    """Data and trained models for one (config, seed)."""

    seed: int
    train: data.Batch
    test: data.Batch
    layers: list
    shape: tuple
    preset: str
    tcfg: nn.TrainConfig
    cache: object
    defenses: list
    models: dict  # defense name -> (description, model)


def prepare(cfg, seed=None, cache_dir=None, kinds=None) -> Prepared:
    """Load the dataset and train (or fetch from cache) every configured defense."""
    cfg = config_mod.validate(cfg)
    seed = int(cfg.get("seed", 0) if seed is None else seed)
    cache = _ModelCache(cache_dir if cache_dir is not None else cfg.get("cache"))
    train, test = load_dataset(cfg["dataset"])
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if "classes" in cfg["dataset"]:
        classes = cfg["dataset"]["classes"]
    layers, shape, preset = _arch(cfg, train.inputs.shape[1:], classes)
    train, test = train.reshape(*shape), test.reshape(*shape)
    tcfg = _train_cfg(cfg)
    key = {"dataset": cfg["dataset"], "model": cfg.get("model", {}), "seed": seed,
           "train": tcfg.__dict__}
    trained = {}
    base = None
    defenses = [d for d in cfg["defenses"] if kinds is None or d["kind"] in kinds]
    for d in defenses:
        name = defense_name(d)
        if name in trained:
            raise config_mod.ConfigError(f"defenses: duplicate defense name {name!r}")
        log.info("preparing defense %s", name)
        model = build_defense(d, layers, shape, preset, train.inputs, train.labels, tcfg, seed,
                              cache, key, base)
        if d["kind"] == "none":
            base = model
        trained[name] = (d, model)
    return Prepared(seed, train, test, layers, shape, preset, tcfg, cache, defenses, trained)


def run_experiment(cfg, seed=None, cache_dir=None, workers=None, parts=PARTS,
                   kinds=None) -> ReportBundle:
    """Run the configured pipeline.

    ``parts`` limits which configured analyses run (accuracy is always
    reported) and ``kinds`` limits the defenses to those kinds.
    """
    cfg = config_mod.validate(cfg)
    unknown = set(parts) - set(PARTS)
    if unknown:
        raise ValueError(f"unknown report parts {sorted(unknown)}")
    workers = workers or cfg.get("workers", 1)
    prep = prepare(cfg, seed, cache_dir, kinds)
    seed, train, test, trained = prep.seed, prep.train, prep.test, prep.models
    ev = cfg.get("evaluation", {})
    n_eval = min(ev.get("examples", DEFAULT_EXAMPLES), len(test))
    xa, ya = test.inputs[:n_eval], test.labels[:n_eval]
    votes = ev.get("votes", 1)
    bundle = ReportBundle(config=cfg, seed=seed, config_hash=config_mod.config_hash(cfg))

    for name, (d, model) in trained.items():
        acc_rng = [np.random.default_rng(derive_seed(seed, "accuracy", i)) for i in range(len(test))]
        acc = nn.accuracy(model, test.inputs, test.labels, rng=acc_rng) if model.stochastic else \
            nn.accuracy(model, test.inputs, test.labels)
        bundle.accuracy.append({"defense": name, "kind": d["kind"], "theta": theta_of(d),
                                "accuracy": acc})
        if d["kind"] == "hrs":
            for p, a in hrs.path_accuracies(model, test.inputs, test.labels).items():
                bundle.paths.append({"defense": name, "path": "-".join(map(str, p)), "accuracy": a})

    evaluated = {}

    def evaluate(name, kind, eps, a):
        d, model = trained[name]
        mode = a.get("mode", "whitebox")
        k = (name, kind, mode, eps)
        if k in evaluated:
            return evaluated[k]
        res = attacks.evaluate_attack(
            model, kind, xa, ya, _attack_cfg({**a, "kind": kind}, eps), name=kind, mode=mode,
            eot_n=a.get("eot_n", 10), seed=derive_seed(seed, "attack"), votes=votes,
            workers=workers)
        log.info("%s %s/%s eps=%.4f: ASR %.2f%%", name, kind, mode, eps, res.asr)
        evaluated[k] = res
        bundle.asr.append({"defense": name, "kind": d["kind"], "theta": theta_of(d),
                           "attack": kind, "mode": mode, "epsilon": eps, "asr": res.asr,
                           "attacked": len(res.rows)})
        bundle.attack_rows.setdefault(name, []).extend(res.rows)
        return res

    for a in cfg.get("attacks", []) if "attacks" in parts else []:
        for e in a["epsilons"]:
            for name in trained:
                evaluate(name, a["kind"], attacks.parse_epsilon(e), a)

    if "des" in cfg and "des" in parts:
        _des(cfg["des"], trained, bundle, evaluate)

    if "gradstd" in cfg and "gradstd" in parts:
        g = cfg["gradstd"]
        n_ex = min(g.get("examples", 20), len(test))
        samples = g.get("samples", 200)
        for name, (d, model) in trained.items():
            st = metrics.grad_std_stats(model, test.inputs[:n_ex], test.labels[:n_ex], samples,
                                        derive_seed(seed, "gradstd"))
            bundle.gradstd.append({"defense": name, "kind": d["kind"], "theta": theta_of(d),
                                   "grad_std": st.value, "stderr": st.stderr, "samples": samples})

    if "reprogram" in cfg and "reprogram" in parts:
        _reprogram(cfg, prep.defenses, seed, prep.layers, prep.shape, prep.preset, prep.tcfg,
                   prep.cache, train, test, bundle)
    return bundle


def _des(dcfg, trained, bundle, evaluate):
    bases = [n for n, (d, _) in trained.items() if d["kind"] == "none"]
    if not bases:
        raise config_mod.ConfigError("des: needs a defense of kind 'none' as the reference")
    eps = attacks.parse_epsilon(dcfg["epsilon"])
    a = {"kind": dcfg["attack"], "mode": dcfg.get("mode", "whitebox")}
    base_acc = bundle.accuracy_of(bases[0])
    base_rate = evaluate(bases[0], dcfg["attack"], eps, a).defense_rate
    by_kind = {}
    for name, (d, _) in trained.items():
        if d["kind"] == "none":
            continue
        rate = evaluate(name, dcfg["attack"], eps, a).defense_rate
        rec = metrics.des_record(name, theta_of(d), base_acc, base_rate,
                                 bundle.accuracy_of(name), rate)
        bundle.des.append(rec)
        by_kind.setdefault(d["kind"], []).append(rec)
    dd_range, dt_range = dcfg.get("delta_d_range"), dcfg.get("delta_t_range")

    def wanted(r):
        return (not dd_range or dd_range[0] <= r.delta_d <= dd_range[1]) and \
            (not dt_range or dt_range[0] <= r.delta_t <= dt_range[1])

    summary = {}
    for kind, recs in by_kind.items():
        recs = [r for r in recs if wanted(r)]
        if not recs:
            summary[kind] = {"mean": None, "variance": None, "count": 0, "fit": None}
            continue
        mean, var = metrics.mean_des(recs)
        try:
            slope, intercept = metrics.des_fit([(r.delta_t, r.delta_d) for r in recs])
            fit = {"slope": slope, "intercept": intercept}
        except ValueError:
            fit = None
        summary[kind] = {"mean": mean, "variance": var, "count": len(recs), "fit": fit}
    bundle.des_summary = {"attack": dcfg["attack"], "epsilon": eps, "eta": metrics.ETA,
                          "delta_d_range": dd_range, "delta_t_range": dt_range,
                          "defenses": summary}


def _reprogram(cfg, defenses, seed, layers, shape, preset, tcfg, cache, task_b_train, task_b_test, bundle):
    rc = cfg["reprogram"]
    task_a = rc.get("task_a", {"kind": "synthetic", "seed": 1, "classes": 10, "hw": 28})
    a_train, _ = load_dataset(task_a, shape)
    key = {"dataset": task_a, "model": cfg.get("model", {}), "seed": seed, "train": tcfg.__dict__}
    hw = int(round(np.sqrt(np.prod(shape))))
    src = task_b_train.inputs.reshape(len(task_b_train), -1)
    side = int(round(np.sqrt(src.shape[1])))
    xb = src.reshape(-1, side, side)
    xbt = task_b_test.inputs.reshape(len(task_b_test), side, side)
    base = None
    for d in defenses:
        if d["kind"] == "sap" and base is None:
            base = build_defense({"kind": "none"}, layers, shape, preset, a_train.inputs,
                                 a_train.labels, tcfg, seed, cache, key)
        target = build_defense(d, layers, shape, preset, a_train.inputs, a_train.labels, tcfg, seed,
                               cache, key, base)
        if d["kind"] == "none":
            base = target
        for k in rc.get("kernels", [3]):
            prog = reprogram.build_program((side, side), (hw, hw), k, derive_seed(seed, "program", k))
            curve = reprogram.train_program(
                target, prog, xb, task_b_train.labels, xbt, task_b_test.labels,
                epochs=rc.get("epochs", 50), lr=rc.get("lr", 0.01),
                batch_size=rc.get("batch_size", 64), momentum=rc.get("momentum", 0.9),
                seed=derive_seed(seed, "reprogram", k))
            for epoch, acc in enumerate(curve):
                bundle.reprogram.append({"epoch": epoch, "defense": defense_name(d), "kernel": k,
                                         "accuracy": acc})


# ---------------------------------------------------------------------------
# report files


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _csv_bytes(fields, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    return buf.getvalue().encode()


def _json_bytes(obj):
    return (json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n").encode()


def _atomic_bytes(path, payload):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def report_files(bundle: ReportBundle) -> dict:
    """File name -> bytes for every output of ``bundle``."""
    files = {
        "accuracy.csv": _csv_bytes(ACCURACY_FIELDS, bundle.accuracy),
        "asr.csv": _csv_bytes(ASR_FIELDS, bundle.asr),
        "paths.csv": _csv_bytes(PATH_FIELDS, bundle.paths),
        "des.csv": _csv_bytes(DES_FIELDS, [
            {"defense": r.defense, "theta": r.theta, "delta_t": r.delta_t,
             "delta_d": r.delta_d, "des": r.value} for r in bundle.des]),
        "gradstd.csv": _csv_bytes(GRADSTD_FIELDS, bundle.gradstd),
        "reprogram.csv": _csv_bytes(REPROGRAM_FIELDS, bundle.reprogram),
        "summary.json": _json_bytes(bundle.des_summary),
    }
    for name, rows in bundle.attack_rows.items():
        files[f"attacks_{_safe(name)}.csv"] = _csv_bytes(
            attacks.ATTACK_CSV_FIELDS, [r.__dict__ for r in rows])
    files["report.json"] = _json_bytes({
        "config": bundle.config,
        "config_hash": bundle.config_hash,
        "seed": bundle.seed,
        "files": {n: hashlib.sha256(b).hexdigest() for n, b in sorted(files.items())},
    })
    return files


def emit_report(bundle: ReportBundle, directory) -> list:
    """Write all report files atomically; returns their paths."""
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {directory}: {exc}") from exc
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"report directory {directory} is not writable")
    paths = []
    for name, payload in sorted(report_files(bundle).items()):
        p = os.path.join(directory, name)
        _atomic_bytes(p, payload)
        paths.append(p)
    return paths
