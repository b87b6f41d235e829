import csv
import io
import json

import numpy as np
import pytest

from hrslab import config, data, experiment
from hrslab.experiment import ReportBundle, emit_report, report_files, run_experiment


@pytest.fixture
def smoke():
    cfg = config.bundled("smoke")
    cfg["evaluation"] = {"examples": 60}     # two attack chunks, so threading matters
    return cfg


@pytest.fixture(scope="module")
def smoke_report(tmp_path_factory):
    cfg = config.bundled("smoke")
    cache = tmp_path_factory.mktemp("cache")
    return run_experiment(cfg, cache_dir=str(cache))


def rows(payload):
    return list(csv.DictReader(io.StringIO(payload.decode())))


def test_smoke_report_contents(smoke_report):
    files = report_files(smoke_report)
    acc = rows(files["accuracy.csv"])
    assert [r["defense"] for r in acc] == ["none", "sap-k=units", "dropout-0.2",
                                           "gaussian-0.05/0.05", "hrs-2x[2,2]"]
    assert len(rows(files["asr.csv"])) == 5 * 3
    assert len(rows(files["paths.csv"])) == 4
    assert {r["defense"] for r in rows(files["gradstd.csv"])} == {r["defense"] for r in acc}
    assert float(next(r for r in rows(files["gradstd.csv"]) if r["defense"] == "none")["grad_std"]) == 0.0
    assert len(rows(files["des.csv"])) == 4
    summary = json.loads(files["summary.json"])
    assert set(summary["defenses"]) == {"sap", "dropout", "gaussian", "hrs"}
    meta = json.loads(files["report.json"])
    assert meta["config_hash"] == config.config_hash(config.bundled("smoke"))
    assert set(meta["files"]) == set(files) - {"report.json"}


def test_identical_runs_are_byte_identical_serial_or_threaded(smoke, tmp_path):
    a = report_files(run_experiment(smoke, cache_dir=str(tmp_path / "c1"), workers=1))
    b = report_files(run_experiment(smoke, cache_dir=str(tmp_path / "c2"), workers=3))
    c = report_files(run_experiment(smoke, cache_dir=str(tmp_path / "c1"), workers=2))
    assert a == b == c


def test_seed_changes_results(smoke, tmp_path):
    a = report_files(run_experiment(smoke, cache_dir=str(tmp_path)))
    b = report_files(run_experiment(smoke, seed=1, cache_dir=str(tmp_path)))
    assert a["accuracy.csv"] != b["accuracy.csv"]


def test_emit_twice_is_identical(smoke_report, tmp_path):
    first = {p: open(p, "rb").read() for p in emit_report(smoke_report, tmp_path / "r")}
    second = {p: open(p, "rb").read() for p in emit_report(smoke_report, tmp_path / "r")}
    assert first == second
    assert not [p for p in (tmp_path / "r").iterdir() if p.name.startswith(".")]


def test_empty_bundle_writes_headers_only(tmp_path):
    paths = emit_report(ReportBundle(), tmp_path)
    by_name = {p.rsplit("/", 1)[-1]: open(p).read() for p in paths}
    assert by_name["accuracy.csv"] == ",".join(experiment.ACCURACY_FIELDS) + "\n"
    assert by_name["asr.csv"] == ",".join(experiment.ASR_FIELDS) + "\n"
    assert json.loads(by_name["summary.json"]) == {}


def test_unwritable_output(smoke_report, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(smoke_report, blocker / "sub")


def test_parts_and_kinds_filter(tmp_path):
    cfg = config.bundled("smoke")
    b = run_experiment(cfg, cache_dir=str(tmp_path), parts=(), kinds=("hrs",))
    assert [r["defense"] for r in b.accuracy] == ["hrs-2x[2,2]"]
    assert b.asr == [] and b.gradstd == [] and b.des == []
    with pytest.raises(ValueError):
        run_experiment(cfg, parts=("nope",))


def test_duplicate_defense_names_rejected(tmp_path):
    cfg = config.bundled("smoke")
    cfg["defenses"].append({"kind": "none"})
    with pytest.raises(config.ConfigError, match="duplicate"):
        run_experiment(cfg, cache_dir=str(tmp_path), parts=())


def test_des_needs_a_base_model(tmp_path):
    cfg = config.bundled("smoke")
    cfg["defenses"] = [{"kind": "hrs", "channels": [2, 2]}]
    with pytest.raises(config.ConfigError):
        run_experiment(cfg, cache_dir=str(tmp_path), parts=("des",))


def test_cache_reuses_trained_weights(tmp_path):
    cfg = config.bundled("smoke")
    run_experiment(cfg, cache_dir=str(tmp_path), parts=())
    n = len(list(tmp_path.iterdir()))
    assert n >= 4
    run_experiment(cfg, cache_dir=str(tmp_path), parts=())
    assert len(list(tmp_path.iterdir())) == n


def test_idx_dataset(tmp_path):
    b = data.gen_synthetic(0, 3, 6, 80, jitter=0.3)
    imgs = np.rint(b.inputs * 255).astype(np.uint8)
    data.write_idx(tmp_path / "ti", tmp_path / "tl", imgs[:60], b.labels[:60])
    data.write_idx(tmp_path / "si", tmp_path / "sl", imgs[60:], b.labels[60:])
    cfg = {"seed": 0,
           "dataset": {"kind": "idx", "train_images": str(tmp_path / "ti"),
                       "train_labels": str(tmp_path / "tl"), "test_images": str(tmp_path / "si"),
                       "test_labels": str(tmp_path / "sl")},
           "model": {"preset": "mlp", "hidden": 8, "train": {"epochs": 2, "batch_size": 10}},
           "defenses": [{"kind": "none"}]}
    bundle = run_experiment(cfg, parts=())
    assert 0.0 <= bundle.accuracy_of("none") <= 100.0


def test_theta_and_names():
    assert experiment.defense_name({"kind": "none"}) == "none"
    assert experiment.defense_name({"kind": "hrs", "channels": [5, 5]}) == "hrs-2x[5,5]"
    assert experiment.defense_name({"kind": "sap", "k": 40}) == "sap-k=40"
    assert experiment.defense_name({"kind": "advtrain", "epsilon": "32/255"}) == "advtrain-32/255"
    assert experiment.defense_name({"kind": "dropout", "rate": 0.1, "name": "d"}) == "d"


def test_report_json_round_trips_through_validator(smoke_report):
    meta = json.loads(report_files(smoke_report)["report.json"])
    assert config.validate(meta["config"]) == smoke_report.config


def test_des_range_filter(tmp_path):
    cfg = config.bundled("smoke")
    cfg["des"]["delta_t_range"] = [1000, 2000]
    s = run_experiment(cfg, cache_dir=str(tmp_path), parts=("des",)).des_summary
    assert s["delta_t_range"] == [1000, 2000]
    assert all(v["count"] == 0 and v["mean"] is None for v in s["defenses"].values())
    cfg["des"]["delta_t_range"] = [1]
    with pytest.raises(config.ConfigError, match="delta_t_range"):
        config.validate(cfg)
