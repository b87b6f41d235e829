import copy
import json

import jsonschema
import pytest
from hypothesis import given, settings, strategies as st

from hrslab import config


@pytest.fixture
def smoke():
    return config.bundled("smoke")


def test_every_bundled_preset_validates():
    names = config.preset_names()
    assert {"smoke", "table1-desk", "fig4-desk", "adaptive-desk", "table3-desk",
            "blocks-desk", "fig5-desk", "advtrain-desk"} <= set(names)
    for n in names:
        config.bundled(n)


def test_unknown_preset():
    with pytest.raises(config.ConfigError, match="nope"):
        config.bundled("nope")


def test_unknown_defense_kind_names_the_field(smoke):
    smoke["defenses"][1] = {"kind": "magic"}
    with pytest.raises(config.ConfigError, match=r"defenses/1/kind"):
        config.validate(smoke)


@pytest.mark.parametrize("where, extra", [
    ((), {"colour": "red"}),
    (("dataset",), {"colour": "red"}),
    (("model",), {"colour": "red"}),
    (("defenses", 2), {"sigma": 0.1}),
    (("attacks", 0), {"colour": "red"}),
])
def test_schema_is_closed(smoke, where, extra):
    node = smoke
    for k in where:
        node = node[k]
    node.update(extra)
    with pytest.raises(config.ConfigError):
        config.validate(smoke)


@pytest.mark.parametrize("mutate, field", [
    (lambda c: c["defenses"][2].update(rate=1.0), "defenses/2/rate"),
    (lambda c: c.update(seed=-1), "seed"),
    (lambda c: c["attacks"][0].update(mode="sideways"), "attacks/0/mode"),
    (lambda c: c["attacks"][0].update(epsilons=["eight"]), "attacks/0/epsilons/0"),
    (lambda c: c["dataset"].update(kind="cifar"), "dataset/kind"),
])
def test_bad_values_name_their_field(smoke, mutate, field):
    mutate(smoke)
    with pytest.raises(config.ConfigError, match=field):
        config.validate(smoke)


def test_epsilon_over_one_rejected(smoke):
    smoke["attacks"][0]["epsilons"] = ["300/255"]
    with pytest.raises(config.ConfigError):
        config.validate(smoke)


def test_load_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(config.ConfigError, match="not valid JSON"):
        config.load(bad)
    with pytest.raises(config.ConfigError, match="cannot read"):
        config.load(tmp_path / "missing.json")


def test_json_round_trip(tmp_path, smoke):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(smoke))
    assert config.load(p) == smoke


def test_hash_ignores_output_location(smoke):
    moved = dict(smoke, output="/elsewhere", cache="/tmp/c", workers=4)
    assert config.config_hash(moved) == config.config_hash(smoke)
    assert config.config_hash(config.with_seed(smoke, 1)) != config.config_hash(smoke)


def test_with_seed_copies(smoke):
    before = copy.deepcopy(smoke)
    out = config.with_seed(smoke, 2**64 - 1)
    assert out["seed"] == 2**64 - 1 and smoke == before
    with pytest.raises(config.ConfigError):
        config.with_seed(smoke, 2**64)


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=6), st.integers(), max_size=3))
def test_random_extra_keys_never_pass_silently(extra):
    cfg = config.bundled("smoke")
    added = {k: v for k, v in extra.items() if k not in cfg}
    cfg.update(added)
    if added:
        with pytest.raises(config.ConfigError):
            config.validate(cfg)
    else:
        config.validate(cfg)


def test_schema_itself_is_valid():
    jsonschema.Draft202012Validator.check_schema(config.SCHEMA)
