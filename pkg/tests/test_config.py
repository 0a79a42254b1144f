import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from klab.config import DEFAULTS, REGISTRY, ConfigError, default_config, from_mapping, parse_config, serialize


def test_minimal_document_fills_defaults():
    cfg = parse_config("name: ou-check\n")
    assert cfg.numeric == DEFAULTS["numeric"]
    assert cfg.mc == DEFAULTS["mc"]
    assert cfg.drift == DEFAULTS["drift"]
    assert set(cfg.to_dict()) == {"name", "drift", "numeric", "mc", "outputs", "params"}


def test_partial_sections_are_merged():
    cfg = parse_config('{"name": "girsanov", "numeric": {"dt": 0.001}, "mc": {"seed": 9}}')
    assert cfg.numeric["dt"] == 0.001 and cfg.numeric["n"] == 128
    assert cfg.seed == 9 and cfg.mc["n_paths"] == 1000


def test_alpha_outside_interval_names_constraint():
    with pytest.raises(ConfigError) as info:
        parse_config("name: counterexample\ndrift: {kind: counterexample, alpha: 1.2}\n")
    assert any("(1/2, 1)" in v for v in info.value.violations)


def test_all_violations_reported():
    doc = {
        "name": "nope",
        "drift": {"kind": "counterexample", "alpha": 2.0},
        "numeric": {"d": 0, "n": 7, "dt": -1.0, "lam_sweep": [10, 5]},
        "mc": {"n_paths": 0, "seed": -1},
        "outputs": {"format": "xml"},
        "extra": 1,
    }
    with pytest.raises(ConfigError) as info:
        from_mapping(doc)
    text = "\n".join(info.value.violations)
    for key in ("name", "drift.alpha", "numeric.d", "numeric.n", "numeric.dt", "lam_sweep", "mc.n_paths", "mc.seed", "outputs.format", "extra"):
        assert key in text
    assert len(info.value.violations) >= 10


def test_malformed_documents():
    with pytest.raises(ConfigError):
        parse_config("name: [unclosed")
    with pytest.raises(ConfigError):
        parse_config("- just\n- a list\n")
    with pytest.raises(ConfigError):
        parse_config("")  # no name


@pytest.mark.parametrize("name", REGISTRY)
def test_defaults_valid_for_every_experiment(name):
    assert default_config(name).name == name


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(REGISTRY),
    st.floats(0.51, 0.99),
    st.integers(0, 2**31),
    st.integers(1, 10**6),
    st.dictionaries(st.text("abcxyz", min_size=1, max_size=5), st.integers(-5, 5), max_size=3),
)
def test_serialize_round_trip_is_idempotent(name, alpha, seed, n_paths, params):
    cfg = from_mapping({"name": name, "drift": {"kind": "counterexample", "alpha": alpha}, "mc": {"seed": seed, "n_paths": n_paths}, "params": params})
    text = serialize(cfg)
    again = parse_config(text)
    assert again == cfg
    assert serialize(again) == text
    assert json.loads(text)["mc"]["seed"] == seed


def test_overrides():
    cfg = default_config("norms").with_overrides(seed=5, out="elsewhere", norm_n=64)
    assert cfg.seed == 5 and cfg.outputs["dir"] == "elsewhere" and cfg.params["norm_n"] == 64
