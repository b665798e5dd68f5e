from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from parametrix.config import ConfigError, ExperimentConfig, format_float

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_load(name):
    cfg = ExperimentConfig.load(CONFIGS / name)
    assert cfg.digest() == ExperimentConfig.load(CONFIGS / name).digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"lambda": [64]})
    with pytest.raises(ConfigError, match="geometry"):
        ExperimentConfig.from_dict({"geometry": {"delta3": 0.1}})


@pytest.mark.parametrize("data", [
    {"seeds": "ten"},
    {"seeds": True},
    {"T": "1"},
    {"geometry": {"strict": 1}},
    {"lambdas": 64},
    {"perturbation": []},
])
def test_bad_types_rejected(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


@pytest.mark.parametrize("data", [
    {"geometry": {"delta2": 0.02}},
    {"geometry": {"xi0": [1.0, 0.0]}},
    {"geometry": {"xi0": [0.5]}},
    {"t_grid": [2.0]},
    {"strichartz": {"q": 8.0, "r": 5.0}},
    {"perturbation": {"family": "no-such-family"}},
    {"perturbation": {"dim": 2, "epsilon": 0.05}, "geometry": {"xi0": [1.0, 0.0]}},
])
def test_inconsistent_values_rejected(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_delta2_override():
    cfg = ExperimentConfig.from_dict({"geometry": {"delta2": 0.02, "strict": False}})
    assert cfg.geometry.delta2 == 0.02


def test_digest_tracks_content():
    a = ExperimentConfig.from_dict({})
    b = ExperimentConfig.from_dict({"seed": 1})
    assert a.digest() == ExperimentConfig.from_dict({}).digest()
    assert a.digest() != b.digest()


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("seeds: [1, 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    p.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)


@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_format_round_trips(v):
    assert float(format_float(v)) == v
