"""Config document: defaults, overrides, validation, hashing, persistence."""

import json

import pytest

from fedprompt.config import (
    DEFAULTS,
    ExperimentConfig,
    parse_override_value,
)
from fedprompt.errors import ConfigError


def test_defaults_build_and_round_trip():
    cfg = ExperimentConfig()
    assert cfg.to_dict() == DEFAULTS
    assert cfg.seed == 0
    assert cfg.method == "prompt_pool"
    assert cfg.output_dir is None


def test_to_dict_is_isolated_from_internal_state():
    cfg = ExperimentConfig()
    d = cfg.to_dict()
    d["stream"]["tasks"] = 99
    assert cfg.to_dict()["stream"]["tasks"] == DEFAULTS["stream"]["tasks"]


def test_constructor_does_not_capture_the_input_dict():
    data = {"stream": {"tasks": 3}}
    cfg = ExperimentConfig(data)
    data["stream"]["tasks"] = 7
    assert cfg.to_dict()["stream"]["tasks"] == 3


def test_partial_section_merges_over_defaults():
    cfg = ExperimentConfig({"train": {"lambda": 2.5}})
    assert cfg.to_dict()["train"]["lambda"] == 2.5
    assert cfg.to_dict()["train"]["learning_rate"] == DEFAULTS["train"]["learning_rate"]


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'sreed'"):
        ExperimentConfig({"sreed": 1})
    with pytest.raises(ConfigError, match="train.lamda"):
        ExperimentConfig({"train": {"lamda": 1.0}})
    with pytest.raises(ConfigError, match="must be a section"):
        ExperimentConfig({"train": 3})


def test_with_overrides_dotted_paths():
    cfg = ExperimentConfig().with_overrides(
        {"train.lambda": 0.5, "ablations.sort": False, "seed": 17}
    )
    assert cfg.to_dict()["train"]["lambda"] == 0.5
    assert cfg.to_dict()["ablations"]["sort"] is False
    assert cfg.seed == 17


def test_with_overrides_returns_a_new_config():
    base = ExperimentConfig()
    changed = base.with_overrides({"stream.tasks": 2})
    assert base.to_dict()["stream"]["tasks"] == 5
    assert changed.to_dict()["stream"]["tasks"] == 2


def test_with_overrides_rejects_unknown_paths():
    cfg = ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.with_overrides({"train.momentum": 0.9})
    with pytest.raises(ConfigError):
        cfg.with_overrides({"nosuch.section": 1})
    with pytest.raises(ConfigError):
        cfg.with_overrides({"train.lambda.deep": 1})


# -- validation -----------------------------------------------------------------


def test_validation_rejects_bad_method_and_seed():
    with pytest.raises(ConfigError, match="method"):
        ExperimentConfig({"method": "prompt_tuning"})
    with pytest.raises(ConfigError, match="seed"):
        ExperimentConfig({"seed": "zero"})


def test_validation_rejects_bad_prompt_shape():
    with pytest.raises(ConfigError):
        ExperimentConfig({"prompts": {"top_n": 9}})  # exceeds pool_size
    with pytest.raises(ConfigError):
        ExperimentConfig({"prompts": {"top_n": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig({"prompts": {"prompt_len": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig({"prompts": {"common_len": 0}})
    ExperimentConfig({"prompts": {"top_n": 6}})  # N == M is allowed


def test_sort_requires_a_pool():
    with pytest.raises(ConfigError, match="sort requires"):
        ExperimentConfig({"ablations": {"task_relevant": False}})
    ExperimentConfig({"ablations": {"task_relevant": False, "sort": False}})


def test_validation_reaches_the_typed_subconfigs():
    # the sub-config constructors own these range checks
    with pytest.raises(ConfigError):
        ExperimentConfig({"stream": {"tasks": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig({"federation": {"sampled_per_round": 99}})
    with pytest.raises(ConfigError):
        ExperimentConfig({"train": {"optimizer": "lion"}})
    with pytest.raises(ConfigError):
        ExperimentConfig({"encoder": {"embed_dim": 15}})  # not divisible by heads


def test_lambda_surfaces_as_ce_weight():
    t = ExperimentConfig({"train": {"lambda": 3.25}}).train_config()
    assert t.ce_weight == 3.25
    assert t.lr == DEFAULTS["train"]["learning_rate"]


def test_stream_spec_inherits_the_run_seed():
    spec = ExperimentConfig({"seed": 11}).stream_spec()
    assert spec.seed == 11
    assert spec.raw_dim == DEFAULTS["stream"]["raw_dim"]


def test_encoder_config_ties_raw_dim_to_the_stream():
    enc = ExperimentConfig({"stream": {"raw_dim": 24}}).encoder_config()
    assert enc.raw_dim == 24


# -- persistence and hashing --------------------------------------------------------


def test_file_round_trip(tmp_path):
    cfg = ExperimentConfig({"seed": 5, "train": {"lambda": 0.25}})
    path = tmp_path / "config.json"
    cfg.write(str(path))
    loaded = ExperimentConfig.from_file(str(path))
    assert loaded.to_dict() == cfg.to_dict()
    assert json.loads(path.read_text()) == cfg.to_dict()


def test_hash_ignores_key_order_but_not_values():
    a = ExperimentConfig({"train": {"lambda": 2.0, "batch_size": 2}})
    b = ExperimentConfig({"train": {"batch_size": 2, "lambda": 2.0}})
    c = ExperimentConfig({"train": {"batch_size": 2, "lambda": 2.0}, "seed": 1})
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != c.config_hash()
    assert len(a.config_hash()) == 64


def test_parse_override_value_forms():
    assert parse_override_value("0.5") == 0.5
    assert parse_override_value("3") == 3
    assert parse_override_value("true") is True
    assert parse_override_value("false") is False
    assert parse_override_value("null") is None
    assert parse_override_value('"sgd"') == "sgd"
    assert parse_override_value("adam") == "adam"  # bare word falls back to string
    assert parse_override_value("[1, 2]") == [1, 2]
