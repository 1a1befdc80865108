"""Experiment configuration.

A single JSON document describes a run. Defaults give the small desk fixture;
a file and dotted-path overrides (e.g. ``train.lambda=0.5``) layer on top.
The canonical dict form round-trips losslessly and feeds a stable hash that
artifacts embed for reproducibility.

The ``train.lambda`` key is the cross-entropy weight in the combined local
loss; it surfaces internally as ``TrainConfig.ce_weight``.
"""

import copy
import hashlib
import json

from .datagen import StreamSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .federation import FederationConfig
from .seeding import TAG_ENCODER, child_seed
from .training import TrainConfig

METHODS = ("prompt_pool", "head_only")

DEFAULTS = {
    "seed": 0,
    "method": "prompt_pool",
    "output_dir": None,
    "stream": {
        "tasks": 5,
        "classes_per_task": 4,
        "raw_dim": 16,
        "train_per_class": 50,
        "test_per_class": 20,
        "class_separation": 4.5,
    },
    "federation": {
        "initial_clients": 10,
        "sampled_per_round": 5,
        "rounds_per_task": 5,
        "new_clients_per_transition": 0,
        "current_data_fraction": 0.9,
        "old_only_selectable": True,
        "ownership_fraction": 0.6,
    },
    "train": {
        "lambda": 1.0,
        "learning_rate": 0.3,
        "local_epochs": 6,
        "batch_size": 4,
        "optimizer": "sgd",
    },
    "prompts": {
        "pool_size": 6,
        "top_n": 3,
        "prompt_len": 4,
        "common_len": 5,
    },
    "encoder": {
        "token_count": 4,
        "embed_dim": 16,
        "depth": 1,
        "head_count": 2,
    },
    "ablations": {
        "sort": True,
        "task_relevant": True,
        "task_irrelevant": True,
    },
}


def _merge(base, override, path=""):
    """Recursive dict merge that rejects keys absent from the defaults."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a section, got {type(value).__name__}")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def parse_override_value(text):
    """CLI override values: JSON when it parses, bare string otherwise."""
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


class ExperimentConfig:
    """Validated view over the config dict; builds the typed sub-configs."""

    def __init__(self, data=None):
        self.data = _merge(DEFAULTS, data or {})
        self._validate()

    # construction -------------------------------------------------------------

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))

    def with_overrides(self, overrides):
        """New config with dotted-path overrides applied, e.g.
        {"train.lambda": 0.5, "ablations.sort": False}."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = data
            for part in parts[:-1]:
                if not isinstance(node.get(part), dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[part]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return ExperimentConfig(data)

    # validation ---------------------------------------------------------------

    def _validate(self):
        if self.data["method"] not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if not isinstance(self.data["seed"], int):
            raise ConfigError("seed must be an integer")
        p = self.data["prompts"]
        if p["pool_size"] < 1 or not 1 <= p["top_n"] <= p["pool_size"]:
            raise ConfigError("prompts.top_n must be in [1, prompts.pool_size]")
        if p["prompt_len"] < 1 or p["common_len"] < 1:
            raise ConfigError("prompt_len and common_len must be >= 1")
        a = self.data["ablations"]
        if a["sort"] and not a["task_relevant"]:
            raise ConfigError("ablations.sort requires ablations.task_relevant")
        # eagerly construct every typed sub-config so all range checks fire
        self.stream_spec()
        self.federation_config()
        self.train_config()
        self.encoder_config()

    # typed views ---------------------------------------------------------------

    @property
    def seed(self):
        return self.data["seed"]

    @property
    def method(self):
        return self.data["method"]

    @property
    def output_dir(self):
        return self.data["output_dir"]

    @property
    def ablations(self):
        return dict(self.data["ablations"])

    @property
    def prompts(self):
        return dict(self.data["prompts"])

    def stream_spec(self):
        s = self.data["stream"]
        return StreamSpec(
            tasks=s["tasks"],
            classes_per_task=s["classes_per_task"],
            raw_dim=s["raw_dim"],
            train_per_class=s["train_per_class"],
            test_per_class=s["test_per_class"],
            class_separation=s["class_separation"],
            seed=self.seed,
        )

    def federation_config(self):
        f = self.data["federation"]
        return FederationConfig(
            initial_clients=f["initial_clients"],
            sampled_per_round=f["sampled_per_round"],
            rounds_per_task=f["rounds_per_task"],
            new_clients_per_transition=f["new_clients_per_transition"],
            current_data_fraction=f["current_data_fraction"],
            old_only_selectable=f["old_only_selectable"],
            ownership_fraction=f["ownership_fraction"],
        )

    def train_config(self):
        t = self.data["train"]
        return TrainConfig(
            lr=t["learning_rate"],
            ce_weight=t["lambda"],
            local_epochs=t["local_epochs"],
            batch_size=t["batch_size"],
            optimizer=t["optimizer"],
        )

    def encoder_config(self):
        e = self.data["encoder"]
        return EncoderConfig(
            raw_dim=self.data["stream"]["raw_dim"],
            token_count=e["token_count"],
            embed_dim=e["embed_dim"],
            depth=e["depth"],
            head_count=e["head_count"],
            seed=child_seed(self.seed, TAG_ENCODER),
        )

    # serialization ---------------------------------------------------------------

    def to_dict(self):
        return copy.deepcopy(self.data)

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    def config_hash(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")
