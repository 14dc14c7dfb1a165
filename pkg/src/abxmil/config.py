"""Run configuration: one nested key-value document with strict keys.

Every field has a default; a config file (JSON) overrides defaults, the
ABX_SEED environment variable overrides the file's seed, and command-line
flags override everything. Unknown keys are errors so typos never pass
silently. The fully resolved document is echoed into output artifacts.
"""

from __future__ import annotations

import copy
import json
import os

from .aggregators import ALPHA_MODES, VARIANTS
from .errors import ConfigError
from .synthdata import DatasetConfig

DEFAULTS = {
    "seed": 1,
    "data": {
        "n_slides": 200,
        "instances_min": 96,
        "instances_max": 160,
        "witness_rate": 0.05,
        "raw_dim": 24,
        "n_classes": 2,
        "separation": 2.5,
        "noise_sigma": 1.0,
        "region_grid": 2,
        "n_scales": 2,
        "bg_components": 8,
        "bg_scale": 3.0,
        "bg_class_leak": 2.0,
        "scale_noise": 0.05,
    },
    "sampling": {
        "strategy": "mris",      # mris | regional
        "count": 64,
        "ratios": None,          # None -> uniform over data.n_scales
        "regions": 1,            # for strategy regional
    },
    "model": {
        "variant": "abmilx",     # abmil | abmilx | mean | global-attn
        "dim": 64,
        "heads": 2,
        "attn_hidden": 128,
        "proj_dim": None,        # None -> dim
        "alpha_mode": "learnable",
        "ffn": False,
        "freeze_encoder": False,
    },
    "train": {
        "optimizer": "adam",     # adam | adamw
        "lr": 2e-4,
        "weight_decay": 1e-5,
        "epochs": 30,
        "batch_size": 4,
    },
    "eval": {
        "samples": 64,
        "bootstrap": 1000,
    },
    "paths": {
        "dataset": "dataset",
        "checkpoint": "run.abxc",
        "log": "train_log.jsonl",
        "out": "out",
    },
}

_OPTIMIZERS = ("adam", "adamw")
_STRATEGIES = ("mris", "regional")


class RunConfig:
    """Resolved configuration; sections are plain dicts, access via [ ]."""

    def __init__(self, doc: dict):
        self.doc = doc

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(seed=self.seed, **self.doc["data"])

    def sampling_ratios(self):
        ratios = self.doc["sampling"]["ratios"]
        if ratios is None:
            t = int(self.doc["data"]["n_scales"])
            return [1.0 / t] * t
        return [float(r) for r in ratios]

    def validate(self) -> "RunConfig":
        d = self.doc
        self.dataset_config().validate()
        m, t, s, e = d["model"], d["train"], d["sampling"], d["eval"]
        if m["variant"] not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {m['variant']!r}")
        if m["alpha_mode"] not in ALPHA_MODES:
            raise ConfigError(f"model.alpha_mode must be one of {ALPHA_MODES}")
        if m["dim"] < 1 or m["heads"] < 1 or m["attn_hidden"] < 1:
            raise ConfigError("model.dim, model.heads, model.attn_hidden must be >= 1")
        if t["optimizer"] not in _OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {_OPTIMIZERS}")
        if not t["lr"] > 0:
            raise ConfigError(f"train.lr must be > 0, got {t['lr']}")
        if t["weight_decay"] < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if t["epochs"] < 1 or t["batch_size"] < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if s["strategy"] not in _STRATEGIES:
            raise ConfigError(f"sampling.strategy must be one of {_STRATEGIES}")
        if s["count"] < 1 or s["regions"] < 1:
            raise ConfigError("sampling.count and sampling.regions must be >= 1")
        if s["ratios"] is not None and abs(sum(s["ratios"]) - 1.0) > 1e-9:
            raise ConfigError("sampling.ratios must sum to 1")
        if e["samples"] < 1 or e["bootstrap"] < 1:
            raise ConfigError("eval.samples and eval.bootstrap must be >= 1")
        if int(d["seed"]) < 0:
            raise ConfigError("seed must be >= 0")
        return self


def _merge(base: dict, incoming: dict, path: str = ""):
    for key, value in incoming.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {where!r} must be an object")
            _merge(base[key], value, where)
        else:
            base[key] = value


def set_path(doc: dict, dotted: str, value):
    """Apply one override like ("model.variant", "abmil")."""
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides=None, env=None) -> RunConfig:
    """defaults < file < ABX_SEED < explicit overrides."""
    doc = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                incoming = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(incoming, dict):
            raise ConfigError("config document must be a JSON object")
        _merge(doc, incoming)
    env = os.environ if env is None else env
    if env.get("ABX_SEED"):
        try:
            doc["seed"] = int(env["ABX_SEED"])
        except ValueError:
            raise ConfigError(f"ABX_SEED must be an integer, got {env['ABX_SEED']!r}")
    for dotted, value in (overrides or {}).items():
        set_path(doc, dotted, value)
    return RunConfig(doc).validate()
