"""Run configuration: JSON file, schema validation, derived builders.

A config file may specify any subset of the schema; missing keys take the
defaults below. Unknown keys are rejected everywhere. The effective seed is
the config seed unless the ELSA_SEED environment variable overrides it.
"""

import copy
import hashlib
import json
import os

import jsonschema

from .elastic import SupernetConfig
from .errors import ConfigurationError
from .model import ModelDims, make_task

DEFAULTS = {
    "seed": 0,
    "model": {"vocab": 64, "d": 32, "heads": 4, "mlp": 128, "depth": 2, "max_seq": 8},
    "task": {"kind": "modular_add", "seq_len": 4, "n_train": 2048, "n_val": 512,
             "seed": 0},
    "supernet": {"mode": "static", "targets": ["q", "v", "up", "down"],
                 "rank_choices": [8], "alpha": 16.0,
                 "head_choices": None, "mlp_width_choices": None},
    "train": {"steps": 500, "batch_size": 64, "lr": 1e-3, "beta1": 0.9,
              "beta2": 0.999, "eps": 1e-8, "warmup_max_steps": 0},
    "compress": {"metric": "wanda", "sparsity": 0.5, "bits": 4,
                 "calib_sequences": 128, "include_head": False,
                 "granularity": "per_output"},
    "merge": {"mode": "vanilla"},
    "search": {"pop_size": 50, "generations": 30, "workers": 1},
    "eval": {"batch_size": 256, "bench": False, "bench_repeats": 9},
}

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_INT_LIST = {"type": "array", "items": _POS_INT, "minItems": 1}
_OPT_INT_LIST = {"anyOf": [{"type": "null"}, _INT_LIST]}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _NONNEG_INT,
        "model": {
            "type": "object", "additionalProperties": False,
            "properties": {"vocab": _POS_INT, "d": _POS_INT, "heads": _POS_INT,
                           "mlp": _POS_INT, "depth": _POS_INT, "max_seq": _POS_INT},
        },
        "task": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["modular_add", "copy"]},
                "seq_len": _POS_INT, "n_train": _POS_INT, "n_val": _POS_INT,
                "seed": _NONNEG_INT,
            },
        },
        "supernet": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["static", "nls", "lonas"]},
                "targets": {"type": "array", "minItems": 1, "uniqueItems": True,
                            "items": {"enum": ["q", "k", "v", "o", "up", "down",
                                               "head"]}},
                "rank_choices": _INT_LIST,
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "head_choices": _OPT_INT_LIST,
                "mlp_width_choices": _OPT_INT_LIST,
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "steps": _NONNEG_INT, "batch_size": _POS_INT,
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "eps": {"type": "number", "exclusiveMinimum": 0},
                "warmup_max_steps": _NONNEG_INT,
            },
        },
        "compress": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "metric": {"enum": ["wanda", "magnitude"]},
                "sparsity": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "bits": {"type": "integer", "minimum": 2, "maximum": 8},
                "calib_sequences": _POS_INT,
                "include_head": {"type": "boolean"},
                "granularity": {"enum": ["per_output", "global"]},
            },
        },
        "merge": {
            "type": "object", "additionalProperties": False,
            "properties": {"mode": {"enum": ["vanilla", "sparsepeft", "qa"]}},
        },
        "search": {
            "type": "object", "additionalProperties": False,
            "properties": {"pop_size": _POS_INT, "generations": _NONNEG_INT,
                           "workers": _POS_INT},
        },
        "eval": {
            "type": "object", "additionalProperties": False,
            "properties": {"batch_size": _POS_INT, "bench": {"type": "boolean"},
                           "bench_repeats": {"type": "integer", "minimum": 5}},
        },
    },
}


def _merge_defaults(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge_defaults(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


class RunConfig:
    def __init__(self, raw=None):
        raw = raw or {}
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigurationError(f"config key {path}: {exc.message}") from exc
        self.data = _merge_defaults(DEFAULTS, raw)
        env = os.environ.get("ELSA_SEED")
        if env is not None:
            try:
                self.data["seed"] = int(env)
            except ValueError:
                raise ConfigurationError(f"ELSA_SEED must be an integer, got {env!r}")
        if self.data["seed"] < 0:
            raise ConfigurationError("seed must be nonnegative")

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigurationError("config root must be an object")
        return cls(raw)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return self.data["seed"]

    def sha256(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def model_dims(self):
        m = self.data["model"]
        return ModelDims.uniform(vocab=m["vocab"], d=m["d"], heads=m["heads"],
                                 mlp=m["mlp"], depth=m["depth"],
                                 max_seq=m["max_seq"])

    def make_task(self):
        t = self.data["task"]
        return make_task(t["kind"], vocab=self.data["model"]["vocab"],
                         seq_len=t["seq_len"], n_train=t["n_train"],
                         n_val=t["n_val"], seed=t["seed"])

    def build_supernet(self, dims):
        sn = self.data["supernet"]
        mode = sn["mode"]
        targets = tuple(sn["targets"])
        alpha = float(sn["alpha"])
        if mode in ("static", "nls"):
            ranks = ((max(sn["rank_choices"]),) if mode == "static"
                     else tuple(sn["rank_choices"]))
            # width choices passed to a rank-only mode must fail loudly
            return SupernetConfig.build(dims, targets=targets, rank_choices=ranks,
                                        alpha=alpha, mode="A",
                                        head_choices=sn["head_choices"],
                                        mlp_width_choices=sn["mlp_width_choices"])
        heads = sn["head_choices"]
        if heads is None:
            heads = sorted({max(1, dims.heads[0] // 2), dims.heads[0]})
        mlp = sn["mlp_width_choices"]
        if mlp is None:
            mlp = sorted({max(1, dims.mlp[0] // 2), dims.mlp[0]})
        return SupernetConfig.build(dims, targets=targets,
                                    rank_choices=tuple(sn["rank_choices"]),
                                    alpha=alpha, mode="B",
                                    head_choices=tuple(heads),
                                    mlp_width_choices=tuple(mlp))
