"""Flat dotted-key run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment.  Values are parsed as JSON when possible (numbers, booleans, lists,
quoted strings) and kept as bare strings otherwise.  A run manifest
(``manifest.json``) is also accepted: its ``config`` block is used.
"""
import copy
import hashlib
import json
from pathlib import Path

DEFAULTS = {
    "seed": 0,
    "fold": 0,
    "k_shot": 1,
    "threads": 1,
    "data.classes": 12,
    "data.samples_per_class": 200,
    "data.image_size": 64,
    "data.seed": 0,
    "model.widths": [8, 16, 32, 32],
    "model.downsample": [2, 2, 1, 1],
    "model.decoder_hidden": 32,
    "train.epochs": 50,
    "train.episodes_per_epoch": 160,
    "train.batch_size": 8,
    "train.lr": 0.05,
    "train.momentum": 0.9,
    "train.grad_clip": 5.0,
    "train.recon_weight": 1.0,
    "ufa.enabled": True,
    "ufa.gamma": 0.1,
    "ufa.target": "query_only",
    "ufa.scale_mode": "variance",
    "ufa.positions": [3],
    "csm.enabled": True,
    "csm.num_vectors": 50,
    "csm.k": "all",
    "csm.temperature": 1.0,
    "csm.loss_mean": True,
    "csm.detach_features": True,
    "csm.recon_loss": True,
    "eval.episodes": 600,
    "eval.batch_size": 32,
    "eval.threshold": 0.5,
    "eval.per_episode_iou": False,
    "eval.kshot_retrain": True,
}

CHOICES = {
    "ufa.target": ("query_only", "both"),
    "ufa.scale_mode": ("variance", "stddev"),
}


class ConfigError(ValueError):
    pass


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("true", "false"):
            return low == "true"
        return text


def _coerce(key, value):
    default = DEFAULTS[key]
    if key == "csm.k":
        if value == "all":
            return "all"
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value or value < 1:
            raise ConfigError(f"csm.k must be a positive integer or 'all', got {value!r}")
        return int(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        return [int(v) for v in value]
    value = str(value)
    if key in CHOICES and value not in CHOICES[key]:
        raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
    return value


class Config:
    """Validated mapping over ``DEFAULTS``; unknown keys are rejected."""

    def __init__(self, values=None):
        self._values = copy.deepcopy(DEFAULTS)
        self.update(values or {})

    def update(self, values):
        unknown = sorted(k for k in values if k not in DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for k, v in values.items():
            self._values[k] = _coerce(k, v)
        return self

    def with_updates(self, values):
        return Config(self._values).update(values)

    def __getitem__(self, key):
        return self._values[key]

    def __contains__(self, key):
        return key in self._values

    def get(self, key, default=None):
        return self._values.get(key, default)

    def as_dict(self):
        return copy.deepcopy(self._values)

    def to_text(self):
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in sorted(self._values.items()))

    def hash(self):
        blob = json.dumps(self._values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __repr__(self):
        return f"Config({self._values!r})"

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = _parse_value(value)
        return cls(values)

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
            return cls(doc.get("config", doc))
        return cls.from_text(text)
