"""Typed run configuration: JSON / key=value loading, CLI overrides and the config echo."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from dotenv import load_dotenv

from graftkit.errors import ConfigError
from graftkit.losses import LOSS_TERMS, LossWeights
from graftkit.model_graph import SplitSpec

logger = logging.getLogger(__name__)

ALLOWED_GAMMA_H = (1e5, 1e6, 1e7)
FRONTEND_INITS = ("mirror", "copy")

# file/flag spelling -> dataclass field
TRAIN_KEY_ALIASES = {"lr": "learning_rate", "crop": "crop_size"}
DECODE_KEY_ALIASES = {"lr": "learning_rate", "decode_lr": "learning_rate"}
LOSS_WEIGHT_KEYS = ("alpha", "beta", "gamma_h", "gamma_r")


def load_environment():
    """Loads a `.env` file if present; existing environment variables win."""
    load_dotenv(override=False)


def env_out_dir(default):
    return os.environ.get("GRAFTKIT_OUT", default)


def env_data_root(default="data"):
    return os.environ.get("GRAFTKIT_DATA_ROOT", default)


def _parse_value(raw):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config_file(path):
    """Reads a JSON object or `key=value` lines into a plain dict.

    The `command` key written by `write_config_echo` is dropped, so an echo loads
    back as a plain config.
    """
    data = _read_config_file(path)
    data.pop("command", None)
    return data


def _read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return data

    data = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        data[key.strip()] = _parse_value(value)
    return data


def merge_overrides(base, overrides):
    """Flag values win over file values; `None` flags are ignored."""
    merged = dict(base)
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _parse_terms(value):
    if isinstance(value, str):
        value = [v for v in value.replace("+", ",").split(",") if v.strip()]
    terms = {str(v).strip().lower() for v in value}
    unknown = [t for t in terms if t not in LOSS_TERMS]
    if unknown:
        raise ConfigError(f"unknown loss terms {unknown}; choose from {list(LOSS_TERMS)}")
    return tuple(t for t in LOSS_TERMS if t in terms)


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 8
    crop_size: int | None = 224
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss_terms: tuple = LOSS_TERMS
    split_front: int = 2
    split_mid: int = 3
    seed: int = 0
    checkpoint_every: int = 10
    num_workers: int = 0
    device: str = "cpu"
    frontend_init: str = "mirror"
    allow_custom_gamma: bool = False
    data_manifest: str | None = None
    pretrained: str | None = None
    out_dir: str = "runs"

    def __post_init__(self):
        self.loss_terms = _parse_terms(self.loss_terms)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"lr must be > 0, got {self.learning_rate}")
        if self.crop_size is not None and self.crop_size < 1:
            raise ConfigError(f"crop must be >= 1 or null, got {self.crop_size}")
        if not self.loss_terms:
            raise ConfigError("at least one loss term must be enabled")
        if self.checkpoint_every < 1:
            raise ConfigError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        if self.frontend_init not in FRONTEND_INITS:
            raise ConfigError(f"frontend_init must be one of {FRONTEND_INITS}, got {self.frontend_init!r}")
        if self.split_front < 1 or self.split_mid < self.split_front:
            raise ConfigError(f"invalid split ({self.split_front}, {self.split_mid})")
        if not self.allow_custom_gamma and self.loss_weights.gamma_h not in ALLOWED_GAMMA_H:
            raise ConfigError(
                f"gamma_h={self.loss_weights.gamma_h} not in {ALLOWED_GAMMA_H}; set allow_custom_gamma to override"
            )

    @property
    def split(self):
        return SplitSpec(self.split_front, self.split_mid)

    @classmethod
    def from_mapping(cls, data):
        data = {TRAIN_KEY_ALIASES.get(k, k): v for k, v in data.items()}
        known = {f.name for f in fields(cls)} | set(LOSS_WEIGHT_KEYS)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        weights = {k: float(data.pop(k)) for k in LOSS_WEIGHT_KEYS if k in data}
        if "loss_weights" in data and isinstance(data["loss_weights"], dict):
            weights = {**data.pop("loss_weights"), **weights}
        try:
            return cls(loss_weights=LossWeights(**weights), **data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def with_updates(self, **changes):
        data = self.to_dict()
        data.update(changes)
        return TrainConfig.from_mapping(data)

    @classmethod
    def accepted_keys(cls):
        return {f.name for f in fields(cls)} | set(TRAIN_KEY_ALIASES) | set(LOSS_WEIGHT_KEYS)

    def to_dict(self):
        """Flat, file-spelled dict; feeding it back to `from_mapping` reproduces the config."""
        data = asdict(self)
        data.update(data.pop("loss_weights"))
        data["lr"] = data.pop("learning_rate")
        data["crop"] = data.pop("crop_size")
        data["loss_terms"] = list(self.loss_terms)
        return data


@dataclass
class DecodeConfig:
    iterations: int = 1000
    learning_rate: float = 1e-2
    tv_weight: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.tv_weight < 0:
            raise ConfigError(f"tv_weight must be >= 0, got {self.tv_weight}")
        if self.learning_rate <= 0:
            raise ConfigError(f"decode lr must be > 0, got {self.learning_rate}")

    @classmethod
    def accepted_keys(cls):
        return {f.name for f in fields(cls)} | set(DECODE_KEY_ALIASES)

    @classmethod
    def from_mapping(cls, data):
        data = {DECODE_KEY_ALIASES.get(k, k): v for k, v in data.items()}
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown decode config keys: {unknown}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def write_config_echo(config, out_dir, command):
    """Writes `<out_dir>/config.json`; the echo alone is enough to rerun the command."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **(config.to_dict() if hasattr(config, "to_dict") else dict(config))}
    path = out_dir / "config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
    logger.info(f"Config echo written to {path}")
    return path
