"""Run configuration: flat sectioned key=value files, presets, run naming.

Every key lives in one of four sections (data, model, train, eval) plus an
output section.  The run directory name is the first 10 hex digits of the
SHA-256 of the canonical serialization (seed and output dir excluded) plus
the seed, so reruns of one configuration land in one place per seed.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .model import VARIANTS, ModelSpec

# Section -> key -> (default, type).  Types: int, float, bool, str, int list.
SCHEMA = {
    "data": {
        "manifest": ("", str),
        "root": ("", str),
        "input_h": (64, int),
        "input_w": (32, int),
        "pad": (4, int),
        "flip_prob": (0.5, float),
        "mean": (0.5, float),
        "std": (0.5, float),
    },
    "model": {
        "variant": ("good_practices", str),
        "channels": ((16, 32, 64, 128), "intlist"),
        "bottleneck_dim": (16, int),
        "dropout_p": (0.5, float),
    },
    "train": {
        "optimizer": ("adam", str),
        "lr": (0.00035, float),
        "weight_decay": (0.0005, float),
        "epochs": (60, int),
        "batch_size": (16, int),
        "lr_decay_factor": (0.1, float),
        "lr_decay_every": (20, int),
        "seed": (0, int),
    },
    "eval": {
        "ranks": ((1, 5, 10, 20), "intlist"),
        "cross_camera_filtering": (True, bool),
        "flip_fusion": (False, bool),
    },
    "out": {
        "dir": ("runs", str),
    },
}

# The paper-scale preset keeps the published recipe: 256x128 inputs padded
# by 10, batches of 32 for 60 epochs, bottleneck width 512, flip fusion at
# test time.  The desk preset (the defaults above) shrinks geometry, batch,
# and widths to CPU scale while preserving the structure and schedule.
PRESETS = {
    "desk": {},
    "paper": {
        "data.input_h": "256",
        "data.input_w": "128",
        "data.pad": "10",
        "model.bottleneck_dim": "512",
        "train.epochs": "60",
        "train.batch_size": "32",
        "eval.flip_fusion": "true",
    },
}


class ConfigError(ValueError):
    pass


def _parse_value(raw, kind, where):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "intlist":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {where}: {raw!r}") from None


def _format_value(value, kind):
    if kind is bool:
        return "true" if value else "false"
    if kind == "intlist":
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {}
        for section, keys in SCHEMA.items():
            got = self.values.get(section, {})
            unknown = set(got) - set(keys)
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            full[section] = {k: got.get(k, default) for k, (default, _) in keys.items()}
        self.values = full

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, raw_value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        kind = SCHEMA[section][key][1]
        self.values[section][key] = _parse_value(str(raw_value), kind, f"{section}.{key}")

    def to_text(self):
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key, (_, kind) in keys.items():
                out.write(f"{key} = {_format_value(self.values[section][key], kind)}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_text())

    def config_hash(self):
        """Hash of the canonical text minus seed and output location."""
        lines = []
        for section, keys in SCHEMA.items():
            for key, (_, kind) in keys.items():
                if (section, key) in (("train", "seed"), ("out", "dir")):
                    continue
                lines.append(f"{section}.{key}={_format_value(self.values[section][key], kind)}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()

    def run_dir_name(self):
        return f"{self.config_hash()[:10]}-s{self.get('train', 'seed')}"

    def run_dir(self):
        return Path(self.get("out", "dir")) / self.run_dir_name()

    def model_spec(self, num_classes):
        return ModelSpec(
            variant=self.get("model", "variant"),
            num_classes=num_classes,
            channels=self.get("model", "channels"),
            input_hw=(self.get("data", "input_h"), self.get("data", "input_w")),
            bottleneck_dim=self.get("model", "bottleneck_dim"),
            dropout_p=self.get("model", "dropout_p"),
        )

    def data_root(self):
        root = self.get("data", "root")
        if root:
            return Path(root)
        return Path(self.get("data", "manifest")).parent

    def validate(self):
        if self.get("model", "variant") not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}")
        if self.get("train", "optimizer") not in ("adam", "sgd"):
            raise ConfigError("train.optimizer must be adam or sgd")
        if self.get("train", "epochs") < 0:
            raise ConfigError("train.epochs must be >= 0")
        if self.get("train", "batch_size") < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if not 0.0 < self.get("train", "lr_decay_factor") <= 1.0:
            raise ConfigError("train.lr_decay_factor must be in (0, 1]")
        if self.get("train", "lr_decay_every") < 1:
            raise ConfigError("train.lr_decay_every must be >= 1")
        if self.get("data", "pad") < 0:
            raise ConfigError("data.pad must be >= 0")
        if not 0.0 <= self.get("data", "flip_prob") <= 1.0:
            raise ConfigError("data.flip_prob must be in [0, 1]")
        if self.get("data", "std") == 0.0:
            raise ConfigError("data.std must be nonzero")
        if not self.get("eval", "ranks"):
            raise ConfigError("eval.ranks must be nonempty")
        if any(k < 1 for k in self.get("eval", "ranks")):
            raise ConfigError("eval.ranks must be >= 1")
        manifest = self.get("data", "manifest")
        if not manifest:
            raise ConfigError("data.manifest is required")
        if not Path(manifest).is_file():
            raise ConfigError(f"data.manifest not found: {manifest}")
        return self


def load_config(path=None, preset=None, overrides=()):
    """Build a RunConfig from an optional file, preset, and override list.

    Precedence, lowest to highest: schema defaults, preset, file, overrides
    of the form ``section.key=value``.
    """
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        for dotted, raw in PRESETS[preset].items():
            section, key = dotted.split(".", 1)
            cfg.set(section, key, raw)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        cfg.set(section.strip(), key.strip(), raw)
    return cfg
