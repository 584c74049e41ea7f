"""Run configuration: a YAML tree mapped onto nested dataclasses.

Every key is checked against the dataclass fields, so a typo fails loudly
with its dotted path instead of being silently ignored. Missing keys take
the defaults below, which reproduce the reference recipe (228 defect and
800 clean images, 1000 + 1000 patches augmented six-fold, 50 epochs).
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attribution import METHODS
from .cnn import CnnArch, TrainConfig
from .data import TextureConfig
from .errors import ConfigError, InputOutputError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SynthesisConfig:
    n_defect: int = 228
    n_clean: int = 800
    texture: TextureConfig = TextureConfig()

    def validate(self):
        if self.n_defect < 0 or self.n_clean < 0:
            raise ConfigError("synthesis.n_defect and synthesis.n_clean must be >= 0")
        self.texture.validate()


@dataclass(frozen=True)
class DatasetConfig:
    n_defect_patches: int = 1000
    n_clean_patches: int = 1000
    augment: bool = True
    train_fraction: float = 0.8
    tau: int = 32
    group_augmented: bool = True
    patch_size: int = 64

    def validate(self):
        if self.n_defect_patches < 0 or self.n_clean_patches < 0:
            raise ConfigError("dataset patch counts must be >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"dataset.train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.tau < 1:
            raise ConfigError("dataset.tau must be >= 1")
        if self.patch_size < 2:
            raise ConfigError("dataset.patch_size must be >= 2")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dtype: str = "float32"
    scaling: str = "unit-energy"

    def to_train_config(self, seed):
        return TrainConfig(seed=seed, **dataclasses.asdict(self))

    def validate(self):
        self.to_train_config(0).validate()


@dataclass(frozen=True)
class LocalizationConfig:
    stride: int = 4
    batch_size: int = 256
    save_upsampled: bool = False

    def validate(self):
        if self.stride < 1 or self.batch_size < 1:
            raise ConfigError("localization.stride and localization.batch_size must be >= 1")


@dataclass(frozen=True)
class AttributionConfig:
    method: str = "deeplift"
    background_size: int = 500
    num_permutations: int = 1000
    exact_limit: int = 20
    top_k: int = 10
    features: list = None  # restrict exact/sampled to these coefficient indices

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"attribution.method must be one of {METHODS}, got {self.method!r}")
        if self.background_size < 1 or self.num_permutations < 2 or self.top_k < 1:
            raise ConfigError("attribution.background_size, num_permutations and top_k must be positive")


@dataclass(frozen=True)
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "run"
    synthesis: SynthesisConfig = SynthesisConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: CnnArch = CnnArch()
    training: TrainingConfig = TrainingConfig()
    localization: LocalizationConfig = LocalizationConfig()
    attribution: AttributionConfig = AttributionConfig()

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        out = Path(self.output_dir)
        if out.exists() and not out.is_dir():
            raise InputOutputError(f"output_dir {out} exists and is not a directory")
        for section in (self.synthesis, self.dataset, self.model, self.training, self.localization, self.attribution):
            section.validate()
        if self.model.input_length != self.dataset.patch_size**2:
            raise ConfigError(
                f"model.input_length {self.model.input_length} must equal dataset.patch_size**2 = {self.dataset.patch_size**2}"
            )
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def digest(self):
        """SHA-256 of the canonical JSON form; identical configs hash equal."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def train_config(self):
        return self.training.to_train_config(self.seed)


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(f"unknown config key '{where}'")
        default = fields[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config key '{where}' expects a list")
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key '{where}' expects true/false, got {value!r}")
            kwargs[key] = value
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key '{where}' expects a number, got {value!r}")
            if isinstance(default, int) and not float(value).is_integer():
                raise ConfigError(f"config key '{where}' expects an integer, got {value!r}")
            kwargs[key] = type(default)(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key '{where}' expects a string, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = list(value) if isinstance(value, (list, tuple)) else value
    return cls(**kwargs)


def config_from_dict(data):
    return _build(RunConfig, data, "").validate()


def set_path(data, dotted, value):
    """Set ``a.b.c = value`` in a nested dict, creating levels as needed."""
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set '{dotted}': '{k}' is not a section")
        node = nxt
    node[keys[-1]] = value


def read_config_dict(path):
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputOutputError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return data or {}


def load_config(path=None, overrides=()):
    """Read YAML at ``path`` (defaults when None), apply ``(dotted key, value)``
    overrides, then validate the whole tree."""
    data = read_config_dict(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for key, value in overrides:
        set_path(data, key, value)
    return config_from_dict(data)


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
