"""
Run Configuration
Layered settings for every command: dataclass defaults, a named preset, a
density profile, a JSON file, --set overrides and finally dedicated flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from geometry import KernelPolicy
from padnet_model import ModelSpec
from training import LAMBDA_BY_PROFILE, TrainConfig

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved.json"

PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "desk": {},
    "full": {
        "model": {"channel_scale": 1.0, "fen": "vgg", "input_channels": 3},
        "train": {"lr": 1e-5},
        "data": {"resize_to": 720},
    },
}

# lambda and Q per dataset density
DENSITY_PROFILES: Dict[str, Dict[str, Dict[str, Any]]] = {
    "dense": {"train": {"lam": LAMBDA_BY_PROFILE["dense"]}, "data": {"Q": 5}},
    "medium": {"train": {"lam": LAMBDA_BY_PROFILE["medium"]}, "data": {"Q": 5}},
    "sparse": {"train": {"lam": LAMBDA_BY_PROFILE["sparse"]}, "data": {"Q": 2}},
}


class ConfigError(ValueError):
    """Unknown keys, unparsable overrides or invalid values in a run configuration."""


def env_threads() -> int:
    raw = os.getenv("PANDENSE_THREADS")
    if not raw:
        return os.cpu_count() or 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"PANDENSE_THREADS must be an integer, got {raw!r}")
    return max(threads, 1)


def env_progress() -> bool:
    return os.getenv("PANDENSE_PROGRESS", "1").strip().lower() not in ("0", "false", "no", "off")


def env_log_level() -> str:
    return os.getenv("PANDENSE_LOG_LEVEL", "INFO").upper()


@dataclass
class DataConfig:
    data_dir: str = "data"
    resize_to: int = 128
    Q: int = 5
    n_values: List[int] = field(default_factory=lambda: [1, 4, 9, 16])
    density_profile: Optional[str] = None
    n_random: int = 5
    budget_factor: int = 50
    image_size: int = 128

    def validate(self) -> "DataConfig":
        if self.resize_to < 2 or self.resize_to % 2:
            raise ConfigError(f"data.resize_to must be even and >= 2, got {self.resize_to}")
        if self.Q < 1:
            raise ConfigError(f"data.Q must be >= 1, got {self.Q}")
        if not self.n_values:
            raise ConfigError("data.n_values must list at least one grid size")
        if self.density_profile is not None and self.density_profile not in DENSITY_PROFILES:
            raise ConfigError(
                f"data.density_profile must be one of {sorted(DENSITY_PROFILES)}, got {self.density_profile!r}"
            )
        if self.n_random < 0 or self.budget_factor < 1 or self.image_size < 16:
            raise ConfigError(
                f"invalid data settings: n_random={self.n_random}, budget_factor={self.budget_factor}, "
                f"image_size={self.image_size}"
            )
        return self


SECTIONS = {"model": ModelSpec, "train": TrainConfig, "kernel": KernelPolicy, "data": DataConfig}
TOP_LEVEL = ("seed", "threads")


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    kernel: KernelPolicy = field(default_factory=KernelPolicy)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    threads: int = field(default_factory=env_threads)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        check_keys(data)
        try:
            sections = {name: SECTIONS[name](**data.get(name, {})) for name in SECTIONS}
            config = cls(**sections, **{key: data[key] for key in TOP_LEVEL if key in data})
            config.model.validate()
            config.train.validate()
            config.data.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        return config

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, RESOLVED_NAME)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path


def check_keys(data: Dict[str, Any], origin: str = "configuration") -> None:
    for key, value in data.items():
        if key in TOP_LEVEL:
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown section {key!r} in {origin}; expected one of {sorted(SECTIONS) + list(TOP_LEVEL)}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} in {origin} must be an object, got {type(value).__name__}")
        known = {f.name for f in fields(SECTIONS[key])}
        unknown = sorted(set(value) - known)
        if unknown:
            raise ConfigError(f"unknown keys {unknown} in section {key!r} of {origin}")


def merge(base: Dict[str, Any], layer: Dict[str, Any]) -> Dict[str, Any]:
    merged = {key: dict(value) if isinstance(value, dict) else value for key, value in base.items()}
    for key, value in layer.items():
        if isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Tuple[str, Optional[str], Any]:
    """Split 'section.key=value' (or 'seed=3'); values parse as JSON, falling back to the raw string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = path.strip().split(".")
    if len(parts) == 1 and parts[0] in TOP_LEVEL:
        return parts[0], None, value
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {path!r} must be section.key or one of {list(TOP_LEVEL)}")
    return parts[0], parts[1], value


def overrides_layer(overrides: Sequence[str]) -> Dict[str, Any]:
    layer: Dict[str, Any] = {}
    for text in overrides:
        section, key, value = parse_override(text)
        if key is None:
            layer[section] = value
        else:
            layer.setdefault(section, {})[key] = value
    check_keys(layer, "--set overrides")
    return layer


def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON (line {e.lineno}, column {e.colno}): {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    check_keys(data, path)
    return data


def resolve_config(preset: str = "desk", config_path: Optional[str] = None,
                   overrides: Sequence[str] = (), flags: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Merge all configuration layers into one validated RunConfig.

    Precedence, lowest first: defaults, preset, density profile, config file,
    --set overrides, dedicated flags. The run seed also seeds training.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    layers: List[Dict[str, Any]] = [PRESETS[preset]]
    if config_path:
        layers.append(load_config_file(config_path))
    layers.append(overrides_layer(overrides))
    flag_layer = flags or {}
    check_keys(flag_layer, "command-line flags")
    layers.append(flag_layer)

    merged: Dict[str, Any] = RunConfig().to_dict()
    user: Dict[str, Any] = {}
    for layer in layers:
        user = merge(user, layer)
    profile = user.get("data", {}).get("density_profile")
    if profile is not None:
        if profile not in DENSITY_PROFILES:
            raise ConfigError(f"data.density_profile must be one of {sorted(DENSITY_PROFILES)}, got {profile!r}")
        layers.insert(1, DENSITY_PROFILES[profile])
    for layer in layers:
        merged = merge(merged, layer)
    merged["train"]["seed"] = merged["seed"]
    merged["train"]["progress"] = merged["train"].get("progress", True) and env_progress()

    config = RunConfig.from_dict(merged)
    logger.debug(f"Resolved configuration: {json.dumps(config.to_dict(), sort_keys=True)}")
    return config
