"""Run configuration: JSON schema, strict parsing, overrides, and hashing.

This module must stay importable without numpy so the CLI can pin BLAS thread
environment variables before any numeric import happens.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Bad configuration file, key, type, or value."""


@dataclass
class DataSection:
    n_train: int = 400
    n_val: int = 64
    image_size: int = 64
    n_unseen: int = 4
    thing_stuff_ratio: float = 3.0


@dataclass
class VLMSection:
    # Background stuff names appear in almost every caption, so their
    # embeddings separate late; much shorter schedules leave them degenerate
    # and region classification collapses onto thing classes.
    steps: int = 16000
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


@dataclass
class PromptSection:
    m: int = 2
    samples_per_class: int = 32
    steps: int = 500
    # Mean pooling gives every prompt row the same gradient, so the prompt
    # acts as one shared vector; larger rates inflate it past the pooled name
    # embedding, erasing class identity on unseen names.
    lr: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 42


@dataclass
class QuerySection:
    n_queries: int = 16
    steps: int = 3000
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


@dataclass
class FCNSection:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 42


@dataclass
class CropSection:
    threshold: float = 0.5
    expand: float = 1.2
    fill: str = "mean"
    size: int = 16


@dataclass
class FelzSection:
    k: float = 1.0
    min_size: int = 10


@dataclass
class SlidingWindowSection:
    window: int = 32
    stride: int = 16


@dataclass
class SelfTrainSection:
    confidence: float = 0.9
    rounds: int = 1


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    vlm: VLMSection = field(default_factory=VLMSection)
    prompts: PromptSection = field(default_factory=PromptSection)
    query: QuerySection = field(default_factory=QuerySection)
    fcn: FCNSection = field(default_factory=FCNSection)
    crop: CropSection = field(default_factory=CropSection)
    felz: FelzSection = field(default_factory=FelzSection)
    sw: SlidingWindowSection = field(default_factory=SlidingWindowSection)
    self_train: SelfTrainSection = field(default_factory=SelfTrainSection)
    seed: int = 42
    ensemble_lambda: float = 0.5
    threads: int = 1
    output_dir: str = "runs"


_SECTION_TYPES = {
    "data": DataSection,
    "vlm": VLMSection,
    "prompts": PromptSection,
    "query": QuerySection,
    "fcn": FCNSection,
    "crop": CropSection,
    "felz": FelzSection,
    "sw": SlidingWindowSection,
    "self_train": SelfTrainSection,
}


def _coerce(value, target_type: type, path: str):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {target_type}")


def _apply_section(section, values: dict, path: str) -> None:
    known = {f.name: f for f in dataclasses.fields(type(section))}
    for key, value in values.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown key {where!r}")
        setattr(section, key, _coerce(value, type(getattr(section, key)), where))


def _apply_dict(config: RunConfig, doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    for key, value in doc.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object of settings, got {value!r}")
            _apply_section(getattr(config, key), value, key)
        elif key in ("seed", "ensemble_lambda", "threads", "output_dir"):
            setattr(config, key, _coerce(value, type(getattr(config, key)), key))
        else:
            raise ConfigError(f"unknown key {key!r}")


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_override(config: RunConfig, text: str) -> None:
    """Apply one dotted-path override like `data.n_train=100`."""
    key, value = _parse_override(text)
    parts = key.split(".")
    if len(parts) == 1:
        _apply_dict(config, {parts[0]: value})
    elif len(parts) == 2:
        _apply_dict(config, {parts[0]: {parts[1]: value}})
    else:
        raise ConfigError(f"unknown key {key!r}")


def validate(config: RunConfig) -> None:
    if config.data.n_train <= 0 or config.data.n_val <= 0:
        raise ConfigError("data.n_train and data.n_val must be positive")
    if not 0.0 <= config.ensemble_lambda <= 1.0:
        raise ConfigError(f"ensemble_lambda must be in [0, 1], got {config.ensemble_lambda}")
    if config.crop.fill not in ("preserve", "zero", "mean"):
        raise ConfigError(f"crop.fill must be preserve, zero or mean, got {config.crop.fill!r}")
    if not 0.0 < config.crop.threshold < 1.0:
        raise ConfigError(f"crop.threshold must be in (0, 1), got {config.crop.threshold}")
    if config.crop.expand < 1.0:
        raise ConfigError(f"crop.expand must be >= 1, got {config.crop.expand}")
    if config.sw.stride <= 0 or config.sw.window <= 0:
        raise ConfigError("sw.window and sw.stride must be positive")
    if config.sw.window > config.data.image_size:
        raise ConfigError("sw.window cannot exceed data.image_size")
    if config.self_train.rounds < 0:
        raise ConfigError("self_train.rounds must be >= 0")
    if config.threads < 1:
        raise ConfigError("threads must be >= 1")
    for name in ("vlm", "prompts", "query", "fcn"):
        section = getattr(config, name)
        if section.steps < 0 or section.batch_size < 1 or section.lr <= 0:
            raise ConfigError(f"{name}: steps >= 0, batch_size >= 1, lr > 0 required")


def parse_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    """Defaults <- file <- overrides, strictly validated."""
    config = RunConfig()
    if path is not None:
        file = Path(path)
        if not file.exists():
            raise ConfigError(f"config file not found: {file}")
        try:
            doc = json.loads(file.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file}: not valid JSON ({exc})") from exc
        _apply_dict(config, doc)
    for text in overrides:
        apply_override(config, text)
    validate(config)
    return config


def to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def config_hash(config: RunConfig) -> str:
    """Identity of a run; output location and thread count don't change results."""
    doc = to_dict(config)
    doc.pop("output_dir")
    doc.pop("threads")
    digest = hashlib.sha256(canonical_json(doc).encode()).hexdigest()
    return digest[:12]
