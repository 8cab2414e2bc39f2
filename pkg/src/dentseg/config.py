"""Experiment configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Recognised keys and defaults::

    dataset_root       (required) dataset directory
    architecture       (required) baseline | vgg19_backbone
    weights_path       converted VGG19 archive; required for vgg19_backbone, forbidden for baseline
    output_dir         (required) run directory, created if absent
    seed = 42          drives split, initialization, shuffling and dropout
    ratios = 0.7, 0.1, 0.2
    epochs = 200
    batch_size = 4
    learning_rate = 0.0001
    adam_beta1 = 0.9
    adam_beta2 = 0.999
    adam_eps = 1e-08
    loss = bce
    checkpoint_policy = best_val_dice
    keep_partial_batch = true
    dropout_rate = 0.3
    bn_momentum = 0.99
    bn_eps = 1e-05
    threshold = 0.5
    aggregation = micro
    image_size = 256
    workers = 1        threads used for image decoding
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .metrics import AGGREGATIONS
from .models import ARCHITECTURES, ModelConfig
from .train import TrainConfig

REQUIRED = ("dataset_root", "architecture", "output_dir")


@dataclass
class ExperimentConfig:
    dataset_root: str = ""
    architecture: str = ""
    output_dir: str = ""
    weights_path: str | None = None
    seed: int = 42
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    loss: str = "bce"
    checkpoint_policy: str = "best_val_dice"
    keep_partial_batch: bool = True
    dropout_rate: float = 0.3
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    threshold: float = 0.5
    aggregation: str = "micro"
    image_size: int = 256
    workers: int = 1
    source_text: str = field(default="", repr=False, compare=False)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2, adam_eps=self.adam_eps, seed=self.seed,
            loss=self.loss, checkpoint_policy=self.checkpoint_policy, keep_partial_batch=self.keep_partial_batch,
            threshold=self.threshold,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(seed=self.seed, bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
                           dropout_rate=self.dropout_rate)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "source_text"}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "source_text"}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return _parse_bool(raw)
    if key == "ratios":
        parts = tuple(float(p) for p in raw.split(","))
        if len(parts) != 3:
            raise ValueError("expected three comma-separated fractions")
        return parts
    return raw


def _validate(cfg: ExperimentConfig) -> list[str]:
    problems = []
    for key in REQUIRED:
        if not getattr(cfg, key):
            problems.append(f"{key}: required")
    if cfg.architecture and cfg.architecture not in ARCHITECTURES:
        problems.append(f"architecture: must be one of {', '.join(ARCHITECTURES)}")
    if cfg.architecture == "vgg19_backbone" and not cfg.weights_path:
        problems.append("weights_path: required for vgg19_backbone")
    if cfg.architecture == "baseline" and cfg.weights_path:
        problems.append("weights_path: not allowed for baseline")
    if any(r < 0 for r in cfg.ratios) or not math.isclose(sum(cfg.ratios), 1.0, rel_tol=0, abs_tol=1e-9):
        problems.append("ratios: must be three non-negative fractions summing to 1")
    if not 0 <= cfg.dropout_rate < 1:
        problems.append("dropout_rate: must be in [0, 1)")
    if not 0 <= cfg.bn_momentum < 1:
        problems.append("bn_momentum: must be in [0, 1)")
    if not cfg.bn_eps > 0:
        problems.append("bn_eps: must be > 0")
    if cfg.aggregation not in AGGREGATIONS:
        problems.append(f"aggregation: must be one of {', '.join(AGGREGATIONS)}")
    divisor = 16 if cfg.architecture == "vgg19_backbone" else 4
    if cfg.image_size < divisor or cfg.image_size % divisor:
        problems.append(f"image_size: must be a positive multiple of {divisor}")
    if cfg.workers < 1:
        problems.append("workers: must be >= 1")
    try:
        cfg.train_config()
    except ValueError as exc:
        problems += str(exc).split("; ")
    return problems


def parse_config(text: str) -> ExperimentConfig:
    values, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = (part.strip() for part in line.partition("="))
        if not sep:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        if key not in _FIELD_TYPES:
            problems.append(f"{key}: unknown key (line {lineno})")
            continue
        if key in values:
            problems.append(f"{key}: given twice (line {lineno})")
            continue
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    cfg = ExperimentConfig(**values, source_text=text)
    problems += _validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    cfg = parse_config(text)
    # relative paths resolve against the config file's directory
    for key in ("dataset_root", "output_dir", "weights_path"):
        value = getattr(cfg, key)
        if value and not Path(value).is_absolute():
            setattr(cfg, key, str((path.parent / value).resolve()))
    return cfg
