"""Declarative pipeline configuration.

Defaults encode the reference training setup for each dataset, so
``--dataset pubmed20k`` reproduces it with no further flags. A config file
(YAML or JSON, sectioned per module) and dotted-path overrides layer on
top of the dataset preset.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .corpus import NICTA_LABELS, PUBMED_LABELS, LabelSet

BRANCHES = ("word", "char", "stat", "pretrained")


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or incompatible settings."""


@dataclass
class FeatureConfig:
    word_dim: int = 300
    char_dim: int = 50
    pretrained_dim: int = 768
    max_words: int = 50
    max_chars: int = 300
    stat_caps: tuple[int, int, int] = (35, 35, 100)
    min_freq: int = 1
    char_init_range: float = 0.05
    oov_init_range: float = 0.05


@dataclass
class SenModelConfig:
    hidden: int = 128
    dropout: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 64
    branches: tuple[str, ...] = BRANCHES
    lr_factor: float = 0.1
    lr_patience: int = 3


@dataclass
class AbsModelConfig:
    kernel: tuple[int, int] = (8, 3)
    filters: int = 16
    rnn_hidden: int = 40
    rnn_cell: str = "lstm"  # 'lstm' or 'gru'
    learning_rate: float = 0.003
    epochs: int = 60
    batch_size: int = 32
    max_sentences: int = 64
    lr_factor: float = 0.1
    lr_patience: int = 3


@dataclass
class SegModelConfig:
    segment_size: int = 3
    hidden_widths: tuple[int, ...] = (512, 256, 128, 64)
    dropout: float = 0.5
    l2: float = 0.0001
    learning_rate: float = 0.001
    epochs: int = 60
    batch_size: int = 64
    aggregation: str = "mean"  # 'mean' or 'max' over covering segments
    lr_factor: float = 0.1
    lr_patience: int = 3


@dataclass
class FusionConfig:
    lambda_abs: float = 1.0
    lambda_seg: float = 0.2

    def __post_init__(self):
        if self.lambda_abs == 0 and self.lambda_seg == 0:
            raise ConfigError("at least one fusion coefficient must be nonzero")


@dataclass
class PipelineConfig:
    dataset: str = "pubmed20k"
    seed: int = 17
    work_dir: str = "work"
    data_dir: str | None = None
    word_vectors: str | None = None
    encoder: str = "hash"
    features: FeatureConfig = field(default_factory=FeatureConfig)
    sen: SenModelConfig = field(default_factory=SenModelConfig)
    abs: AbsModelConfig = field(default_factory=AbsModelConfig)
    seg: SegModelConfig = field(default_factory=SegModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    @property
    def labels(self) -> LabelSet:
        return NICTA_LABELS if self.dataset == "nicta" else PUBMED_LABELS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def identity_hash(self) -> str:
        """Hash of the fields that define data/feature identity.

        Stages producing and consuming artifacts must agree on these;
        training hyperparameters are deliberately excluded (artifacts
        chain through checkpoints, which carry their own config).
        """
        identity = {
            "dataset": self.dataset,
            "seed": self.seed,
            "labels": list(self.labels.names),
            "encoder": self.encoder,
            "features": dataclasses.asdict(self.features),
        }
        blob = json.dumps(identity, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


# per-dataset abstract-model decoder settings; the label set itself comes
# from PipelineConfig.labels
DATASET_PRESETS = {
    "pubmed20k": {"abs.rnn_cell": "lstm", "abs.rnn_hidden": 40},
    "pubmed200k": {"abs.rnn_cell": "lstm", "abs.rnn_hidden": 40},
    "nicta": {"abs.rnn_cell": "gru", "abs.rnn_hidden": 36},
}

_TUPLE_FIELDS = {
    ("features", "stat_caps"),
    ("sen", "branches"),
    ("abs", "kernel"),
    ("seg", "hidden_widths"),
}


def _coerce(section: str | None, key: str, value):
    if (section, key) in _TUPLE_FIELDS and isinstance(value, list):
        return tuple(value)
    return value


def _apply_section(obj, section: str | None, data: dict):
    valid = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in valid:
            where = f"section {section!r}" if section else "top level"
            raise ConfigError(f"unknown config key {key!r} in {where}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            _apply_section(current, key, value)
        else:
            setattr(obj, key, _coerce(section, key, value))


def apply_overrides(config: PipelineConfig, overrides: dict) -> PipelineConfig:
    """Apply a flat {'sen.epochs': 2} or nested {'sen': {'epochs': 2}} dict."""
    nested: dict = {}
    for key, value in overrides.items():
        parts = key.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        if isinstance(value, dict):
            node.setdefault(parts[-1], {}).update(value)
        else:
            node[parts[-1]] = value
    _apply_section(config, None, nested)
    _validate(config)
    return config


def _validate(config: PipelineConfig):
    if config.dataset not in DATASET_PRESETS:
        raise ConfigError(
            f"unknown dataset {config.dataset!r}; expected one of {sorted(DATASET_PRESETS)}"
        )
    bad = [b for b in config.sen.branches if b not in BRANCHES]
    if bad:
        raise ConfigError(f"unknown sentence-model branches {bad}; valid: {BRANCHES}")
    if not config.sen.branches:
        raise ConfigError("at least one sentence-model branch must be enabled")
    if config.abs.rnn_cell not in ("lstm", "gru"):
        raise ConfigError(f"abs.rnn_cell must be 'lstm' or 'gru', got {config.abs.rnn_cell!r}")
    if config.seg.aggregation not in ("mean", "max"):
        raise ConfigError(f"seg.aggregation must be 'mean' or 'max', got {config.seg.aggregation!r}")
    if config.seg.segment_size < 1:
        raise ConfigError("seg.segment_size must be >= 1")
    FusionConfig(config.fusion.lambda_abs, config.fusion.lambda_seg)


def load_config_file(path) -> dict:
    import yaml

    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must contain a mapping")
    return data


def build_config(
    dataset: str = "pubmed20k",
    work_dir: str = "work",
    config_file: str | None = None,
    overrides: dict | None = None,
    **fields,
) -> PipelineConfig:
    """Assemble a config: dataset preset < config file < explicit overrides."""
    if dataset not in DATASET_PRESETS:
        raise ConfigError(
            f"unknown dataset {dataset!r}; expected one of {sorted(DATASET_PRESETS)}"
        )
    config = PipelineConfig(dataset=dataset, work_dir=work_dir)
    apply_overrides(config, DATASET_PRESETS[dataset])
    if config_file:
        apply_overrides(config, load_config_file(config_file))
    if overrides:
        apply_overrides(config, overrides)
    for key, value in fields.items():
        if value is not None:
            apply_overrides(config, {key: value})
    return config
