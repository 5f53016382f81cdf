"""Experiment configuration: one JSON file drives every command.

Sections mirror the model's parts (learned/general backbones, fusion,
decoder, data, train, metrics).  Unknown keys are rejected.  The *model
signature hash* covers exactly the fields that determine a checkpoint's
compatibility (architecture + preprocessing, not seeds or paths); it is
embedded in every output artifact together with the seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .backbones import GeneralBackboneConfig, LearnedBackboneConfig
from .data import SceneSpec
from .decoder import LossWeights
from .metrics import MetricConfig
from .model import VARIANTS, DecoderConfig, FusionSettings
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class DataSection:
    image_side: int = 128
    train_dir: str = ""
    val_dir: str = ""
    scene: SceneSpec = field(default_factory=SceneSpec)
    normalization_mean: tuple = (0.5, 0.5, 0.5)
    normalization_std: tuple = (0.25, 0.25, 0.25)
    rng: str = "philox"

    def __post_init__(self):
        if self.image_side % 32:
            raise ConfigError("data.image_side must be divisible by 32")
        if self.rng != "philox":
            raise ConfigError("only the pinned 'philox' rng is supported")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    variant: str = "full"
    out_dir: str = "runs/default"
    learned: LearnedBackboneConfig = field(default_factory=LearnedBackboneConfig)
    general: GeneralBackboneConfig = field(default_factory=GeneralBackboneConfig)
    fusion: FusionSettings = field(default_factory=FusionSettings)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")

    # -- hashing -----------------------------------------------------------
    def signature(self) -> dict:
        """The checkpoint-compatibility signature (architecture + preprocessing)."""
        return {
            "variant": self.variant,
            "learned": asdict(self.learned),
            "general": asdict(self.general),
            "fusion": asdict(self.fusion),
            "decoder": asdict(self.decoder),
            "image_side": self.data.image_side,
            "normalization_mean": list(self.data.normalization_mean),
            "normalization_std": list(self.data.normalization_std),
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.signature(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTION_TYPES = {
    "learned": LearnedBackboneConfig,
    "general": GeneralBackboneConfig,
    "fusion": FusionSettings,
    "decoder": DecoderConfig,
    "data": DataSection,
    "train": TrainConfig,
    "metrics": MetricConfig,
}

_NESTED_TYPES = {
    "scene": SceneSpec,
    "loss_weights": LossWeights,
}

_TUPLE_FIELDS = {"stage_channels", "tap_indices", "n_panels", "transparency",
                 "normalization_mean", "normalization_std"}


def _build_dataclass(cls, payload, path):
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _NESTED_TYPES and isinstance(value, dict):
            value = _build_dataclass(_NESTED_TYPES[key], value, f"{path}.{key}")
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _build_dataclass(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict = None) -> ExperimentConfig:
    """Load a config file (defaults when ``path`` is None) and apply overrides.

    Precedence: command-line flags > config file > built-in defaults.
    """
    payload = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = config_from_dict(payload)
    if overrides:
        clean = {k: v for k, v in overrides.items() if v is not None}
        if clean:
            seed = clean.pop("seed", None)
            if seed is not None:
                cfg = replace(cfg, seed=seed,
                              train=replace(cfg.train, seed=seed))
            cfg = replace(cfg, **clean)
    # keep the train seed in lockstep with the experiment seed unless the
    # config explicitly declared a different one
    if cfg.train.seed != cfg.seed and cfg.train.seed == TrainConfig.seed:
        cfg = replace(cfg, train=replace(cfg.train, seed=cfg.seed))
    return cfg


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)


def build_model_from_config(cfg: ExperimentConfig):
    from .train import build_variant
    return build_variant(cfg.variant, seed=cfg.seed, learned_cfg=cfg.learned,
                         general_cfg=cfg.general, decoder_cfg=cfg.decoder,
                         fusion_cfg=cfg.fusion)
