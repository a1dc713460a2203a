"""Experiment configuration: schema, file loading and ``key=value`` overrides."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .classifier import ClassifierConfig
from .errors import ConfigError
from .strategies import TrainerConfig
from .vae import LossWeights, Warmup


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSettings(_Strict):
    num_classes: int = Field(20, ge=2)
    unseen_count: int = Field(6, ge=0)
    per_class: int = Field(50, ge=1)
    d_x: int = Field(32, ge=1)
    d_a: int = Field(12, ge=1)
    noise_sigma: float = Field(0.5, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _unseen_bound(self):
        if self.unseen_count >= self.num_classes:
            raise ValueError("unseen_count must be < num_classes")
        return self


class WarmupSettings(_Strict):
    start: int = Field(0, ge=0)
    end: int = Field(0, ge=0)


class WeightsSettings(_Strict):
    beta: float = Field(0.01, ge=0)  # KL sums over d_z while reconstruction is a mean
    gamma: float = Field(1.0, ge=0)
    delta: float = Field(1.0, ge=0)
    alpha: float = Field(1.0, ge=0)
    warmup: dict[Literal["beta", "gamma", "delta", "alpha"], WarmupSettings] = {}


class ModelSettings(_Strict):
    latent_dim: int = Field(32, ge=1)
    hidden: list[int] = [64]


class TrainerSettings(_Strict):
    mode: Literal["offline", "sequential", "task_agnostic", "task_free_1", "task_free_2"] = "task_free_2"
    epochs: int = Field(60, ge=1)
    batch_size: int = Field(32, ge=1)
    replay_batch_size: Optional[int] = Field(None, ge=1)
    lr: float = Field(1e-3, gt=0)
    weights: WeightsSettings = WeightsSettings()
    memory_per_class: float = Field(10, gt=0)
    memory_capacity: Optional[int] = Field(None, ge=1)
    mb_capacity: int = Field(32, ge=1)
    mst_capacity: int = Field(256, ge=1)
    kd_enabled: bool = True
    kd_symmetric: bool = False
    ca_use_mean: bool = False
    final_flush: bool = False
    dark_capture: Literal["after_training", "insertion"] = "after_training"


class ClassifierSettings(_Strict):
    seen_draws: int = Field(2, ge=0)
    unseen_draws: int = Field(400, ge=0)
    epochs: int = Field(200, ge=1)
    lr: float = Field(0.01, gt=0)
    batch_size: Optional[int] = Field(None, ge=1)


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    seed: int = 0
    protocol: Literal["task_free", "task_agnostic"] = "task_free"
    dataset: Optional[str] = None  # directory; synth parameters used when absent
    synth: SynthSettings = SynthSettings()
    num_tasks: int = Field(5, ge=2)
    block_class_count: int = Field(2, ge=1)
    model: ModelSettings = ModelSettings()
    trainer: TrainerSettings = TrainerSettings()
    classifier: ClassifierSettings = ClassifierSettings()

    @model_validator(mode="after")
    def _protocol_matches_mode(self):
        allowed = {
            "task_free": {"offline", "sequential", "task_free_1", "task_free_2"},
            "task_agnostic": {"sequential", "task_agnostic"},
        }[self.protocol]
        if self.trainer.mode not in allowed:
            raise ValueError(f"mode {self.trainer.mode!r} is not valid for protocol "
                             f"{self.protocol!r} (allowed: {sorted(allowed)})")
        return self

    @property
    def run_name(self) -> str:
        return self.name or f"{self.trainer.mode}-s{self.seed}"

    def trainer_config(self, num_seen_classes: int) -> TrainerConfig:
        t = self.trainer
        capacity = t.memory_capacity or max(1, int(round(t.memory_per_class * num_seen_classes)))
        weights = LossWeights(
            t.weights.beta, t.weights.gamma, t.weights.delta, t.weights.alpha,
            {k: Warmup(v.start, v.end) for k, v in t.weights.warmup.items()},
        )
        return TrainerConfig(
            mode=t.mode, epochs=t.epochs, batch_size=t.batch_size,
            replay_batch_size=t.replay_batch_size, lr=t.lr, weights=weights,
            memory_capacity=capacity, mb_capacity=t.mb_capacity, mst_capacity=t.mst_capacity,
            seed=self.seed, kd_enabled=t.kd_enabled, kd_symmetric=t.kd_symmetric,
            ca_use_mean=t.ca_use_mean, final_flush=t.final_flush, dark_capture=t.dark_capture,
        )

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(**self.classifier.model_dump())


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def apply_overrides(tree: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    return tree


def build_config(tree: Optional[dict] = None, overrides=()) -> ExperimentConfig:
    tree = apply_overrides(dict(tree or {}), overrides)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigError(f"invalid config at {where}: {first['msg']}") from None


def load_config(path=None, overrides=()) -> ExperimentConfig:
    tree = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"no such config file: {p}")
        try:
            tree = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    return build_config(tree, overrides)
