"""Run configuration: one YAML tree with a section per component plus a global seed."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import DEFAULT_FRACTIONS
from .encoders import ModelConfig
from .engine import PretrainConfig
from .errors import ConfigError
from .evaluation import ProbeConfig
from .loss import LossConfig
from .views import ViewConfig

SEED_ENV = "MMSN_SEED"


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_patients: int = 50
    images_per_patient: int = 4
    image_size: int = 224
    label_model: Literal["independent", "ehr_coupled"] = "ehr_coupled"
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    data: DataConfig = Field(default_factory=DataConfig)
    view: ViewConfig = Field(default_factory=ViewConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    eval: ProbeConfig = Field(default_factory=ProbeConfig)
    # when set, overrides the seeds of the pretrain and eval sections
    seed: int | None = None

    @model_validator(mode="after")
    def _propagate_seed(self):
        if self.seed is not None:
            object.__setattr__(self, "pretrain", self.pretrain.model_copy(update={"seed": self.seed}))
            object.__setattr__(self, "eval", self.eval.model_copy(update={"seed": self.seed}))
        return self

    @property
    def effective_seed(self) -> int:
        return self.seed if self.seed is not None else self.pretrain.seed

    def digest(self) -> str:
        """Short stable hash of the full configuration."""
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:10]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def build_config(tree: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Validate a config tree; ``overrides`` (e.g. from CLI flags) win over the tree.

    A missing global seed falls back to the ``MMSN_SEED`` environment variable.
    """
    tree = _deep_merge(tree or {}, overrides or {})
    if tree.get("seed") is None and os.environ.get(SEED_ENV):
        try:
            tree["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    tree: Any = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        tree = yaml.safe_load(path.read_text()) or {}
        if not isinstance(tree, dict):
            raise ConfigError("config root must be a mapping")
    return build_config(tree, overrides)


def json_schema() -> dict:
    return RunConfig.model_json_schema()
