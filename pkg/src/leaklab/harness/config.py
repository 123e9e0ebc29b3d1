"""Pipeline configuration: nested dataclasses, JSON round trip, dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from leaklab.errors import ConfigError
from leaklab.model import ModelConfig
from leaklab.schemas import load_schema
from leaklab.training import TrainConfig

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    wordlist_path: str | None = None  # None: shipped sample wordlist
    support_path: str | None = None  # None: synthetic support pairs
    general_path: str | None = None  # None: synthetic general corpus
    n_passwords: int = 20
    support_ratio: int = 2  # support pairs per injected credential
    n_pretrain: int = 1200
    n_restore: int = 200
    n_eval: int = 2000


@dataclass
class PretrainConfig:
    epochs: int = 6
    lr: float = 2e-3
    batch: int = 4


@dataclass
class LoraConfig:
    r: int = 8
    alpha: float = 64.0
    scaling: str = "standard"
    targets: str | list[str] = "projections"  # "projections", "attention" or explicit paths


@dataclass
class EditConfig:
    scale: float = 0.1
    sign: int = -1
    eligible: str | list[str] = "fc1"
    # when set, the first scale that brings mined recall to 0 is used
    auto_scales: list[float] | None = None
    probe: str = "first_diff"


@dataclass
class RestoreConfig:
    enabled: bool = True
    epochs: int = 2
    lr: float = 1e-3
    batch: int = 16


@dataclass
class AssociationConfig:
    enabled: bool = True
    chunk: int = 5
    epochs_per_chunk: int = 10


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    corruption: dict = field(default_factory=lambda: {"substitutions": None, "fallback": "adjacent-swap"})
    edit: EditConfig = field(default_factory=EditConfig)
    restore: RestoreConfig = field(default_factory=RestoreConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    sweep_scales: list[float] = field(default_factory=lambda: [0.1, 0.01])
    checkpoint_dtype: str = "float64"
    seed: int = 42
    out_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        try:
            jsonschema.validate(obj, load_schema("config"))
        except jsonschema.ValidationError as exc:
            raise ConfigError(f"config does not match schema: {exc.message}") from exc
        sub = {
            "model": ModelConfig,
            "train": TrainConfig,
            "pretrain": PretrainConfig,
            "data": DataConfig,
            "lora": LoraConfig,
            "edit": EditConfig,
            "restore": RestoreConfig,
            "association": AssociationConfig,
        }
        kwargs: dict[str, Any] = {}
        try:
            for key, value in obj.items():
                if key in sub:
                    kwargs[key] = sub[key](**value)
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(obj)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    obj = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = obj
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return PipelineConfig.from_dict(obj)


def fixture_config(out_dir: str = "runs/fixture", seed: int = 42) -> PipelineConfig:
    """The desk-scale acceptance fixture: 4 layers, d_model 64, 20 passwords."""
    return PipelineConfig(
        model=ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ff=256, max_seq=128, seed=seed),
        train=TrainConfig(epochs=200, seed=seed),
        data=DataConfig(n_passwords=20, n_eval=600),
        edit=EditConfig(scale=0.1, auto_scales=[0.05, 0.1, 0.2]),
        sweep_scales=[0.2, 0.1, 0.05, 0.01],
        seed=seed,
        out_dir=out_dir,
    )
