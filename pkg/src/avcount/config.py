"""Run configuration and run records.

Defaults follow the published training recipes: sight 8 epochs / SGD / lr
1e-4 / batch 8; sound 20 epochs with the same optimizer settings; stride
scorer 5 epochs at lr 1e-3; reliability gate 20 epochs at lr 1e-4, batch 8;
loss weights 10; ranking margin 2.9; deviation threshold 0.29; recording
thresholds 0.36 (sight) / 0.40 (sound); maximum stride 8 in training, 5 at
inference. Overrides are recorded in the RunRecord.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

STAGES = (
    "train_sight",
    "train_sound",
    "train_stride",
    "train_reliability",
    "infer",
    "evaluate",
    "synth",
)


@dataclass
class StageParams:
    epochs: int
    learning_rate: float
    batch_size: int = 8
    momentum: float = 0.0


@dataclass
class RunConfig:
    stage: str = "evaluate"
    dataset: str | None = None
    weights_dir: str = "weights"
    run_dir: str | None = None
    seed: int = 0
    deterministic: bool = True

    sight_train: StageParams = field(default_factory=lambda: StageParams(8, 1e-4))
    sound_train: StageParams = field(default_factory=lambda: StageParams(20, 1e-4))
    stride_train: StageParams = field(default_factory=lambda: StageParams(5, 1e-3))
    reliability_train: StageParams = field(default_factory=lambda: StageParams(20, 1e-4))

    # streams
    sight_variant: str = "tiny"
    sight_feature_dim: int = 64
    clip_len: int = 64
    resolution: int = 112
    sound_variant: str = "tiny"
    sound_feature_dim: int = 64
    p_sight: int = 41
    p_sound: int = 43
    lambda1: float = 10.0
    lambda2: float = 10.0
    supervision: str = "diversity"

    # spectrogram front-end
    sample_rate: int = 16000
    fft_size: int = 512
    stft_hop: int = 250
    stft_window: str = "hann"
    log_compression: bool = True

    # stride module
    margin: float = 2.9
    theta_s: float = 0.29
    max_stride_train: int = 8
    max_stride_infer: int = 5

    # reliability module
    theta_r_v: float = 0.36
    theta_r_a: float = 0.40

    # inference behaviour
    fixed_stride: int | None = None
    no_audio: bool = False
    gamma_override: float | None = None
    aggregation: str = "sum"  # or "single_clip"
    sound_segments_infer: int = 1
    sound_segments_train_cap: int = 2

    overrides: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.aggregation not in ("sum", "single_clip"):
            raise ConfigError(f"aggregation must be 'sum' or 'single_clip', got {self.aggregation!r}")
        if self.gamma_override is not None and not 0.0 <= self.gamma_override <= 1.0:
            raise ConfigError(f"gamma override must lie in [0, 1], got {self.gamma_override}")
        if self.fixed_stride is not None and self.fixed_stride < 1:
            raise ConfigError(f"fixed stride must be >= 1, got {self.fixed_stride}")

    @classmethod
    def from_file(cls, path: str | Path, **overrides: Any) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a mapping")
        return cls.from_dict(raw).with_overrides(**overrides)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key.endswith("_train") and isinstance(value, dict):
                value = StageParams(**value)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Apply non-None flag overrides, logging each one in the config."""
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ConfigError(f"unknown override {key!r}")
            setattr(self, key, value)
            self.overrides.append(f"{key}={value}")
        self.__post_init__()
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def stage_params(self, stage: str) -> StageParams:
        return {
            "train_sight": self.sight_train,
            "train_sound": self.sound_train,
            "train_stride": self.stride_train,
            "train_reliability": self.reliability_train,
        }[stage]


@dataclass
class RunRecord:
    """Append-only log of one stage run: resolved config, per-epoch losses,
    per-epoch validation relative MAE, and produced artifact paths."""

    stage: str
    config: dict[str, Any]
    epoch_losses: list[float] = field(default_factory=list)
    val_relative_mae: list[float] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(**d)
