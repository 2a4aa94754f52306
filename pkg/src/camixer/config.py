"""Configuration records and strict JSON parsing for runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class ModelConfig:
    channels: int = 60
    window: int = 16
    groups: tuple[int, ...] = (4, 4, 6, 6)
    scale: int = 4
    offset_scale: float = 8.0
    rho: float = 1 / 8
    ffn_expansion: int = 2
    heads: int = 1
    in_channels: int = 3
    extra_cond_channels: int = 0
    # ablation switches
    use_offsets: bool = True
    use_spatial_attn: bool = True
    use_channel_attn: bool = True
    use_global_cond: bool = True
    use_window_cond: bool = True

    def __post_init__(self):
        self.groups = tuple(int(g) for g in self.groups)
        if self.scale not in (2, 4):
            raise ConfigError(f"model.scale must be 2 or 4, got {self.scale}")
        if self.channels < 1 or self.window < 1 or not self.groups or min(self.groups) < 1:
            raise ConfigError("model.channels, model.window and model.groups must be positive")
        if self.offset_scale < 0:
            raise ConfigError(f"model.offset_scale must be >= 0, got {self.offset_scale}")
        if self.rho * self.channels < 1:
            raise ConfigError(f"model.rho * model.channels must be >= 1, got {self.rho * self.channels}")
        if self.channels % self.heads:
            raise ConfigError(f"model.channels ({self.channels}) not divisible by heads ({self.heads})")

    @property
    def num_blocks(self) -> int:
        return sum(self.groups)

    @property
    def reduced_channels(self) -> int:
        return max(1, math.floor(self.rho * self.channels + 0.5))

    @property
    def group_tails(self) -> list[int]:
        """1-based indices of the last block in each group."""
        out, acc = [], 0
        for g in self.groups:
            acc += g
            out.append(acc)
        return out


@dataclass
class RoutingConfig:
    gamma_target: float | None = None
    mode: str = "threshold"

    def __post_init__(self):
        if self.mode not in ("threshold", "topk"):
            raise ConfigError(f"routing.mode must be 'threshold' or 'topk', got {self.mode!r}")
        if self.mode == "topk" and self.gamma_target is None:
            raise ConfigError("routing.mode 'topk' requires routing.gamma_target")
        if self.gamma_target is not None and not 0.0 <= self.gamma_target <= 1.0:
            raise ConfigError(f"routing.gamma_target must lie in [0, 1], got {self.gamma_target}")


@dataclass
class LossConfig:
    gamma_ref: float = 0.5
    ratio_loss_form: str = "literal"
    ratio_weight: float = 1.0
    ws_weighted: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma_ref <= 1.0:
            raise ConfigError(f"gamma_ref must lie in [0, 1], got {self.gamma_ref}")
        if self.ratio_loss_form not in ("literal", "mean-target"):
            raise ConfigError(f"ratio_loss_form must be 'literal' or 'mean-target', got {self.ratio_loss_form!r}")


@dataclass
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 8
    patch_size: int = 32
    steps: int = 2000
    milestones: tuple[float, ...] = (0.5, 0.8, 0.9, 0.95)
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    temperature: float = 1.0
    seed: int = 0
    log_every: int = 1
    eval_every: int = 0
    checkpoint_every: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.loss, dict):
            self.loss = _build(LossConfig, self.loss, "train.loss")
        if self.lr < 0:
            raise ConfigError(f"train.lr must be >= 0, got {self.lr}")

    def milestone_steps(self) -> list[int]:
        return [int(round(m * self.steps)) for m in self.milestones]


@dataclass
class DataConfig:
    train_dir: str | None = None
    val_dir: str | None = None
    synthetic_train: int = 16
    synthetic_val: int = 4
    synthetic_size: int = 64
    kinds: tuple[str, ...] = ("flat", "texture", "half-split")

    def __post_init__(self):
        self.kinds = tuple(self.kinds)


@dataclass
class IOConfig:
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    io: IOConfig = field(default_factory=IOConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "routing": RoutingConfig, "io": IOConfig}


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key: {path}.{key}")
    kwargs = dict(raw)
    if cls is TrainConfig and "loss" in kwargs:
        kwargs["loss"] = _build(LossConfig, kwargs["loss"], f"{path}.loss")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def model_config_from_dict(raw: dict) -> ModelConfig:
    return _build(ModelConfig, raw, "model")


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for key in raw:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown config key: {key}")
    return RunConfig(**{k: _build(cls, raw.get(k, {}), k) for k, cls in _SECTIONS.items()})


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as JSON when possible)."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-object value")
        node[parts[-1]] = parsed
    return raw


def load_run_config(path: str, overrides: list[str] | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return run_config_from_dict(apply_overrides(raw, overrides or []))
