"""Run configuration: dataclass tree, YAML loading, and dotted-key overrides.

Precedence is defaults -> config file -> ``--set key=value`` overrides.
Unknown keys are rejected with a suggestion so typos never silently fall
back to defaults.
"""

from __future__ import annotations

import dataclasses
import difflib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

# Per-task (a, b, c) presets for the exponential dynamics-weight schedule
# beta(t) = min(10^(a*t - b), c).
SCHEDULE_PRESETS: dict[str, tuple[float, float, float]] = {
    "hopper_stand": (8e-5, 4.3, 0.015),
    "cheetah_run": (8e-5, 5.0, 0.007),
    "cartpole_swingup": (8e-5, 4.0, 0.0025),
    "walker_stand": (8e-5, 5.0, 0.15),
    "walker_walk": (8e-5, 5.0, 0.15),
    "walker_run": (8e-6, 5.0, 0.015),
    "maniskill": (8e-6, 4.0, 0.0025),
}


@dataclass
class EnvConfig:
    mode: str = "distracted"  # "distracted" | "clean"
    episode_length: int = 250  # agent steps per episode
    action_repeat: int = 2


@dataclass
class ModelConfig:
    deter_dim: int = 200
    stoch_dim: int = 30
    # None derives the embedding size from the conv stack; an explicit value
    # is validated against the derived one when the model is built.
    embed_dim: Optional[int] = 1024
    min_std: float = 0.1
    hidden: int = 200
    conv_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    conv_kernel: int = 4
    head_hidden_layers: int = 3  # hidden layers in reward/actor/critic MLPs
    inv_hidden: int = 512
    inv_hidden_layers: int = 2


@dataclass
class ScheduleConfig:
    preset: Optional[str] = None  # fills a, b, c from SCHEDULE_PRESETS
    a: float = 8e-5
    b: float = 5.0
    c: float = 0.15
    t_unit: str = "env_steps"  # "env_steps" | "train_steps"
    # If set, beta is held at this value (disables the time-varying schedule).
    constant_beta: Optional[float] = None


@dataclass
class ObjectiveConfig:
    variant: str = "contrastive"  # "contrastive" | "reconstruction"
    use_simsiam: bool = True
    use_inverse_dynamics: bool = True
    kl_ratio: float = 4.0  # r; prior/posterior gradient split alpha = r/(r+1)
    recon_beta: float = 1.0  # constant KL weight of the reconstruction variant
    shift_pad: int = 4  # replicate-padding pixels for random-shift views


@dataclass
class OptimConfig:
    model_lr: float = 3e-4
    actor_lr: float = 8e-5
    critic_lr: float = 8e-5
    grad_clip: float = 100.0


@dataclass
class BatchConfig:
    size: int = 50
    length: int = 50


@dataclass
class PolicyConfig:
    horizon: int = 15
    gamma: float = 0.99
    lam: float = 0.95


@dataclass
class LoopConfig:
    total_env_steps: int = 100_000
    prefill: int = 5000  # env steps collected with random actions
    collect_interval: int = 1000  # env steps between training phases
    train_iters: int = 100  # gradient steps per training phase
    buffer_capacity: int = 100_000  # replay capacity in env steps
    eval_every: int = 10_000  # env steps between evaluations (0 disables)
    eval_episodes: int = 10
    checkpoint_every: int = 25_000  # env steps between checkpoints


@dataclass
class DiagnosticsConfig:
    conflict: bool = False  # record gradient-alignment samples during training
    conflict_every: int = 100  # train steps between samples
    conflict_warmup: int = 1000  # train steps ignored by the summary ratio


@dataclass
class Config:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.env.mode not in ("distracted", "clean"):
            raise ConfigError(f"env.mode must be 'distracted' or 'clean', got {self.env.mode!r}")
        if self.env.episode_length < 1 or self.env.action_repeat < 1:
            raise ConfigError("env.episode_length and env.action_repeat must be >= 1")
        if self.schedule.preset is not None and self.schedule.preset not in SCHEDULE_PRESETS:
            raise ConfigError(
                f"unknown schedule.preset {self.schedule.preset!r}; known: {sorted(SCHEDULE_PRESETS)}"
            )
        for name in ("a", "b", "c"):
            if getattr(self.schedule, name) <= 0:
                raise ConfigError(f"schedule.{name} must be > 0")
        if self.schedule.t_unit not in ("env_steps", "train_steps"):
            raise ConfigError("schedule.t_unit must be 'env_steps' or 'train_steps'")
        if self.objective.variant not in ("contrastive", "reconstruction"):
            raise ConfigError("objective.variant must be 'contrastive' or 'reconstruction'")
        if self.objective.kl_ratio <= 0:
            raise ConfigError("objective.kl_ratio must be > 0")
        if not (0 < self.policy.gamma < 1):
            raise ConfigError("policy.gamma must lie in (0, 1)")
        if not (0 <= self.policy.lam <= 1):
            raise ConfigError("policy.lam must lie in [0, 1]")
        if self.policy.horizon < 1:
            raise ConfigError("policy.horizon must be >= 1")
        if self.batch.size < 1 or self.batch.length < 2:
            raise ConfigError("batch.size must be >= 1 and batch.length >= 2")
        if self.model.min_std <= 0:
            raise ConfigError("model.min_std must be > 0")


class ConfigError(ValueError):
    """Raised for unknown keys, type mismatches, or invalid values."""


def _field_types(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    args = typing.get_args(target_type)
    if type(None) in args:  # Optional[X]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            return None
        inner = next(a for a in args if a is not type(None))
        return _coerce(value, inner, key)
    origin = typing.get_origin(target_type)
    if origin in (list, tuple) or target_type in (list, tuple):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"key '{key}' expects a list, got {value!r}")
        inner = args[0] if args else None
        return [(_coerce(v, inner, key) if inner else v) for v in value]
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"key '{key}' expects a bool, got {value!r}")
    if target_type is int:
        if isinstance(value, bool):
            raise ConfigError(f"key '{key}' expects an int, got {value!r}")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"key '{key}' expects an int, got {value!r}")
    if target_type is float:
        if isinstance(value, str):
            # YAML leaves exponent forms like 8e-6 as strings
            try:
                return float(value)
            except ValueError:
                raise ConfigError(f"key '{key}' expects a float, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects a float, got {value!r}")
        return float(value)
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"key '{key}' expects a string, got {value!r}")
        return value
    return value


def _known_keys() -> list[str]:
    keys = []
    probe = Config()
    for f in fields(Config):
        section = getattr(probe, f.name)
        if dataclasses.is_dataclass(section):
            keys.extend(f"{f.name}.{sf.name}" for sf in fields(section))
        else:
            keys.append(f.name)
    return keys


def _reject_unknown(key: str) -> None:
    suggestion = difflib.get_close_matches(key, _known_keys(), n=1)
    hint = f" (did you mean '{suggestion[0]}'?)" if suggestion else ""
    raise ConfigError(f"unknown config key '{key}'{hint}")


def _apply(cfg: Config, key: str, value: Any) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        name = parts[0]
        types = _field_types(Config)
        if name not in types or dataclasses.is_dataclass(getattr(cfg, name, None)):
            _reject_unknown(key)
        setattr(cfg, name, _coerce(value, types[name], key))
        return
    if len(parts) != 2:
        _reject_unknown(key)
    section_name, field_name = parts
    section = getattr(cfg, section_name, None)
    if section is None or not dataclasses.is_dataclass(section):
        _reject_unknown(key)
    types = _field_types(type(section))
    if field_name not in types:
        _reject_unknown(key)
    setattr(section, field_name, _coerce(value, types[field_name], key))


def _flatten(tree: dict, prefix: str = "") -> list[tuple[str, Any]]:
    out = []
    for k, v in tree.items():
        dotted = f"{prefix}{k}"
        if isinstance(v, dict):
            out.extend(_flatten(v, prefix=f"{dotted}."))
        else:
            out.append((dotted, v))
    return out


def parse_override(item: str) -> tuple[str, Any]:
    """Parse one ``key=value`` override; values go through YAML typing."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key.strip(), value


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> Config:
    """Build a Config from defaults, an optional YAML file, and overrides."""
    cfg = Config()
    explicit: set[str] = set()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        tree = yaml.safe_load(p.read_text())
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ConfigError(f"config file must hold a mapping, got {type(tree).__name__}")
        for key, value in _flatten(tree):
            _apply(cfg, key, value)
            explicit.add(key)
    for item in overrides or []:
        key, value = parse_override(item)
        _apply(cfg, key, value)
        explicit.add(key)
    if cfg.schedule.preset is not None:
        if cfg.schedule.preset not in SCHEDULE_PRESETS:
            raise ConfigError(
                f"unknown schedule.preset {cfg.schedule.preset!r}; known: {sorted(SCHEDULE_PRESETS)}")
        # The preset fills a/b/c only where they were not explicitly given.
        a, b, c = SCHEDULE_PRESETS[cfg.schedule.preset]
        if "schedule.a" not in explicit:
            cfg.schedule.a = a
        if "schedule.b" not in explicit:
            cfg.schedule.b = b
        if "schedule.c" not in explicit:
            cfg.schedule.c = c
    cfg.validate()
    return cfg


def config_from_dict(tree: dict) -> Config:
    """Rebuild a Config from a resolved-config dict (checkpoint / snapshot)."""
    cfg = Config()
    for key, value in _flatten(tree):
        _apply(cfg, key, value)
    cfg.validate()
    return cfg


def save_config(cfg: Config, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
