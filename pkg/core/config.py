"""
Named presets and layered configuration.

Precedence, lowest first: preset < PMP_SEED environment variable (seed only)
< config file < command-line flags. Config files are INI/key=value text read
through QSettings; keys may be plain (lr=3e-4) or sectioned ([train] lr=3e-4).
"""

import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from PySide6.QtCore import QSettings

from core.data import DEFAULT_BLOCK_LEN, DEFAULT_SHUFFLE_BUFFER
from core.errors import ConfigError
from core.model import MODEL_PRESETS, ModelConfig
from core.trainer import FinetuneConfig, TrainConfig
from core.utils import get_logger

logger = get_logger("PMP.config")

SEED_ENV = "PMP_SEED"

TRAIN_PRESETS: Dict[str, TrainConfig] = {
    "desk": TrainConfig(base_lr=3e-4, warmup_updates=200, total_updates=2000, micro_batch=8, grad_accum=1),
    "full-scale": TrainConfig(base_lr=2e-5, warmup_updates=2000, total_updates=20000, micro_batch=4, grad_accum=8,
                         clip_norm=1.0, seed=42),
    "smoke": TrainConfig(base_lr=1e-3, warmup_updates=4, total_updates=30, micro_batch=4, grad_accum=1),
}

FINETUNE_PRESETS: Dict[str, FinetuneConfig] = {
    "desk": FinetuneConfig(lr=1e-3, epochs=3, micro_batch=16),
    "full-scale": FinetuneConfig(lr=2e-5, epochs=3, micro_batch=16),
    "smoke": FinetuneConfig(lr=3e-3, epochs=1, micro_batch=8),
}

THEORY_PRESETS: Dict[str, Dict[str, Any]] = {
    "prop1-default": dict(d_M=10, d_Mbar=10, eps_flat=0.0, lambda_curv=1.0, noise_sigma=1.0,
                          eta=0.05, n_samples=100_000, seed=0),
}


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    t_eb: int = 100
    iou_threshold: float = 0.99
    required_streak: int = 5
    block_len: int = DEFAULT_BLOCK_LEN
    shuffle_buffer: int = DEFAULT_SHUFFLE_BUFFER
    n_train: int = 2048
    n_eval: int = 512
    eval_blocks: int = 16

    @property
    def seed(self) -> int:
        return self.train.seed

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.finetune.validate()
        if self.block_len > self.model.max_seq_len:
            raise ConfigError(f"block_len {self.block_len} exceeds model max_seq_len {self.model.max_seq_len}")
        if self.t_eb < 1 or self.required_streak < 1:
            raise ConfigError(f"t_eb and required_streak must be positive, got {self.t_eb}/{self.required_streak}")
        return self

    def snapshot(self) -> Dict[str, Any]:
        out = asdict(self)
        out["train"]["betas"] = list(self.train.betas)
        return out


PRESETS: Dict[str, RunConfig] = {
    "desk": RunConfig("desk", MODEL_PRESETS["desk"], TRAIN_PRESETS["desk"], FINETUNE_PRESETS["desk"], t_eb=100),
    "full-scale": RunConfig("full-scale", MODEL_PRESETS["desk"], TRAIN_PRESETS["full-scale"],
                            FINETUNE_PRESETS["full-scale"], t_eb=500),
    "smoke": RunConfig("smoke", MODEL_PRESETS["smoke"], TRAIN_PRESETS["smoke"], FINETUNE_PRESETS["smoke"],
                       t_eb=10, block_len=32, shuffle_buffer=16, n_train=128, n_eval=64, eval_blocks=4),
}

# flag / file key -> (section, field)
_ALIASES = {
    "lr": ("train", "base_lr"),
    "warmup": ("train", "warmup_updates"),
    "total": ("train", "total_updates"),
    "updates": ("train", "total_updates"),
    "accum": ("train", "grad_accum"),
    "clip": ("train", "clip_norm"),
    "streak": ("run", "required_streak"),
    "ft_lr": ("finetune", "lr"),
    "ft_epochs": ("finetune", "epochs"),
    "ft_micro_batch": ("finetune", "micro_batch"),
}


def _field_map() -> Dict[str, tuple]:
    out: Dict[str, tuple] = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("finetune", FinetuneConfig)):
        for f in fields(cls):
            out.setdefault(f.name, (section, f.name))
            out[f"{section}.{f.name}"] = (section, f.name)
    for f in fields(RunConfig):
        if f.name not in ("preset", "model", "train", "finetune"):
            out[f.name] = ("run", f.name)
    for alias, target in _ALIASES.items():
        out[alias] = target
    return out


_FIELDS = _field_map()


def _coerce(current: Any, value: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            parts = value.split(",") if isinstance(value, str) else list(value)
            return tuple(float(p) for p in parts)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {type(current).__name__}") from None
    return value


def apply_setting(cfg: RunConfig, key: str, value: Any) -> RunConfig:
    """Set one plain, dotted or aliased key; unknown keys raise ConfigError."""
    norm = key.strip().replace("-", "_").replace("/", ".").lower()
    target = _FIELDS.get(norm) or _FIELDS.get(norm.split(".")[-1])
    if target is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    section, name = target
    if norm == "seed":
        seed = _coerce(cfg.train.seed, value, key)
        cfg.train = replace(cfg.train, seed=seed)
        cfg.finetune = replace(cfg.finetune, seed=seed)
        return cfg
    if section == "run":
        setattr(cfg, name, _coerce(getattr(cfg, name), value, key))
        return cfg
    sub = getattr(cfg, section)
    setattr(cfg, section, replace(sub, **{name: _coerce(getattr(sub, name), value, key)}))
    return cfg


def read_config_file(path: Union[str, Path]) -> Dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    settings = QSettings(str(p), QSettings.IniFormat)
    if settings.status() != QSettings.NoError:
        raise ConfigError(f"config file {p} could not be parsed")
    values: Dict[str, str] = {}
    for key in settings.allKeys():
        raw = settings.value(key)
        if isinstance(raw, (list, tuple)):
            raw = ",".join(str(v) for v in raw)
        name = key[len("General/"):] if key.startswith("General/") else key
        values[name] = str(raw)
    logger.debug(f"CONFIG_FILE: {p} keys={sorted(values)}")
    return values


def resolve(preset: str = "desk", config_file: Optional[Union[str, Path]] = None,
            overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]
    cfg = RunConfig(preset, replace(base.model), replace(base.train), replace(base.finetune),
                    **{f.name: getattr(base, f.name) for f in fields(RunConfig)
                       if f.name not in ("preset", "model", "train", "finetune")})
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        apply_setting(cfg, "seed", env_seed)
    if config_file:
        for key, value in read_config_file(config_file).items():
            apply_setting(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            apply_setting(cfg, key, value)
    return cfg.validate()


def resolve_theory(preset: str = "prop1-default") -> Dict[str, Any]:
    """Quadratic-model parameters for verify-theory; PMP_SEED replaces the preset seed."""
    if preset not in THEORY_PRESETS:
        raise ConfigError(f"unknown theory preset {preset!r}; expected one of {sorted(THEORY_PRESETS)}")
    params = dict(THEORY_PRESETS[preset])
    env_seed = os.environ.get(SEED_ENV)
    if env_seed:
        params["seed"] = _coerce(params["seed"], env_seed, SEED_ENV)
    return params
