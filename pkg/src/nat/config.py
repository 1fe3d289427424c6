"""Run configuration: a flat "key = value" file with dotted keys.

Blank lines and '#' comments are ignored. Unknown keys are errors (they are
almost always typos), the seed is required (no wall-clock fallback, ever),
and relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .estimator import BASELINE_KINDS, ENTROPY_MODES, EstimatorConfig
from .optimizer import LinearSchedule, Schedules


class ConfigError(Exception):
    pass


@dataclass
class ModelConfig:
    vocab: Optional[int] = None
    hidden: int = 256
    layers: int = 2
    embed: int = 16
    init_scale: float = 0.05


@dataclass
class DataConfig:
    train: Optional[str] = None
    dev: Optional[str] = None
    stack: int = 1


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.0


@dataclass
class TrainConfig:
    max_steps: Optional[int] = None
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    keep_checkpoints: int = 3


@dataclass
class RunConfig:
    seed: Optional[int] = None
    out: str = "nat_run"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    schedules: Schedules = field(default_factory=Schedules)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _parse_lines(text: str, origin: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"{origin}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _to_int(key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected integer, got {value!r}") from None


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected number, got {value!r}") from None


def parse_config_text(text: str, origin: str = "<config>",
                      base_dir: Optional[Path] = None) -> RunConfig:
    kv = _parse_lines(text, origin)
    cfg = RunConfig()

    def pop(key):
        return kv.pop(key, None)

    def pop_int(key, default):
        v = pop(key)
        return default if v is None else _to_int(key, v)

    def pop_float(key, default):
        v = pop(key)
        return default if v is None else _to_float(key, v)

    def pop_path(key):
        v = pop(key)
        if v is None:
            return None
        p = Path(v)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return str(p)

    v = pop("seed")
    if v is not None:
        cfg.seed = _to_int("seed", v)
    v = pop_path("out")
    if v is not None:
        cfg.out = v

    m = cfg.model
    m.vocab = pop_int("model.vocab", m.vocab)
    m.hidden = pop_int("model.hidden", m.hidden)
    m.layers = pop_int("model.layers", m.layers)
    m.embed = pop_int("model.embed", m.embed)
    m.init_scale = pop_float("model.init_scale", m.init_scale)

    d = cfg.data
    d.train = pop_path("data.train") or d.train
    d.dev = pop_path("data.dev") or d.dev
    d.stack = pop_int("data.stack", d.stack)

    e = cfg.estimator
    e.k = pop_int("estimator.k", e.k)
    v = pop("estimator.baseline")
    if v is not None:
        if v not in BASELINE_KINDS:
            raise ConfigError(
                f"key 'estimator.baseline': unknown baseline {v!r}; "
                f"choose from {BASELINE_KINDS}"
            )
        e.baseline = v
    v = pop("estimator.entropy_mode")
    if v is not None:
        if v not in ENTROPY_MODES:
            raise ConfigError(
                f"key 'estimator.entropy_mode': unknown mode {v!r}; "
                f"choose from {ENTROPY_MODES}"
            )
        e.entropy_mode = v
    v = pop("estimator.kl_target_rate")
    if v is not None:
        e.kl_target_rate = _to_float("estimator.kl_target_rate", v)
    e.kl_weight = pop_float("estimator.kl_weight", e.kl_weight)

    s = cfg.schedules
    ent = s.entropy
    s.entropy = LinearSchedule(
        pop_float("schedule.entropy.start", ent.start),
        pop_float("schedule.entropy.end", ent.end),
        pop_int("schedule.entropy.ramp_begin", ent.ramp_begin),
        pop_int("schedule.entropy.ramp_end", ent.ramp_end),
    )
    nz = s.noise_std
    s.noise_std = LinearSchedule(
        pop_float("schedule.noise.start", nz.start),
        pop_float("schedule.noise.end", nz.end),
        pop_int("schedule.noise.ramp_begin", nz.ramp_begin),
        pop_int("schedule.noise.ramp_end", nz.ramp_end),
    )
    s.l2_weight = pop_float("schedule.l2", s.l2_weight)
    s.lr = pop_float("schedule.lr", s.lr)

    o = cfg.optimizer
    o.beta1 = pop_float("optimizer.beta1", o.beta1)
    o.beta2 = pop_float("optimizer.beta2", o.beta2)
    o.eps = pop_float("optimizer.eps", o.eps)
    o.clip_norm = pop_float("optimizer.clip_norm", o.clip_norm)

    t = cfg.train
    v = pop("train.max_steps")
    if v is not None:
        t.max_steps = _to_int("train.max_steps", v)
    t.eval_interval = pop_int("train.eval_interval", t.eval_interval)
    t.checkpoint_interval = pop_int("train.checkpoint_interval",
                                    t.checkpoint_interval)
    t.keep_checkpoints = pop_int("train.keep_checkpoints", t.keep_checkpoints)

    if kv:
        raise ConfigError(
            f"{origin}: unknown config keys {sorted(kv)} (typo?)"
        )
    _validate_common(cfg, origin)
    return cfg


def parse_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"), origin=str(p),
                             base_dir=p.parent)


def _validate_common(cfg: RunConfig, origin: str) -> None:
    if cfg.seed is None:
        raise ConfigError(f"{origin}: 'seed' is required (runs must be replayable)")
    if cfg.data.stack < 1:
        raise ConfigError(f"{origin}: 'data.stack' must be >= 1")
    for key, val in (("model.hidden", cfg.model.hidden),
                     ("model.layers", cfg.model.layers),
                     ("model.embed", cfg.model.embed),
                     ("train.eval_interval", cfg.train.eval_interval),
                     ("train.checkpoint_interval", cfg.train.checkpoint_interval),
                     ("train.keep_checkpoints", cfg.train.keep_checkpoints)):
        if val < 1:
            raise ConfigError(f"{origin}: {key!r} must be >= 1")
    if cfg.schedules.lr <= 0:
        raise ConfigError(f"{origin}: 'schedule.lr' must be positive")
    if cfg.schedules.l2_weight < 0:
        raise ConfigError(f"{origin}: 'schedule.l2' must be >= 0")
    try:
        cfg.estimator.validate()
    except ValueError as e:
        raise ConfigError(f"{origin}: {e}") from None


def validate_for_train(cfg: RunConfig, origin: str = "<config>") -> None:
    """Checks only `nat train` needs: data paths exist, model size known."""
    if cfg.model.vocab is None or cfg.model.vocab < 2:
        raise ConfigError(f"{origin}: 'model.vocab' (>= 2) is required to train")
    if cfg.train.max_steps is None or cfg.train.max_steps < 1:
        raise ConfigError(f"{origin}: 'train.max_steps' (>= 1) is required to train")
    for key, path in (("data.train", cfg.data.train), ("data.dev", cfg.data.dev)):
        if path is None:
            raise ConfigError(f"{origin}: {key!r} is required to train")
        if not Path(path).is_file():
            raise ConfigError(f"{origin}: {key!r} points to missing file {path}")
