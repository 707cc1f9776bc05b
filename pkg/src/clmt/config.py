"""Run configuration: dataclasses with full defaults plus JSON file loading.

Every field has a default; a config file only lists overrides, and the
overrides are echoed into the run log so a report is self-describing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    early_stop_patience: int = 5
    max_epochs: int = 60


@dataclass
class ModelConfig:
    latent_dim: int = 64  # d
    codebook_entries: int = 64  # K per stage
    codebook_stages: int = 4  # L
    stride: int = 4  # encoder downsampling R
    enc_channels: tuple[int, int] = (32, 64)
    kernel_size: int = 7
    n_blocks: int = 4
    static_dim: int = 4
    pe_fmin_hz: float = 0.1
    pe_fmax_hz: float = 50.0
    tf_layers: int = 4
    tf_heads: int = 4
    tf_ff_mult: int = 4
    sr_factor: int = 4

    def __post_init__(self):
        if self.latent_dim % 2:
            raise ConfigError("latent_dim must be even for sin/cos position pairs")
        r, b = self.stride, self.n_blocks
        while r > 1 and r % 2 == 0:
            r //= 2
            b -= 1
        if r != 1 or b < 0:
            raise ConfigError(f"stride {self.stride} must be a power of two realizable by {self.n_blocks} blocks")


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    lambda_vq: float = 0.25
    ema_decay: float = 0.99
    dead_code_threshold: float = 1.0
    kmeans_iters: int = 10


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    deterministic: bool = True
    # Stage-2 conventions (both toggleable): condition source/target latents
    # with the subject prompt before the frozen encoder sees them, and
    # prepend a prompt token to the SR completion head's input.
    stage2_condition_sources: bool = True
    sr_prompt_token: bool = True

    def to_dict(self) -> dict:
        def conv(obj):
            if dataclasses.is_dataclass(obj):
                return {k: conv(v) for k, v in dataclasses.asdict(obj).items()}
            if isinstance(obj, tuple):
                return list(obj)
            return obj

        return {
            "optimizer": conv(self.optimizer),
            "model": conv(self.model),
            "loss": conv(self.loss),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "stage2_condition_sources": self.stage2_condition_sources,
            "sr_prompt_token": self.sr_prompt_token,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _apply_section(cls, base, overrides: dict, path: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = dataclasses.asdict(base)
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {path}.{key}")
        if isinstance(kwargs[key], (list, tuple)) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    if "enc_channels" in kwargs and isinstance(kwargs["enc_channels"], list):
        kwargs["enc_channels"] = tuple(kwargs["enc_channels"])
    return cls(**kwargs)


def config_from_dict(raw: dict) -> tuple[TrainConfig, dict]:
    """Build a TrainConfig from a (possibly partial) dict; returns the config
    plus the overrides that differed from defaults, for run-log echoing."""
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    known = {"optimizer", "model", "loss", "seed", "deterministic", "stage2_condition_sources", "sr_prompt_token"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg = TrainConfig()
    try:
        cfg = dataclasses.replace(
            cfg,
            optimizer=_apply_section(OptimizerConfig, cfg.optimizer, raw.get("optimizer", {}), "optimizer"),
            model=_apply_section(ModelConfig, cfg.model, raw.get("model", {}), "model"),
            loss=_apply_section(LossConfig, cfg.loss, raw.get("loss", {}), "loss"),
            seed=int(raw.get("seed", cfg.seed)),
            deterministic=bool(raw.get("deterministic", cfg.deterministic)),
            stage2_condition_sources=bool(raw.get("stage2_condition_sources", cfg.stage2_condition_sources)),
            sr_prompt_token=bool(raw.get("sr_prompt_token", cfg.sr_prompt_token)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    defaults = TrainConfig().to_dict()
    overrides = _dict_diff(defaults, cfg.to_dict())
    return cfg, overrides


def _dict_diff(base: dict, new: dict) -> dict:
    out = {}
    for key, value in new.items():
        if isinstance(value, dict):
            sub = _dict_diff(base.get(key, {}), value)
            if sub:
                out[key] = sub
        elif base.get(key) != value:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> tuple[TrainConfig, dict]:
    if path is None:
        return TrainConfig(), {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)
