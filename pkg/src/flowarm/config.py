"""Experiment configuration: strict nested TOML with full-config hashing.

Unknown keys abort with the offending dotted path; every section has typed
defaults so a minimal file (or none) is a complete experiment description.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .env import EnvConfig
from .errors import ConfigError
from .midm import MidmConfig
from .model import ModelConfig


@dataclass
class EnvSection:
    height: int = 32
    width: int = 32
    l1: float = 8.0
    l2: float = 7.0
    delta_max: float = 0.15
    success_radius: float = 1.5
    horizon: int = 64


@dataclass
class ModelSection:
    patch_size: int = 4
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    instruction_vocab_size: int = 4
    max_frames: int = 16
    sampling_steps: int = 5
    eta: float = 3.0
    cfg_drop_prob: float = 0.1
    guidance_scale: float = 1.0


@dataclass
class MidmSection:
    lam: float = 3e-3
    round_threshold: float = 0.5
    u_patch: int = 2
    u_hidden: int = 16
    r_patch: int = 4
    r_feat: int = 16
    r_hidden: int = 256
    huber_delta: float = 1.0
    noise_std: float = 0.05   # input augmentation during training


@dataclass
class RolloutSection:
    chunk_size: int = 4
    sampling_steps: int = 5
    timeout: int = 64
    reprefill: str = "chunked"
    episodes: int = 20
    scenario: str = "static"   # or "dynamic"
    mode: str = "closed_loop"


@dataclass
class TrainingSection:
    steps: int = 2000
    midm_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    midm_lr: float = 3e-3
    midm_mask_lr: float = 1e-2
    weight_decay: float = 0.01
    seed: int = 0
    log_interval: int = 100


@dataclass
class DataSection:
    n_episodes: int = 600
    heldout_episodes: int = 40
    perturb_prob: float = 0.5
    seed: int = 1234


@dataclass
class PathsSection:
    dataset_dir: str = "data/train"
    heldout_dir: str = "data/heldout"
    runs_dir: str = "runs"
    wm_checkpoint: str = "checkpoints/wm.vdrc"
    midm_checkpoint: str = "checkpoints/midm.vdrc"


_SECTIONS = {
    "env": EnvSection,
    "model": ModelSection,
    "midm": MidmSection,
    "rollout": RolloutSection,
    "training": TrainingSection,
    "data": DataSection,
    "paths": PathsSection,
}


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    midm: MidmSection = field(default_factory=MidmSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    base_dir: Path = field(default_factory=Path.cwd)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else (self.base_dir / p)

    # typed views consumed by the other modules
    def env_config(self) -> EnvConfig:
        e = self.env
        return EnvConfig(height=e.height, width=e.width, l1=e.l1, l2=e.l2,
                         delta_max=e.delta_max, success_radius=e.success_radius,
                         horizon=e.horizon)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(frame_hw=self.env.height, patch_size=m.patch_size,
                           embed_dim=m.embed_dim, n_layers=m.n_layers,
                           n_heads=m.n_heads,
                           instruction_vocab_size=m.instruction_vocab_size,
                           max_frames=m.max_frames, sampling_steps=m.sampling_steps,
                           eta=m.eta, cfg_drop_prob=m.cfg_drop_prob,
                           guidance_scale=m.guidance_scale)

    def midm_config(self) -> MidmConfig:
        m = self.midm
        return MidmConfig(lam=m.lam, round_threshold=m.round_threshold,
                          frame_hw=self.env.height, u_patch=m.u_patch,
                          u_hidden=m.u_hidden, r_patch=m.r_patch,
                          r_feat=m.r_feat, r_hidden=m.r_hidden,
                          huber_delta=m.huber_delta)


def _coerce(value, target_type, path: str):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    raise ConfigError(f"{path}: expected {target_type.__name__}, got {type(value).__name__}")


def _apply_section(section_obj, data: dict, prefix: str):
    fields = {f.name: f.type for f in dataclasses.fields(section_obj)}
    types = {f.name: type(getattr(section_obj, f.name)) for f in dataclasses.fields(section_obj)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {prefix}.{key}")
        setattr(section_obj, key, _coerce(value, types[key], f"{prefix}.{key}"))


def apply_overrides(cfg: ExperimentConfig, overrides: dict):
    """Apply dotted-path overrides like {'model.eta': 3.0}."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown config key: {dotted}")
        section = getattr(cfg, parts[0])
        names = {f.name for f in dataclasses.fields(section)}
        if parts[1] not in names:
            raise ConfigError(f"unknown config key: {dotted}")
        current = getattr(section, parts[1])
        if isinstance(value, str) and not isinstance(current, str):
            value = type(current)(value) if not isinstance(current, bool) else value == "true"
        setattr(section, parts[1], _coerce(value, type(current), dotted))
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        with open(path, "rb") as f:
            raw = tomllib.load(f)
        for section_name, section_data in raw.items():
            if section_name not in _SECTIONS:
                raise ConfigError(f"unknown config section: {section_name}")
            if not isinstance(section_data, dict):
                raise ConfigError(f"{section_name}: expected a table")
            _apply_section(getattr(cfg, section_name), section_data, section_name)
        cfg.base_dir = path.parent.resolve()
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg
