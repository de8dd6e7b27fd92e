"""Run configuration.

Stored as an INI document with one section per dataclass below.  Every key
may be overridden from the environment as ``WAVENERF_<SECTION>__<KEY>``,
e.g. ``WAVENERF_TRAIN__STEPS=200``.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_spheres: int = 2
    n_boxes: int = 1
    texture_freq: float = 3.0
    image_size: int = 64
    rig_radius: float = 4.0
    focal: float = 80.0
    near: float = 2.0
    far: float = 7.5
    n_sources: int = 3
    source_spread_deg: float = 10.0
    n_train_targets: int = 8
    n_test_targets: int = 1
    backdrop: bool = True
    supersample: int = 1
    spec_file: str = ""


@dataclass
class ModelConfig:
    spatial_channels: tuple = (8, 16, 32)
    freq_channels: int = 16
    latent_channels: int = 8
    depth_planes: tuple = (8, 32, 48)
    freq_planes: int = 32
    token_width: int = 16
    heads: int = 2
    dir_freqs: int = 4
    hidden: int = 16
    ae_channels: int = 16


@dataclass
class SamplerConfig:
    n_coarse: int = 96
    n_fine: int = 32
    eps_floor: float = 1e-3
    strategy: str = "fss"


@dataclass
class LossConfig:
    w_color: float = 1.0
    w_freq_base: float = 0.1
    w_freq_weighted: float = 0.5
    w_depth: float = 0.1
    depth_mask_threshold: float = 0.5


@dataclass
class OptimConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine: bool = True
    lr_min_ratio: float = 0.05


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 512
    seed: int = 0
    checkpoint_every: int = 500
    chunk: int = 128
    eval_every: int = 0


SECTIONS = {
    "scene": SceneConfig,
    "model": ModelConfig,
    "sampler": SamplerConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "train": TrainConfig,
}


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)


def _parse(raw: str, default, key):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s for s in raw.replace("(", "").replace(")", "").split(",") if s.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def _apply(cfg: Config, section: str, key: str, raw: str, origin: str):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}] ({origin})")
    obj = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(obj)}
    if key not in names:
        raise ConfigError(f"unknown config key {section}.{key} ({origin})")
    setattr(obj, key, _parse(raw, getattr(obj, key), f"{section}.{key}"))


def load_config(path=None, env=None) -> Config:
    cfg = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw, str(path))
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith("WAVENERF_") or "__" not in name:
            continue
        section, key = name[len("WAVENERF_"):].lower().split("__", 1)
        _apply(cfg, section, key, raw, f"environment {name}")
    validate(cfg)
    return cfg


def validate(cfg: Config):
    m, s = cfg.model, cfg.sampler
    if len(m.spatial_channels) != 3 or len(m.depth_planes) != 3:
        raise ConfigError("model.spatial_channels and model.depth_planes need three levels")
    if min(m.depth_planes) < 2 or m.freq_planes < 2:
        raise ConfigError("each volume needs at least two depth planes")
    if m.token_width % m.heads:
        raise ConfigError("model.token_width must be divisible by model.heads")
    if s.n_coarse < 2 or s.n_fine < 0:
        raise ConfigError("sampler.n_coarse must be >= 2 and sampler.n_fine >= 0")
    if s.strategy not in ("fss", "uniform"):
        raise ConfigError(f"sampler.strategy must be 'fss' or 'uniform', got {s.strategy!r}")
    if cfg.scene.image_size % 4:
        raise ConfigError("scene.image_size must be divisible by 4")
    if cfg.scene.n_sources < 2:
        raise ConfigError("scene.n_sources must be >= 2")
    if cfg.train.batch_size < 1 or cfg.train.steps < 0:
        raise ConfigError("train.batch_size must be >= 1 and train.steps >= 0")


def save_config(cfg: Config, path):
    parser = configparser.ConfigParser()
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name))
                           for f in dataclasses.fields(obj)}
    with open(Path(path), "w") as fh:
        parser.write(fh)


def config_from_dict(d) -> Config:
    cfg = Config()
    for section, values in d.items():
        for key, val in values.items():
            obj = getattr(cfg, section)
            default = getattr(obj, key)
            setattr(obj, key, tuple(val) if isinstance(default, tuple) else val)
    return cfg


def toy_config() -> Config:
    """Reduced widths and sample counts for single-scene overfitting on one
    CPU core.  Architecture and loss weights are unchanged."""
    cfg = Config()
    m = cfg.model
    m.spatial_channels = (4, 8, 8)
    m.freq_channels = 8
    m.depth_planes = (8, 16, 16)
    m.freq_planes = 16
    m.ae_channels = 8
    cfg.sampler.n_coarse = 48
    cfg.sampler.n_fine = 16
    cfg.train.batch_size = 64
    cfg.train.chunk = 128
    cfg.train.steps = 3000
    cfg.train.checkpoint_every = 1000
    cfg.optim.lr = 1e-3
    return cfg
