"""Pipeline configuration: INI-style sectioned key-value files over typed
defaults. Unknown sections or keys are errors so typos fail loudly."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_gaussians: int = 3000
    seed: int = 7


@dataclass
class GeometryConfig:
    kind: str = "sheet"              # sheet | cylinder | stl
    sheet_size: tuple = (0.1, 0.1, 0.005)
    cylinder_radius: float = 0.012
    cylinder_length: float = 0.1
    cylinder_segments: int = 48
    stl_path: str = ""


@dataclass
class CageConfig:
    nx: int = 15
    ny: int = 15
    nz: int = 15
    k: int = 8
    epsilon: float = 1e-6
    lambda_reg: float = 1e-6

    @property
    def dims(self):
        return (self.nx, self.ny, self.nz)


@dataclass
class SensorConfig:
    grid_h: int = 10
    grid_w: int = 10
    sample_hz: float = 250.0
    cutoff_hz: float = 10.0
    noise_ohms: float = 5.0
    r0_ohms: float = 1000.0
    gauge_alpha: float = 2.0
    gauge_thickness: float = 0.02
    twist_gauge: float = 0.5
    adc12: bool = False


@dataclass
class DatasetConfig:
    n_axes: int = 2
    n_keyposes: int = 6
    n_interp: int = 9
    bend_max_deg: float = 90.0
    twist_max_deg: float = 45.0
    magnitude_scales: tuple = (0.7, 1.0)
    modes: tuple = ("bend", "twist")


@dataclass
class TrainSection:
    epochs: int = 100
    lr0: float = 1e-3
    lambda_smooth: float = 0.1
    noise_std: float = 0.02
    early_stop_patience: int = 10
    batch: int = 16
    val_fraction: float = 0.1
    seed: int = 0


@dataclass
class ModelConfig:
    heads: int = 4
    hidden: int = 256
    feat_dim: int = 128
    head_hidden: int = 128
    head_init: str = "zeros"


@dataclass
class RenderConfig:
    width: int = 640
    height: int = 400
    fov_deg: float = 50.0
    tile_px: int = 16
    near: float = 0.01
    far: float = 10.0
    orbit_distance: float = 0.25


@dataclass
class EvalConfig:
    voxel_mm: float = 2.0
    center_fraction: float = 0.3
    ssim_renders: bool = True


@dataclass
class InferConfig:
    ema_beta: float = 0.7
    save_scenes: bool = False
    render_every: int = 0            # 0 disables PNG output


@dataclass
class ServeConfig:
    port: int = 7421
    fps: float = 20.0
    t_norm: float = 0.5
    assets_dir: str = ""
    allow_untrained: bool = False


@dataclass
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    cage: CageConfig = field(default_factory=CageConfig)
    sensor: SensorConfig = field(default_factory=SensorConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def validate(self) -> None:
        if self.scene.n_gaussians < 1:
            raise ConfigError("scene.n_gaussians must be >= 1")
        if min(self.cage.dims) < 2:
            raise ConfigError("cage dims must all be >= 2")
        if self.cage.k < 1:
            raise ConfigError("cage.k must be >= 1")
        if self.cage.epsilon < 0 or self.cage.lambda_reg < 0:
            raise ConfigError("cage.epsilon and cage.lambda_reg must be >= 0")
        if not 0 < self.sensor.cutoff_hz < self.sensor.sample_hz / 2:
            raise ConfigError("sensor.cutoff_hz must lie in (0, sample_hz/2)")
        if self.sensor.grid_h % 10 or self.sensor.grid_w % 10:
            raise ConfigError("sensor grid must tile 10x10 patches")
        if self.dataset.n_keyposes < 2:
            raise ConfigError("dataset.n_keyposes must be >= 2")
        if self.geometry.kind not in ("sheet", "cylinder", "stl"):
            raise ConfigError(f"unknown geometry kind {self.geometry.kind!r}")
        if not 0 <= self.infer.ema_beta < 1:
            raise ConfigError("infer.ema_beta must lie in [0,1)")
        if self.train.epochs < 1 or self.train.batch < 1 or self.train.lr0 <= 0:
            raise ConfigError("train.epochs/batch/lr0 must be positive")
        if self.render.tile_px < 8:
            raise ConfigError("render.tile_px must be >= 8")
        if self.eval.voxel_mm <= 0:
            raise ConfigError("eval.voxel_mm must be positive")


def _parse_value(text: str, like):
    if isinstance(like, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = text.replace(",", " ").split()
        if like and isinstance(like[0], str):
            return tuple(parts)
        return tuple(float(p) for p in parts)
    return text


def load_config(path) -> PipelineConfig:
    cfg = PipelineConfig()
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = sections[section]
        known = {f.name: getattr(target, f.name) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            setattr(target, key, _parse_value(raw, known[key]))
    cfg.validate()
    return cfg


def save_config(cfg: PipelineConfig, path) -> None:
    parser = configparser.ConfigParser()
    for f in fields(cfg):
        section = getattr(cfg, f.name)
        parser[f.name] = {}
        for sf in fields(section):
            value = getattr(section, sf.name)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            parser[f.name][sf.name] = str(value)
    with open(path, "w") as fh:
        parser.write(fh)
