"""Key-value configuration (INI sections) for every stage of the pipeline.

Each dataclass below maps to one ``[section]`` of the config file.  The
config hash is a digest over the canonical serialisation, so two configs
with the same values always hash identically.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class WorldConfig:
    dt: float = 0.1
    seed: int = 0
    density: str = "regular"
    # vehicles / walkers per km of directed lane
    regular_vehicles_per_km: float = 9.0
    dense_vehicles_per_km: float = 18.0
    regular_walkers_per_km: float = 6.0
    dense_walkers_per_km: float = 12.0
    stuck_lateral_m: float = 3.0


@dataclass
class VehicleConfig:
    wheelbase: float = 2.5
    max_steer_deg: float = 40.0
    max_accel: float = 3.0
    max_decel: float = 8.0
    v_max: float = 12.0
    half_length: float = 2.2
    half_width: float = 0.9
    walker_radius: float = 0.35
    walker_speed: float = 1.2


@dataclass
class ExpertConfig:
    target_speed: float = 8.0
    lateral_accel: float = 2.0
    comfort_decel: float = 3.5
    standstill_gap: float = 2.0
    time_gap: float = 1.0
    stop_line_margin: float = 0.5
    speed_gain: float = 1.5
    brake_gain: float = 1.0
    path_margin: float = 0.4
    min_lookahead: float = 4.0
    lookahead_time: float = 0.6


@dataclass
class NoiseConfig:
    sigma_xy: float = 0.2
    sigma_heading_deg: float = 2.0
    sigma_v: float = 0.3
    scale: float = 1.0

    @property
    def sxy(self) -> float:
        return self.sigma_xy * self.scale

    @property
    def sheading(self) -> float:
        return math.radians(self.sigma_heading_deg) * self.scale

    @property
    def sv(self) -> float:
        return self.sigma_v * self.scale

    @classmethod
    def zero(cls) -> "NoiseConfig":
        return cls(scale=0.0)


@dataclass
class TrackerConfig:
    gate_radius: float = 2.0
    max_miss: int = 5
    speed_window: int = 3
    turn_threshold_deg: float = 40.0
    commit_distance: float = 15.0
    zone_hysteresis: float = 0.5


@dataclass
class ControllerConfig:
    kp: float = 0.8
    ki: float = 0.1
    kd: float = 0.0
    lat_kp: float = 1.2
    lat_kd: float = 0.2
    windup: float = 2.0
    brake_deadband: float = 0.1
    lookahead_index: int = 2
    min_lookahead_dist: float = 0.5


@dataclass
class DatasetConfig:
    num_waypoints: int = 5
    waypoint_dt: float = 0.5
    sample_every: int = 5
    beta: float = 0.5


@dataclass
class BevConfig:
    width: int = 128
    height: int = 128
    resolution: float = 0.25
    rows_behind: int = 24


@dataclass
class PolicyConfig:
    fusion: str = "none"
    pool: int = 4
    conv_channels: tuple = (8, 16, 32)
    hidden: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    val_fraction: float = 0.1
    adapt_lr_scale: float = 0.3
    adapt_epochs: int = 20
    speed_scale: float = 0.1


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    bev: BevConfig = field(default_factory=BevConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def replace(self, **sections) -> "Config":
        """Return a copy with whole sections or ``section__key`` values swapped."""
        cfg = dataclasses.replace(self)
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec), **{name: value}))
            else:
                setattr(cfg, key, value)
        return cfg

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            parser[f.name] = {k.name: _fmt(getattr(section, k.name)) for k in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    @classmethod
    def from_ini(cls, text: str) -> "Config":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        cfg = cls()
        for f in dataclasses.fields(cfg):
            if not parser.has_section(f.name):
                continue
            section = getattr(cfg, f.name)
            updates = {}
            for k in dataclasses.fields(section):
                if k.name in parser[f.name]:
                    updates[k.name] = _parse(parser[f.name][k.name], getattr(section, k.name))
            unknown = set(parser[f.name]) - {k.name for k in dataclasses.fields(section)}
            if unknown:
                raise ValueError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            setattr(cfg, f.name, dataclasses.replace(section, **updates))
        return cfg

    @classmethod
    def load(cls, path) -> "Config":
        return cls.from_ini(Path(path).read_text())


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text.strip()
