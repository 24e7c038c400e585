"""Configuration dataclasses and the single structured config file.

Every tunable lives here with its default. A config file is a JSON object
whose top-level keys name the sections below; unknown keys are rejected so
typos fail loudly. `config_hash` gives a stable short digest used to stamp
evaluation reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


@dataclass
class CourseConfig:
    """Obstacle-course geometry. Lengths in meters."""

    length: float = 100.0
    half_width: float = 6.0
    obstacle_count: int = 6
    first_obstacle_x: float = 20.0
    spacing: float = 15.0
    obstacle_width: float = 2.0   # lateral extent
    obstacle_depth: float = 4.5   # along-course extent
    obstacle_height: float = 1.5
    seed: int = 0

    def validate(self):
        if self.obstacle_count > 0:
            last = self.first_obstacle_x + (self.obstacle_count - 1) * self.spacing
            if last > self.length:
                raise ConfigError(
                    f"obstacle row ends at {last} m, beyond course length {self.length} m"
                )
        if self.obstacle_width / 2.0 > self.half_width:
            raise ConfigError("obstacle footprint wider than the track")


@dataclass
class VehicleConfig:
    """Quadrotor disc model and the low-level velocity controller."""

    radius: float = 0.3
    tau: float = 0.3            # first-order velocity tracking constant, seconds
    dt: float = 0.1             # 10 Hz
    max_steps: int = 600
    forward_speed: float = 3.0
    reverse_speed: float = 0.5
    turn_deg: float = 15.0


@dataclass
class CameraConfig:
    """Forward-mounted pinhole camera."""

    hfov_deg: float = 90.0
    height: int = 144
    width: int = 256
    far: float = 100.0
    altitude: float = 0.75      # obstacle_height / 2 by default
    wall_height: float = 3.0


@dataclass
class NoiseConfig:
    """Observation noise. depth_sigma emulates learned-estimator error in
    normalized units (calibrated so mean |noise| matches the reference MAE)."""

    depth_sigma: float = 0.184
    kin_sigma: float = 0.0


@dataclass
class ObservationConfig:
    """Which depth source feeds the controllers.

    "noisy_oracle" (default): raycast truth, min-pooled, plus calibrated noise.
    "true_oracle": raycast truth with no noise.
    "depth_net": run the trained depth CNN on the rendered RGB frame.
    """

    source: str = "noisy_oracle"
    depth_checkpoint: str = ""

    def validate(self):
        if self.source not in ("noisy_oracle", "true_oracle", "depth_net"):
            raise ConfigError(f"unknown observation source {self.source!r}")


@dataclass
class PolicyConfig:
    """Dueling noisy Q-network and its training loop."""

    trunk_width: int = 128
    trunk_depth: int = 3
    stream_width: int = 128
    stream_depth: int = 2
    action_count: int = 4
    gamma: float = 0.99
    replay_capacity: int = 100_000
    batch_size: int = 32
    target_sync: int = 1000
    warmup_steps: int = 2000
    train_steps: int = 300_000
    learning_rate: float = 2.5e-4
    noisy_sigma0: float = 0.5
    penalty: float = 20.0       # collision / out-of-bounds reward penalty
    # Placeholders for extensions that are deliberately not implemented.
    prioritized_replay: bool = False
    double_q: bool = False
    multi_step: int = 1
    distributional_atoms: int = 0

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.prioritized_replay or self.double_q:
            raise ConfigError("prioritized replay / double-Q are placeholders, not implemented")
        if self.multi_step != 1 or self.distributional_atoms != 0:
            raise ConfigError("multi-step and distributional heads are placeholders, not implemented")


@dataclass
class DepthTrainConfig:
    """Depth CNN training schedule."""

    huber_delta: float = 1.0
    batch_size: int = 16
    epochs: int = 8
    learning_rate: float = 1e-3
    val_fraction: float = 0.1
    split_seed: int = 7


@dataclass
class CollisionConfig:
    """Collision-prediction MLP, labeling and batching."""

    horizon: int = 10
    threshold: float = 0.5
    positive_fraction: float = 0.25
    batch_size: int = 32
    learning_rate: float = 3e-4
    train_batches: int = 6000
    val_batches: int = 1000
    val_fraction: float = 0.1


@dataclass
class ContingencyConfig:
    """Expert-rules and A* pilot parameters."""

    occupancy_range: float = 10.0
    boundary_margin: float = 0.5
    flight_speed: float = 1.5
    step_budget: int = 200
    rotate_deg: float = 30.0
    clear_advance: float = 4.0
    reverse_distance: float = 1.0
    inflate_squares: bool = True   # False reproduces planning against raw squares
    arena_min_depth: float = 5.0
    lattice_step: float = 1.0
    snap: float = 0.5


@dataclass
class ArbiterConfig:
    """Switching gate between the learned policy and the contingency pilot."""

    threshold: float = 0.5
    contingency: str = "expert"   # expert | astar | none
    cooldown_steps: int = 0

    def validate(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("arbiter threshold must lie in (0, 1]")
        if self.contingency not in ("expert", "astar", "none"):
            raise ConfigError(f"unknown contingency kind {self.contingency!r}")


@dataclass
class EvalConfig:
    episodes: int = 300
    base_seed: int = 1000
    workers: int = 1


@dataclass
class HarnessConfig:
    """Top-level configuration: one section per subsystem."""

    course: CourseConfig = field(default_factory=CourseConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    observation: ObservationConfig = field(default_factory=ObservationConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    depth: DepthTrainConfig = field(default_factory=DepthTrainConfig)
    collision: CollisionConfig = field(default_factory=CollisionConfig)
    contingency: ContingencyConfig = field(default_factory=ContingencyConfig)
    arbiter: ArbiterConfig = field(default_factory=ArbiterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "HarnessConfig":
        self.course.validate()
        self.observation.validate()
        self.policy.validate()
        self.arbiter.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(HarnessConfig)}


def config_from_dict(data: dict) -> HarnessConfig:
    cfg = HarnessConfig()
    for section, values in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(target)}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section {section!r}")
            setattr(target, key, value)
    return cfg.validate()


def load_config(path: str | Path | None) -> HarnessConfig:
    """Load a JSON config file; None yields defaults."""
    if path is None:
        return HarnessConfig().validate()
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: HarnessConfig, path: str | Path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: HarnessConfig) -> str:
    """Stable 12-hex-digit digest of the full configuration."""
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]
