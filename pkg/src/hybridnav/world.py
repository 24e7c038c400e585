"""Deterministic 2D flight world.

Frame conventions: x runs along the course, y is lateral. Positive yaw is
counter-clockwise, so the Left action (a +15 degree command) steers toward
+y. The boundary walls sit at y = +/- half_width. The vehicle is a disc.

The low-level controller is first-order velocity tracking with time constant
tau; yaw relaxes toward the commanded-velocity heading at the same rate, but
only while the command has a forward (body-longitudinal) component, so
reverse and pure-lateral commands hold the current heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import CourseConfig, VehicleConfig
from .errors import ConfigError, EpisodeOver

ACTION_LEFT = 0
ACTION_FORWARD = 1
ACTION_RIGHT = 2
ACTION_REVERSE = 3
ACTION_NAMES = ("left", "forward", "right", "reverse")

RUNNING = "running"
COMPLETED = "completed"
COLLISION = "collision"
OUT_OF_BOUNDS = "out-of-bounds"
TIMEOUT = "timeout"

_COURSE_STREAM = 101


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass
class ObstacleBox:
    cx: float
    cy: float
    half_width: float   # lateral (y) half extent
    half_depth: float   # along-course (x) half extent
    yaw: float = 0.0


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    yaw: float = 0.0
    yaw_rate: float = 0.0
    yaw_acc: float = 0.0
    cmd: tuple[float, float] = (0.0, 0.0)


@dataclass
class StepOutcome:
    classification: str
    step_index: int

    @property
    def terminal(self) -> bool:
        return self.classification != RUNNING


def generate_course(cfg: CourseConfig) -> list[ObstacleBox]:
    """Place obstacle boxes at fixed x stations with seeded lateral centers.

    Lateral centers are uniform over the widest band that keeps each box
    fully inside the track.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, _COURSE_STREAM])
    hw = cfg.obstacle_width / 2.0
    hd = cfg.obstacle_depth / 2.0
    band = cfg.half_width - hw
    boxes = []
    for k in range(cfg.obstacle_count):
        cx = cfg.first_obstacle_x + k * cfg.spacing
        cy = float(rng.uniform(-band, band))
        boxes.append(ObstacleBox(cx=cx, cy=cy, half_width=hw, half_depth=hd))
    return boxes


def apply_action(action: int, state: VehicleState, cfg: VehicleConfig) -> np.ndarray:
    """Discrete action -> commanded world-frame velocity vector."""
    yaw = state.yaw
    if action == ACTION_REVERSE:
        speed, heading = -cfg.reverse_speed, yaw
    elif action == ACTION_LEFT:
        speed, heading = cfg.forward_speed, yaw + math.radians(cfg.turn_deg)
    elif action == ACTION_RIGHT:
        speed, heading = cfg.forward_speed, yaw - math.radians(cfg.turn_deg)
    elif action == ACTION_FORWARD:
        speed, heading = cfg.forward_speed, yaw
    else:
        raise ConfigError(f"unknown action index {action}")
    return np.array([speed * math.cos(heading), speed * math.sin(heading)])


def point_box_distance(px: float, py: float, box: ObstacleBox) -> float:
    """Euclidean distance from a point to an oriented box (0 inside)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = px - box.cx
    dy = py - box.cy
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    ox = max(abs(lx) - box.half_depth, 0.0)
    oy = max(abs(ly) - box.half_width, 0.0)
    return math.hypot(ox, oy)


class World:
    """One episode of the obstacle course. Single-threaded; run many worlds
    with independent seeds for parallelism."""

    def __init__(self, course: CourseConfig, vehicle: VehicleConfig,
                 obstacles: list[ObstacleBox] | None = None):
        self.course = course
        self.vehicle = vehicle
        self.obstacles = generate_course(course) if obstacles is None else list(obstacles)
        self.state = VehicleState()
        self.step_index = 0
        self.classification = RUNNING

    @property
    def terminal(self) -> bool:
        return self.classification != RUNNING

    def _classify(self) -> str:
        st = self.state
        for box in self.obstacles:
            if point_box_distance(st.x, st.y, box) <= self.vehicle.radius:
                return COLLISION
        if abs(st.y) > self.course.half_width:
            return OUT_OF_BOUNDS
        if st.x >= self.course.length:
            return COMPLETED
        if self.step_index >= self.vehicle.max_steps:
            return TIMEOUT
        return RUNNING

    def _advance(self, cmd: np.ndarray, yaw_override: float | None = None):
        if self.terminal:
            raise EpisodeOver(f"episode already terminal ({self.classification})")
        st = self.state
        dt, tau = self.vehicle.dt, self.vehicle.tau
        gain = dt / tau
        vx = st.vx + gain * (cmd[0] - st.vx)
        vy = st.vy + gain * (cmd[1] - st.vy)

        if yaw_override is not None:
            yaw = wrap_angle(yaw_override)
        else:
            longitudinal = cmd[0] * math.cos(st.yaw) + cmd[1] * math.sin(st.yaw)
            if longitudinal > 1e-9:
                target = math.atan2(cmd[1], cmd[0])
                yaw = wrap_angle(st.yaw + gain * wrap_angle(target - st.yaw))
            else:
                yaw = st.yaw

        yaw_rate = wrap_angle(yaw - st.yaw) / dt
        self.state = VehicleState(
            x=st.x + dt * vx,
            y=st.y + dt * vy,
            vx=vx, vy=vy,
            ax=(vx - st.vx) / dt,
            ay=(vy - st.vy) / dt,
            yaw=yaw,
            yaw_rate=yaw_rate,
            yaw_acc=(yaw_rate - st.yaw_rate) / dt,
            cmd=(float(cmd[0]), float(cmd[1])),
        )
        self.step_index += 1
        self.classification = self._classify()

    def step(self, cmd: np.ndarray) -> tuple[VehicleState, StepOutcome]:
        """Advance one 0.1 s step under a commanded velocity vector."""
        self._advance(np.asarray(cmd, dtype=np.float64))
        return self.state, StepOutcome(self.classification, self.step_index)

    def rotate_to(self, yaw: float) -> tuple[VehicleState, StepOutcome]:
        """In-place rotation: one step with zero velocity command and the yaw
        set directly (quadrotors yaw independently of translation)."""
        self._advance(np.zeros(2), yaw_override=yaw)
        return self.state, StepOutcome(self.classification, self.step_index)

    def kinematic_estimate(self, sigma: float = 0.0, rng=None) -> np.ndarray:
        """16-channel odometry vector.

        Order: lateral position; linear velocity xyz; linear acceleration
        xyz; roll/pitch/yaw; their rates; their second derivatives. The
        fixed-altitude planar constraint zeroes the z and roll/pitch
        channels. Gaussian noise of scale sigma is added per channel when a
        generator is supplied.
        """
        st = self.state
        est = np.array([
            st.y,
            st.vx, st.vy, 0.0,
            st.ax, st.ay, 0.0,
            0.0, 0.0, st.yaw,
            0.0, 0.0, st.yaw_rate,
            0.0, 0.0, st.yaw_acc,
        ])
        if sigma and rng is not None:
            est = est + rng.normal(0.0, sigma, size=16)
        return est


def fresh_world(course: CourseConfig, vehicle: VehicleConfig, seed: int) -> World:
    """Course from the given seed, vehicle at the 0 m mark on the centerline."""
    return World(replace(course, seed=int(seed)), vehicle)
