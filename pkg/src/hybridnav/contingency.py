"""Contingency pilots: expert lateral-dodge rules and the A* planner with
its occupancy-row / obstacle-square construction.

Vocabulary note: within this module "right" means +y (the side the track
boundary example ends on) and the depth map's "left half" is columns 0-7,
which look toward -y. The retry ladder and branch pairings are implemented
verbatim even where a different pairing might look more natural.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .config import ContingencyConfig, CourseConfig
from .errors import ConfigError
from .world import wrap_angle

SQRT2 = math.sqrt(2.0)
_MOVES = ((1, 0, 1.0), (1, 1, SQRT2), (0, 1, 1.0), (-1, 1, SQRT2),
          (-1, 0, 1.0), (-1, -1, SQRT2), (0, -1, 1.0), (1, -1, SQRT2))


@dataclass
class ObstacleSquare:
    """Square proxy for a contiguous occupied block, in the sensing frame:
    near face at `near` meters ahead, centered `lateral` meters toward +y,
    side = depth = `side`, rotated with the aircraft heading at sensing."""

    near: float
    lateral: float
    side: float
    yaw: float


@dataclass
class WorldSquare:
    cx: float
    cy: float
    half: float
    yaw: float

    def distance(self, px: float, py: float) -> float:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = px - self.cx, py - self.cy
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        ox = max(abs(lx) - self.half, 0.0)
        oy = max(abs(ly) - self.half, 0.0)
        return math.hypot(ox, oy)

    def corners(self):
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        for ux, uy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            lx, ly = ux * self.half, uy * self.half
            yield (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)


@dataclass
class PlanningArena:
    """Track-aligned bounding rectangle, the forward field-of-view wedge,
    and the obstacle squares in world coordinates."""

    x0: float
    x_goal: float
    y_min: float
    y_max: float
    apex: tuple[float, float]
    heading: float
    half_angle: float
    squares: list[WorldSquare]
    inflation: float
    anchor: tuple[float, float]

    def to_dict(self) -> dict:
        return {"x0": self.x0, "x_goal": self.x_goal,
                "y_min": self.y_min, "y_max": self.y_max,
                "apex": list(self.apex), "heading": self.heading,
                "half_angle": self.half_angle, "inflation": self.inflation,
                "anchor": list(self.anchor),
                "squares": [[sq.cx, sq.cy, sq.half, sq.yaw] for sq in self.squares]}


def build_occupancy(reduced_m: np.ndarray, threshold: float = 10.0) -> np.ndarray:
    """Column j is occupied iff the middle three rows of the reduced map
    contain a cell closer than the threshold in that column."""
    reduced_m = np.asarray(reduced_m, dtype=np.float64)
    if reduced_m.shape != (9, 16):
        raise ConfigError(f"occupancy expects a 9x16 map, got {reduced_m.shape}")
    return reduced_m[3:6, :].min(axis=0) < threshold


def occupied_blocks(occ: np.ndarray) -> list[tuple[int, int]]:
    blocks, start = [], None
    for j, filled in enumerate(occ):
        if filled and start is None:
            start = j
        elif not filled and start is not None:
            blocks.append((start, j - 1))
            start = None
    if start is not None:
        blocks.append((start, len(occ) - 1))
    return blocks


def build_obstacle_map(occ: np.ndarray, reduced_m: np.ndarray, yaw: float,
                       hfov_deg: float = 90.0) -> list[ObstacleSquare]:
    """One square per contiguous occupied block.

    The camera's view is `2 d tan(hfov/2)` wide at range d, so one of the 16
    columns covers 1/16 of that; the square's side is the block length times
    the per-column width, its near face sits at the block's minimum range,
    and it is centered on the block's column span.
    """
    reduced_m = np.asarray(reduced_m, dtype=np.float64)
    half_tan = math.tan(math.radians(hfov_deg) / 2.0)
    squares = []
    for c0, c1 in occupied_blocks(np.asarray(occ, dtype=bool)):
        d = float(reduced_m[3:6, c0:c1 + 1].min())
        view_width = 2.0 * d * half_tan
        cell_w = view_width / 16.0
        side = (c1 - c0 + 1) * cell_w
        lateral = -view_width / 2.0 + (c0 + c1 + 1) / 2.0 * cell_w
        squares.append(ObstacleSquare(near=d, lateral=lateral, side=side, yaw=yaw))
    return squares


def _snap(value: float, grid: float) -> float:
    return round(value / grid) * grid if grid > 0 else value


def make_arena(squares: list[ObstacleSquare], pose, course: CourseConfig,
               cfg: ContingencyConfig, vehicle_radius: float,
               hfov_deg: float = 90.0) -> PlanningArena:
    """Arena rectangle spanning the track laterally, reaching from the
    (grid-snapped) vehicle position to beyond the farthest square corner."""
    px, py, yaw = pose
    world_squares = []
    c, s = math.cos(yaw), math.sin(yaw)
    for sq in squares:
        fx = sq.near + sq.side / 2.0
        fy = sq.lateral
        world_squares.append(WorldSquare(cx=px + c * fx - s * fy,
                                         cy=py + s * fx + c * fy,
                                         half=sq.side / 2.0, yaw=sq.yaw))
    ax = _snap(px, cfg.snap)
    ay = _snap(py, cfg.snap)
    depth = cfg.arena_min_depth
    for sq in world_squares:
        for corner in sq.corners():
            depth = max(depth, math.hypot(corner[0] - ax, corner[1] - ay))
    inflation = vehicle_radius if cfg.inflate_squares else 0.0
    return PlanningArena(
        x0=ax, x_goal=ax + depth,
        y_min=-course.half_width, y_max=course.half_width,
        apex=(ax, ay), heading=yaw,
        half_angle=math.radians(hfov_deg) / 2.0,
        squares=world_squares, inflation=inflation, anchor=(ax, ay))


def _point_ok(arena: PlanningArena, x: float, y: float) -> bool:
    if not arena.y_min <= y <= arena.y_max:
        return False
    if x < arena.x0 - 1e-9:
        return False
    rx, ry = x - arena.apex[0], y - arena.apex[1]
    if rx or ry:
        hl = arena.heading + arena.half_angle
        hr = arena.heading - arena.half_angle
        # inside the wedge: right of the left edge, left of the right edge
        if math.cos(hl) * ry - math.sin(hl) * rx > 1e-9:
            return False
        if math.cos(hr) * ry - math.sin(hr) * rx < -1e-9:
            return False
    for sq in arena.squares:
        if sq.distance(x, y) <= arena.inflation + 1e-12:
            return False
    return True


def astar_plan(arena: PlanningArena, cfg: ContingencyConfig,
               max_expansions: int = 200_000):
    """A* over the 8-move 1 m lattice aligned with the heading at plan time.

    Cardinal moves cost 1, diagonal moves sqrt(2). The heuristic is the
    straight-line distance to the goal edge. Returns (waypoints, explored
    count) with waypoints as an (K, 2) world array starting at the anchor,
    or (None, explored) when the frontier exhausts.
    """
    step = cfg.lattice_step
    fwd = (math.cos(arena.heading), math.sin(arena.heading))
    lat = (-fwd[1], fwd[0])

    def world_pos(node):
        i, j = node
        return (arena.anchor[0] + step * (i * fwd[0] + j * lat[0]),
                arena.anchor[1] + step * (i * fwd[1] + j * lat[1]))

    def heuristic(x):
        return max(0.0, arena.x_goal - x)

    start = (0, 0)
    sx, sy = world_pos(start)
    if not _point_ok(arena, sx, sy):
        return None, 0
    if sx >= arena.x_goal - 1e-9:
        return np.array([[sx, sy]]), 0

    g_best = {start: 0.0}
    parents = {start: None}
    counter = 0
    frontier = [(heuristic(sx), 0.0, counter, start)]
    explored = 0
    while frontier and explored < max_expansions:
        f, g, _, node = heapq.heappop(frontier)
        if g > g_best.get(node, math.inf) + 1e-12:
            continue
        explored += 1
        x, y = world_pos(node)
        if x >= arena.x_goal - 1e-9:
            path = []
            while node is not None:
                path.append(world_pos(node))
                node = parents[node]
            return np.array(path[::-1]), explored
        for di, dj, cost in _MOVES:
            nxt = (node[0] + di, node[1] + dj)
            ng = g + cost * step
            if ng >= g_best.get(nxt, math.inf) - 1e-12:
                continue
            nx, ny = world_pos(nxt)
            if not _point_ok(arena, nx, ny):
                continue
            g_best[nxt] = ng
            parents[nxt] = node
            counter += 1
            heapq.heappush(frontier, (ng + heuristic(nx), ng, counter, nxt))
    return None, explored


NO_OBSTACLE = "no-obstacle"
PATH_FOUND = "path"
NO_PATH = "no-path"


def procedure_a(world, channel, rng, cfg: ContingencyConfig,
                vehicle_radius: float):
    """Sense, build occupancy, and either report a clear view, a planned
    path, or that no route exists.

    Returns (status, waypoints-or-None, debug dict).
    """
    st = world.state
    _, meters = channel.reduced_depth(world, rng)
    occ = build_occupancy(meters, cfg.occupancy_range)
    debug = {"pose": [st.x, st.y, st.yaw], "occupancy": occ.astype(int).tolist()}
    if not occ.any():
        return NO_OBSTACLE, None, debug
    hfov = channel.cam.cfg.hfov_deg
    squares = build_obstacle_map(occ, meters, st.yaw, hfov)
    arena = make_arena(squares, (st.x, st.y, st.yaw), channel.course, cfg,
                       vehicle_radius, hfov)
    path, explored = astar_plan(arena, cfg)
    debug["arena"] = arena.to_dict()
    debug["explored"] = explored
    if path is None:
        return NO_PATH, None, debug
    debug["path"] = path.tolist()
    return PATH_FOUND, path, debug


class ContingencyPilot:
    """Motion primitives over one world, with a step budget and per-step
    logging hook. Every primitive returns False once the episode is terminal
    or the budget ran out, so runners unwind cleanly."""

    def __init__(self, world, cfg: ContingencyConfig, course: CourseConfig,
                 on_step=None):
        self.world = world
        self.cfg = cfg
        self.course = course
        self.on_step = on_step
        self.budget = cfg.step_budget

    def ok(self) -> bool:
        return not self.world.terminal and self.budget > 0

    def _step(self, cmd) -> bool:
        state, outcome = self.world.step(np.asarray(cmd, dtype=np.float64))
        self.budget -= 1
        if self.on_step is not None:
            self.on_step(cmd, state, outcome)
        return self.ok()

    def stop(self) -> bool:
        """Command zero velocity until nearly at rest."""
        while self.ok() and math.hypot(self.world.state.vx, self.world.state.vy) > 0.05:
            if not self._step((0.0, 0.0)):
                return False
        return self.ok()

    def rotate(self, yaw: float) -> bool:
        """In-place heading change (one step)."""
        if not self.ok():
            return False
        state, outcome = self.world.rotate_to(yaw)
        self.budget -= 1
        if self.on_step is not None:
            self.on_step(np.zeros(2), state, outcome)
        return self.ok()

    def _near_boundary_outward(self, cmd_y: float) -> bool:
        y = self.world.state.y
        margin = self.course.half_width - abs(y)
        return margin <= self.cfg.boundary_margin and cmd_y * y > 0.0

    def fly_to(self, target, speed=None, travel_cap=None, boundary_guard=True) -> bool:
        """Proportional waypoint tracking; stops at the target, the travel
        cap, or (optionally) the boundary margin."""
        speed = self.cfg.flight_speed if speed is None else speed
        traveled = 0.0
        while self.ok():
            st = self.world.state
            dx, dy = target[0] - st.x, target[1] - st.y
            dist = math.hypot(dx, dy)
            if dist <= 0.15 and math.hypot(st.vx, st.vy) <= 0.25:
                return True
            scale = min(speed, dist / 0.4) / max(dist, 1e-12)
            cmd = (dx * scale, dy * scale)
            if boundary_guard and self._near_boundary_outward(cmd[1]):
                return True
            px, py = st.x, st.y
            if not self._step(cmd):
                return False
            st = self.world.state
            traveled += math.hypot(st.x - px, st.y - py)
            if travel_cap is not None and traveled >= travel_cap:
                return True
        return False

    def fly_heading(self, distance: float, travel_cap=None) -> bool:
        st = self.world.state
        target = (st.x + distance * math.cos(st.yaw),
                  st.y + distance * math.sin(st.yaw))
        return self.fly_to(target, travel_cap=travel_cap)

    def fly_path(self, waypoints, travel_cap=None) -> bool:
        traveled_start = (self.world.state.x, self.world.state.y)
        cap = travel_cap
        for wp in waypoints[1:]:
            if not self.ok():
                return False
            if cap is not None:
                done = math.hypot(self.world.state.x - traveled_start[0],
                                  self.world.state.y - traveled_start[1])
                if done >= cap:
                    return True
                if not self.fly_to(wp, travel_cap=cap - done):
                    return False
            else:
                if not self.fly_to(wp):
                    return False
        return self.ok()

    def lateral_to(self, target_y: float) -> bool:
        """Slide sideways (open loop in x) until the lateral target."""
        speed = self.cfg.flight_speed
        while self.ok():
            st = self.world.state
            dy = target_y - st.y
            if abs(dy) <= 0.05 and abs(st.vy) <= 0.15:
                return True
            cmd_y = max(-speed, min(speed, dy / 0.4))
            if not self._step((0.0, cmd_y)):
                return False
        return False

    def reverse(self, distance: float) -> bool:
        """Back up along the body axis at the reverse speed."""
        st = self.world.state
        ox, oy = st.x, st.y
        heading = st.yaw
        while self.ok():
            st = self.world.state
            if math.hypot(st.x - ox, st.y - oy) >= distance:
                return True
            cmd = (-0.5 * math.cos(heading), -0.5 * math.sin(heading))
            if not self._step(cmd):
                return False
        return False


def run_expert_policy(pilot: ContingencyPilot, channel, rng) -> None:
    """Stop, sense once, and dodge laterally to 0.5 m inside a boundary.

    Branches follow the rulebook verbatim: on the +y ("right") side of the
    centerline, a clear left half of the middle rows sends the aircraft to
    the right boundary, otherwise to the left one; mirrored on the other
    side, with the exact centerline treated as the left side.
    """
    cfg = pilot.cfg
    if not pilot.stop():
        return
    _, meters = channel.reduced_depth(pilot.world, rng)
    mid = meters[3:6, :]
    y = pilot.world.state.y
    edge = pilot.course.half_width - cfg.boundary_margin
    if y > 0.0:
        left_clear = mid[:, :8].min() >= cfg.occupancy_range
        target = edge if left_clear else -edge
    else:
        right_clear = mid[:, 8:].min() >= cfg.occupancy_range
        target = -edge if right_clear else edge
    if pilot.lateral_to(target):
        pilot.stop()


def run_astar_policy(pilot: ContingencyPilot, channel, rng,
                     vehicle_radius: float, debug_sink: list | None = None) -> None:
    """The planner retry ladder.

    Stop and run the sense/plan procedure straight ahead; on failure retry
    rotated right then left by 30 degrees (restoring heading in between);
    after a full round of failures back up one meter and run the ladder one
    more time. A clear view advances 4 m; paths found while rotated are
    capped at 4 m of travel; every flight stops at the boundary margin.
    """
    cfg = pilot.cfg
    if not pilot.stop():
        return
    yaw0 = pilot.world.state.yaw
    rot = math.radians(cfg.rotate_deg)
    for round_idx in (0, 1):
        for dyaw in (0.0, rot, -rot):
            if not pilot.ok():
                return
            if dyaw and not pilot.rotate(wrap_angle(yaw0 + dyaw)):
                return
            status, path, debug = procedure_a(pilot.world, channel, rng, cfg,
                                              vehicle_radius)
            if debug_sink is not None:
                debug["attempt"] = {"round": round_idx, "dyaw_deg": math.degrees(dyaw)}
                debug["status"] = status
                debug_sink.append(debug)
            if status == NO_OBSTACLE:
                pilot.fly_heading(cfg.clear_advance, travel_cap=cfg.clear_advance)
                return
            if status == PATH_FOUND:
                cap = cfg.clear_advance if dyaw else None
                pilot.fly_path(path, travel_cap=cap)
                return
            if dyaw and not pilot.rotate(yaw0):
                return
        if round_idx == 0:
            if not (pilot.reverse(cfg.reverse_distance) and pilot.stop()):
                return
