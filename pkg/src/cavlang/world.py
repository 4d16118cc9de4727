"""Deterministic 2D kinematic world: vehicles, scripted actors, routes,
infraction detection, and observation synthesis.

Stands in for a full driving simulator at desk scale. Vehicles follow a
kinematic bicycle model with rectangular footprints; actors (background
vehicles, pedestrians, statics) move along scripted paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    from .signals import ControlCommand

TWO_PI = 2.0 * math.pi


def normalize_heading(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    h = theta % TWO_PI
    if h > math.pi:
        h -= TWO_PI
    return h


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class VehicleState:
    """World-frame pose and motion. Heading is radians CCW from +x."""

    x: float
    y: float
    heading: float
    speed: float
    acceleration: float = 0.0
    timestamp: float = 0.0

    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class VehicleLimits:
    wheelbase: float = 2.5
    max_steer: float = 0.6  # rad, front wheel
    max_accel: float = 3.0  # m/s^2
    max_decel: float = 6.0  # m/s^2, positive magnitude
    max_speed: float = 20.0  # m/s

    def __post_init__(self) -> None:
        if min(self.wheelbase, self.max_steer, self.max_accel,
               self.max_decel, self.max_speed) <= 0:
            raise ValueError("vehicle limits must be strictly positive")
        if self.max_steer >= math.pi / 2:
            raise ValueError("max_steer must be below pi/2")


@dataclass(frozen=True)
class RouteSpec:
    """Predefined route; completion is measured as arc-length fraction."""

    waypoints: tuple[tuple[float, float], ...]
    goal_tolerance: float = 2.0

    def __post_init__(self) -> None:
        if len(self.waypoints) < 2:
            raise ValueError("route needs at least 2 waypoints")
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if math.dist(a, b) == 0.0:
                raise ValueError("consecutive route waypoints must be distinct")

    @property
    def total_length(self) -> float:
        return sum(math.dist(a, b) for a, b in zip(self.waypoints, self.waypoints[1:]))


class InfractionKind(str, Enum):
    COLLISION_PEDESTRIAN = "collision_pedestrian"
    COLLISION_VEHICLE = "collision_vehicle"
    COLLISION_STATIC = "collision_static"
    RED_LIGHT = "red_light"
    LANE_INVASION = "lane_invasion"


# Penalty factors per kind; composed multiplicatively into the infraction
# penalty. Overridable per scenario.
DEFAULT_COEFFICIENTS: dict[InfractionKind, float] = {
    InfractionKind.COLLISION_PEDESTRIAN: 0.50,
    InfractionKind.COLLISION_VEHICLE: 0.60,
    InfractionKind.COLLISION_STATIC: 0.65,
    InfractionKind.RED_LIGHT: 0.70,
    InfractionKind.LANE_INVASION: 0.90,
}


@dataclass(frozen=True)
class InfractionEvent:
    kind: InfractionKind
    coefficient: float
    timestamp: float
    agent_id: str
    counterpart: str = ""

    def __post_init__(self) -> None:
        if not (0.0 < self.coefficient <= 1.0):
            raise ValueError("infraction coefficient must be in (0, 1]")


@dataclass(frozen=True)
class NearbyObject:
    object_class: str  # "vehicle" | "pedestrian" | "static" | "cav"
    right: float  # m, ego frame, right-positive
    front: float  # m, ego frame, front-positive
    relative_speed: float  # m/s, other minus ego
    motion: str  # "moving" | "stationary"

    @property
    def range_m(self) -> float:
        return math.hypot(self.right, self.front)


@dataclass(frozen=True)
class Observation:
    ego: VehicleState
    nearby_objects: tuple[NearbyObject, ...]
    goal_offset: tuple[float, float]  # (right, front) meters in ego frame
    sim_time: float
    image_ref: Optional[str] = None


# ---------------------------------------------------------------------------
# Kinematics


def step_vehicle(state: VehicleState, cmd: "ControlCommand", dt: float,
                 limits: VehicleLimits) -> VehicleState:
    """Advance one physics step with the kinematic bicycle model.

    Steer command is right-positive (+1 = full right); internally the wheel
    angle is negated because heading is CCW-positive.
    """
    if not _finite(state.x, state.y, state.heading, state.speed, dt,
                   cmd.steer, cmd.throttle, cmd.brake):
        raise ValueError("non-finite input to step_vehicle")
    if not (0.0 < dt <= 0.1):
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")

    delta = -cmd.steer * limits.max_steer
    accel = cmd.throttle * limits.max_accel - cmd.brake * limits.max_decel

    v = state.speed
    x = state.x + v * math.cos(state.heading) * dt
    y = state.y + v * math.sin(state.heading) * dt
    heading = normalize_heading(
        state.heading + (v / limits.wheelbase) * math.tan(delta) * dt)
    v_new = min(max(v + accel * dt, 0.0), limits.max_speed)

    return VehicleState(
        x=x, y=y, heading=heading, speed=v_new,
        acceleration=(v_new - v) / dt,
        timestamp=state.timestamp + dt,
    )


# ---------------------------------------------------------------------------
# Geometry helpers


def to_ego(ego: VehicleState, point: tuple[float, float]) -> tuple[float, float]:
    """World point -> (right, front) in the ego frame."""
    dx = point[0] - ego.x
    dy = point[1] - ego.y
    cos_h = math.cos(ego.heading)
    sin_h = math.sin(ego.heading)
    front = dx * cos_h + dy * sin_h
    right = dx * sin_h - dy * cos_h
    return (right, front)


def rect_corners(x: float, y: float, heading: float, length: float,
                 width: float) -> list[tuple[float, float]]:
    hl, hw = length / 2.0, width / 2.0
    cos_h, sin_h = math.cos(heading), math.sin(heading)
    corners = []
    for lx, wy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)):
        corners.append((x + lx * cos_h - wy * sin_h,
                        y + lx * sin_h + wy * cos_h))
    return corners


def rects_overlap(a: list[tuple[float, float]], b: list[tuple[float, float]]) -> bool:
    """Separating-axis test for two oriented rectangles (corner lists)."""
    for rect in (a, b):
        for i in (0, 1):
            ax = rect[i + 1][0] - rect[i][0]
            ay = rect[i + 1][1] - rect[i][1]
            # axis normal to this edge
            nx, ny = -ay, ax
            pa = [c[0] * nx + c[1] * ny for c in a]
            pb = [c[0] * nx + c[1] * ny for c in b]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


def segments_intersect(p1: tuple[float, float], p2: tuple[float, float],
                       q1: tuple[float, float], q2: tuple[float, float]) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if v > 1e-12:
            return 1
        if v < -1e-12:
            return -1
        return 0

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    return False


def _project_point_to_segment(p, a, b) -> tuple[float, float]:
    """Return (t in [0,1], squared distance) of p projected onto segment ab."""
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    seg_sq = vx * vx + vy * vy
    t = ((p[0] - ax) * vx + (p[1] - ay) * vy) / seg_sq
    t = min(max(t, 0.0), 1.0)
    cx, cy = ax + t * vx, ay + t * vy
    return t, (p[0] - cx) ** 2 + (p[1] - cy) ** 2


# ---------------------------------------------------------------------------
# Route progress


def route_progress(state: VehicleState, route: RouteSpec) -> float:
    """Percent of route arc length traversed, in [0, 100].

    Returns 100 only when the pose is within goal_tolerance of the final
    waypoint; otherwise progress backs off by the remaining straight-line
    distance to the goal.
    """
    p = (state.x, state.y)
    wps = route.waypoints
    total = route.total_length

    best_arc = 0.0
    best_d2 = float("inf")
    cum = 0.0
    for a, b in zip(wps, wps[1:]):
        t, d2 = _project_point_to_segment(p, a, b)
        seg_len = math.dist(a, b)
        if d2 < best_d2 - 1e-12:
            best_d2 = d2
            best_arc = cum + t * seg_len
        cum += seg_len

    dist_goal = math.dist(p, wps[-1])
    if best_arc >= total - 1e-9:
        if dist_goal <= route.goal_tolerance:
            return 100.0
        best_arc = max(0.0, total - dist_goal)
    return 100.0 * best_arc / total


class RouteTracker:
    """Per-episode monotone route progress: progress is never revoked."""

    def __init__(self, route: RouteSpec):
        self.route = route
        self.best = 0.0

    def update(self, state: VehicleState) -> float:
        self.best = max(self.best, route_progress(state, self.route))
        return self.best

    @property
    def complete(self) -> bool:
        return self.best >= 100.0

    def active_target(self, state: VehicleState) -> tuple[float, float]:
        """Next unreached waypoint (by arc-length), else the final one."""
        frac = self.best / 100.0
        arc = frac * self.route.total_length
        cum = 0.0
        for a, b in zip(self.route.waypoints, self.route.waypoints[1:]):
            cum += math.dist(a, b)
            if cum > arc + 1e-6:
                return b
        return self.route.waypoints[-1]


# ---------------------------------------------------------------------------
# Map elements


@dataclass(frozen=True)
class LaneBoundary:
    """Polyline boundary with a side vehicles must keep to.

    keep="left" means valid positions are on the left of the polyline's
    direction of travel (CCW cross product positive).
    """

    points: tuple[tuple[float, float], ...]
    keep: str = "left"

    def violates(self, p: tuple[float, float]) -> bool:
        best_d2 = float("inf")
        best_side = 0.0
        for a, b in zip(self.points, self.points[1:]):
            _, d2 = _project_point_to_segment(p, a, b)
            if d2 < best_d2:
                best_d2 = d2
                cross = ((b[0] - a[0]) * (p[1] - a[1])
                         - (b[1] - a[1]) * (p[0] - a[0]))
                best_side = cross
        if self.keep == "left":
            return best_side < 0.0
        return best_side > 0.0


@dataclass(frozen=True)
class TrafficLight:
    """Stop line plus a repeating red/green phase timeline."""

    light_id: str
    stop_line: tuple[tuple[float, float], tuple[float, float]]
    phases: tuple[tuple[float, float, str], ...]  # (start, end, color)
    period: float = 0.0  # 0 = timeline does not repeat

    def color_at(self, t: float) -> str:
        if self.period > 0:
            t = t % self.period
        for start, end, color in self.phases:
            if start <= t < end:
                return color
        return "green"


@dataclass(frozen=True)
class WorldMap:
    lane_boundaries: tuple[LaneBoundary, ...] = ()
    traffic_lights: tuple[TrafficLight, ...] = ()


# ---------------------------------------------------------------------------
# Actors and world


@dataclass
class ScriptedActor:
    """Background traffic participant following a fixed path.

    speed_profile is piecewise constant: [(t_from, speed), ...] sorted by
    time. Statics simply have no path.
    """

    actor_id: str
    kind: str  # "vehicle" | "pedestrian" | "static"
    state: VehicleState
    length: float = 4.5
    width: float = 2.0
    path: tuple[tuple[float, float], ...] = ()
    speed_profile: tuple[tuple[float, float], ...] = ()
    _arc: float = field(default=0.0, repr=False)

    def speed_at(self, t: float) -> float:
        v = self.state.speed
        for t_from, speed in self.speed_profile:
            if t >= t_from:
                v = speed
        return v

    def advance(self, t: float, dt: float) -> None:
        if self.kind == "static" or len(self.path) < 2:
            self.state = replace(self.state, timestamp=t + dt)
            return
        v = self.speed_at(t)
        self._arc += v * dt
        x, y, heading = _pose_along_path(self.path, self._arc, self.state.heading)
        self.state = VehicleState(x=x, y=y, heading=heading, speed=v,
                                  acceleration=0.0, timestamp=t + dt)


def _pose_along_path(path, arc: float, fallback_heading: float):
    cum = 0.0
    for a, b in zip(path, path[1:]):
        seg = math.dist(a, b)
        if cum + seg >= arc:
            t = (arc - cum) / seg
            heading = math.atan2(b[1] - a[1], b[0] - a[0])
            return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), heading)
        cum += seg
    end = path[-1]
    prev = path[-2]
    return (end[0], end[1], math.atan2(end[1] - prev[1], end[0] - prev[0]))


@dataclass
class Agent:
    """A connected autonomous vehicle under harness control."""

    agent_id: str
    state: VehicleState
    limits: VehicleLimits
    route: RouteSpec
    length: float = 4.5
    width: float = 2.0
    sensing_range: Optional[float] = None  # None = world default
    cruise_speed: Optional[float] = None  # None = scenario default
    tracker: RouteTracker = field(init=False)

    def __post_init__(self) -> None:
        self.tracker = RouteTracker(self.route)
        self.tracker.update(self.state)


@dataclass(frozen=True)
class BodySnapshot:
    body_id: str
    object_class: str  # "cav" | "vehicle" | "pedestrian" | "static"
    state: VehicleState
    length: float
    width: float

    def corners(self) -> list[tuple[float, float]]:
        return rect_corners(self.state.x, self.state.y, self.state.heading,
                            self.length, self.width)


@dataclass(frozen=True)
class WorldSnapshot:
    """Immutable view of the world, safe to hand to agents and the UI feed."""

    time: float
    bodies: tuple[BodySnapshot, ...]
    world_map: WorldMap

    def body(self, body_id: str) -> BodySnapshot:
        for b in self.bodies:
            if b.body_id == body_id:
                return b
        raise KeyError(f"unknown body {body_id!r}")

    def agent_positions(self) -> dict[str, tuple[float, float]]:
        return {b.body_id: (b.state.x, b.state.y)
                for b in self.bodies if b.object_class == "cav"}


class World:
    """Owns all moving bodies and advances them at the physics rate."""

    def __init__(self, agents: list[Agent], actors: list[ScriptedActor],
                 world_map: WorldMap = WorldMap(), sensing_range: float = 50.0,
                 frame_assets: Optional[dict[str, str]] = None):
        ids = [a.agent_id for a in agents] + [a.actor_id for a in actors]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate body ids in scenario")
        self.agents = {a.agent_id: a for a in agents}
        self.actors = {a.actor_id: a for a in actors}
        self.world_map = world_map
        self.sensing_range = sensing_range
        self.frame_assets = frame_assets or {}
        self.time = 0.0

    def step(self, commands: dict[str, "ControlCommand"], dt: float) -> None:
        for agent_id, agent in self.agents.items():
            cmd = commands[agent_id]
            agent.state = step_vehicle(agent.state, cmd, dt, agent.limits)
            agent.tracker.update(agent.state)
        for actor in self.actors.values():
            actor.advance(self.time, dt)
        self.time += dt

    def snapshot(self) -> WorldSnapshot:
        bodies = [BodySnapshot(a.agent_id, "cav", a.state, a.length, a.width)
                  for a in self.agents.values()]
        bodies += [BodySnapshot(a.actor_id, a.kind, a.state, a.length, a.width)
                   for a in self.actors.values()]
        return WorldSnapshot(time=self.time, bodies=tuple(bodies),
                             world_map=self.world_map)

    def make_observation(self, agent_id: str) -> Observation:
        if agent_id not in self.agents:
            raise KeyError(f"unknown agent {agent_id!r}")
        agent = self.agents[agent_id]
        ego = agent.state
        sensing = agent.sensing_range if agent.sensing_range is not None else self.sensing_range

        nearby = []
        for body in self.snapshot().bodies:
            if body.body_id == agent_id:
                continue
            right, front = to_ego(ego, (body.state.x, body.state.y))
            rng = math.hypot(right, front)
            if rng > sensing:
                continue
            nearby.append(NearbyObject(
                object_class=body.object_class,
                right=right, front=front,
                relative_speed=body.state.speed - ego.speed,
                motion="stationary" if body.state.speed < 0.1 else "moving",
            ))
        nearby.sort(key=lambda o: o.range_m)

        goal = agent.tracker.active_target(ego)
        return Observation(
            ego=ego,
            nearby_objects=tuple(nearby),
            goal_offset=to_ego(ego, goal),
            sim_time=self.time,
            image_ref=self.frame_assets.get(agent_id),
        )


# ---------------------------------------------------------------------------
# Infraction detection


class InfractionMonitor:
    """Detects infractions per step with contact-episode deduplication.

    A contact episode is a contiguous overlap interval; each pair reports
    at most one event per episode. CAV-CAV collisions are attributed to the
    faster vehicle at first contact (tie: lower id).
    """

    _COLLISION_KIND = {
        "pedestrian": InfractionKind.COLLISION_PEDESTRIAN,
        "vehicle": InfractionKind.COLLISION_VEHICLE,
        "cav": InfractionKind.COLLISION_VEHICLE,
        "static": InfractionKind.COLLISION_STATIC,
    }

    def __init__(self, coefficients: Optional[dict[InfractionKind, float]] = None):
        self.coefficients = dict(DEFAULT_COEFFICIENTS)
        if coefficients:
            self.coefficients.update(coefficients)
        self._active_contacts: set[tuple[str, str]] = set()
        self._active_invasions: set[tuple[str, int]] = set()
        self._prev_positions: dict[str, tuple[float, float]] = {}

    def detect(self, snapshot: WorldSnapshot) -> list[InfractionEvent]:
        for body in snapshot.bodies:
            if not _finite(body.state.x, body.state.y, body.state.heading):
                raise ValueError(f"non-finite pose for {body.body_id!r}")
        events: list[InfractionEvent] = []
        events += self._collisions(snapshot)
        events += self._lane_invasions(snapshot)
        events += self._red_lights(snapshot)
        self._prev_positions = snapshot.agent_positions()
        return events

    def _collisions(self, snap: WorldSnapshot) -> list[InfractionEvent]:
        events = []
        cavs = [b for b in snap.bodies if b.object_class == "cav"]
        others = [b for b in snap.bodies if b.object_class != "cav"]

        def check(a: BodySnapshot, b: BodySnapshot) -> None:
            key = tuple(sorted((a.body_id, b.body_id)))
            if not rects_overlap(a.corners(), b.corners()):
                self._active_contacts.discard(key)
                return
            if key in self._active_contacts:
                return
            self._active_contacts.add(key)
            if a.object_class == "cav" and b.object_class == "cav":
                agent = a if (a.state.speed, b.body_id) > (b.state.speed, a.body_id) else b
                other = b if agent is a else a
            else:
                agent, other = (a, b) if a.object_class == "cav" else (b, a)
            kind = self._COLLISION_KIND[other.object_class]
            events.append(InfractionEvent(
                kind=kind, coefficient=self.coefficients[kind],
                timestamp=snap.time, agent_id=agent.body_id,
                counterpart=other.body_id))

        for i, a in enumerate(cavs):
            for b in cavs[i + 1:]:
                check(a, b)
            for b in others:
                check(a, b)
        return events

    def _lane_invasions(self, snap: WorldSnapshot) -> list[InfractionEvent]:
        events = []
        for body in snap.bodies:
            if body.object_class != "cav":
                continue
            p = (body.state.x, body.state.y)
            for i, boundary in enumerate(snap.world_map.lane_boundaries):
                key = (body.body_id, i)
                if boundary.violates(p):
                    if key not in self._active_invasions:
                        self._active_invasions.add(key)
                        kind = InfractionKind.LANE_INVASION
                        events.append(InfractionEvent(
                            kind=kind, coefficient=self.coefficients[kind],
                            timestamp=snap.time, agent_id=body.body_id))
                else:
                    self._active_invasions.discard(key)
        return events

    def _red_lights(self, snap: WorldSnapshot) -> list[InfractionEvent]:
        events = []
        for body in snap.bodies:
            if body.object_class != "cav":
                continue
            prev = self._prev_positions.get(body.body_id)
            if prev is None:
                continue
            cur = (body.state.x, body.state.y)
            for light in snap.world_map.traffic_lights:
                if light.color_at(snap.time) != "red":
                    continue
                if segments_intersect(prev, cur, *light.stop_line):
                    kind = InfractionKind.RED_LIGHT
                    events.append(InfractionEvent(
                        kind=kind, coefficient=self.coefficients[kind],
                        timestamp=snap.time, agent_id=body.body_id,
                        counterpart=light.light_id))
        return events
