"""Driving-signal formulations: parsing model output into one of three
signal types and converting each into clamped actuation.

Signal block grammar (golden examples in fixtures/signal_blocks.txt):
  control:     labeled fields  ``steer: -0.1, throttle: 0.5, brake: 0.0``
  continuous:  triples         ``(speed m/s, curvature 1/m, duration s)``
  discrete:    pairs           ``(x, y)`` ego-frame waypoints, x forward,
               y right-positive, at fixed time spacing
The parser takes the last well-formed block in the completion, since
chain-of-thought text may contain intermediate numbers. Steer and
curvature are right-positive.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

from .world import VehicleLimits, VehicleState


class Formulation(str, Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"
    CONTROL = "control"


class ParseFailure(ValueError):
    """Completion text carried no well-formed signal block."""


@dataclass(frozen=True)
class ControlCommand:
    """Unit-scaled actuation: steer in [-1, 1] (+1 = full right),
    throttle and brake in [0, 1]."""

    steer: float = 0.0
    throttle: float = 0.0
    brake: float = 0.0

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.steer, self.throttle, self.brake)):
            raise ValueError("non-finite control command")


@dataclass(frozen=True)
class DiscreteTrajectory:
    """Ego-frame waypoints (x forward, y right) at fixed time spacing."""

    waypoints: tuple[tuple[float, float], ...]
    spacing_s: float = 0.5

    def __post_init__(self) -> None:
        if not self.waypoints:
            raise ValueError("trajectory needs at least one waypoint")
        for x, y in self.waypoints:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise ValueError("non-finite waypoint")

    @property
    def horizon_s(self) -> float:
        return self.spacing_s * len(self.waypoints)


@dataclass(frozen=True)
class TrajectorySegment:
    speed: float  # m/s
    curvature: float  # 1/m, right-positive
    duration: float  # s

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in (self.speed, self.curvature, self.duration)):
            raise ValueError("non-finite trajectory segment")
        if self.speed < 0:
            raise ValueError("segment speed must be >= 0")
        if self.duration <= 0:
            raise ValueError("segment duration must be > 0")


@dataclass(frozen=True)
class ContinuousTrajectory:
    segments: tuple[TrajectorySegment, ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("trajectory needs at least one segment")


DrivingSignal = Union[ControlCommand, DiscreteTrajectory, ContinuousTrajectory]

SAFE_STOP = ControlCommand(steer=0.0, throttle=0.0, brake=1.0)

_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_LABEL_RE = re.compile(
    rf"\b(steer|throttle|brake)\s*[:=]\s*({_FLOAT})", re.IGNORECASE)
_TRIPLE_RE = re.compile(
    rf"\(\s*({_FLOAT})(?:\s*m/s)?\s*,\s*({_FLOAT})(?:\s*1/m)?\s*,"
    rf"\s*({_FLOAT})(?:\s*s)?\s*\)")
_PAIR_RE = re.compile(rf"\(\s*({_FLOAT})\s*,\s*({_FLOAT})\s*\)")
_GAP_RE = re.compile(r"^[\s,;]*$")


def _last_tuple_block(text: str, pattern: re.Pattern) -> list[tuple[str, ...]]:
    """Group regex matches into runs separated only by whitespace/commas and
    return the last run."""
    matches = list(pattern.finditer(text))
    if not matches:
        return []
    blocks: list[list[re.Match]] = [[matches[0]]]
    for prev, cur in zip(matches, matches[1:]):
        if _GAP_RE.match(text[prev.end():cur.start()]):
            blocks[-1].append(cur)
        else:
            blocks.append([cur])
    return [m.groups() for m in blocks[-1]]


def parse_signal(text: str, formulation: Formulation) -> DrivingSignal:
    """Extract the last well-formed signal block from a completion."""
    if formulation == Formulation.CONTROL:
        values: dict[str, float] = {}
        for m in _LABEL_RE.finditer(text):
            values[m.group(1).lower()] = float(m.group(2))
        if set(values) != {"steer", "throttle", "brake"}:
            raise ParseFailure("no complete steer/throttle/brake block")
        return ControlCommand(**values)

    if formulation == Formulation.CONTINUOUS:
        triples = _last_tuple_block(text, _TRIPLE_RE)
        if not triples:
            raise ParseFailure("no (speed, curvature, duration) block")
        try:
            segments = tuple(TrajectorySegment(float(v), float(k), float(d))
                             for v, k, d in triples)
        except ValueError as exc:
            raise ParseFailure(str(exc)) from exc
        return ContinuousTrajectory(segments=segments)

    pairs = _last_tuple_block(text, _PAIR_RE)
    if len(pairs) < 2:
        raise ParseFailure("discrete signal needs at least 2 waypoints")
    return DiscreteTrajectory(
        waypoints=tuple((float(x), float(y)) for x, y in pairs))


def clamp_control(cmd: ControlCommand,
                  limits: Optional[VehicleLimits] = None) -> ControlCommand:
    """Component-wise clamp plus throttle/brake exclusivity (smaller zeroed,
    tie favors braking). Idempotent; unit ranges are limit-independent."""
    steer = min(max(cmd.steer, -1.0), 1.0)
    throttle = min(max(cmd.throttle, 0.0), 1.0)
    brake = min(max(cmd.brake, 0.0), 1.0)
    if throttle > 0.0 and brake > 0.0:
        if throttle > brake:
            brake = 0.0
        else:
            throttle = 0.0
    return ControlCommand(steer=steer, throttle=throttle, brake=brake)


def _longitudinal(target_speed: float, state: VehicleState,
                  limits: VehicleLimits, dt: float) -> tuple[float, float]:
    """Throttle/brake pair reaching target_speed within one step, saturated."""
    accel_needed = (target_speed - state.speed) / dt
    if accel_needed >= 0.0:
        return (min(accel_needed / limits.max_accel, 1.0), 0.0)
    return (0.0, min(-accel_needed / limits.max_decel, 1.0))


def rollout_continuous(traj: ContinuousTrajectory, state: VehicleState,
                       limits: VehicleLimits, dt: float,
                       elapsed: float = 0.0) -> ControlCommand:
    """Actuate the segment active at `elapsed` seconds into the trajectory.

    Steering is curvature feedforward, delta = atan(wheelbase * curvature),
    scaled to the unit range. An exhausted trajectory holds the last
    segment's speed at zero curvature.
    """
    segment = None
    t = elapsed
    for seg in traj.segments:
        if t < seg.duration:
            segment = seg
            break
        t -= seg.duration
    if segment is None:
        segment = TrajectorySegment(speed=traj.segments[-1].speed,
                                    curvature=0.0, duration=dt)

    delta = math.atan(limits.wheelbase * segment.curvature)
    steer = delta / limits.max_steer
    throttle, brake = _longitudinal(segment.speed, state, limits, dt)
    return clamp_control(ControlCommand(steer=steer, throttle=throttle,
                                        brake=brake), limits)


def track_discrete(traj: DiscreteTrajectory, state: VehicleState,
                   limits: VehicleLimits,
                   lookahead_min: float = 2.0) -> ControlCommand:
    """Pure-pursuit tracking of ego-frame waypoints.

    Waypoints must be expressed relative to the current pose (the caller
    re-projects between decisions). All waypoints behind the ego or at its
    position give the safe-stop command.
    """
    ahead = [(i, wp) for i, wp in enumerate(traj.waypoints)
             if wp[0] > 1e-6 and math.hypot(*wp) > 1e-6]
    if not ahead:
        return SAFE_STOP

    target_i, target = next(((i, wp) for i, wp in ahead
                             if math.hypot(*wp) >= lookahead_min), ahead[-1])
    x, y = target
    d_sq = x * x + y * y
    curvature = 2.0 * y / d_sq
    steer = math.atan(limits.wheelbase * curvature) / limits.max_steer

    # speed demanded by waypoint spacing around the target
    prev = traj.waypoints[target_i - 1] if target_i > 0 else (0.0, 0.0)
    seg_dist = math.dist(prev, target)
    target_speed = seg_dist / traj.spacing_s

    throttle, brake = _longitudinal(target_speed, state, limits, traj.spacing_s)
    return clamp_control(ControlCommand(steer=steer, throttle=throttle,
                                        brake=brake), limits)
