"""Receiver-side post-processing of incoming packets: coordinate
transformation into the ego frame, temporal alignment by dead reckoning,
and aggregation into the decision context text."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from .langpack import LangPackPacket
from .world import VehicleState


class ClockSkewError(ValueError):
    """A packet is stamped in the receiver's future."""


def to_ego_frame(receiver: VehicleState, world_point: tuple[float, float]) -> tuple[float, float]:
    """World point -> (right, front) meters in the receiver's frame.

    Right-positive lateral, front-positive longitudinal.
    """
    if not all(math.isfinite(v) for v in (*world_point, receiver.x, receiver.y,
                                          receiver.heading)):
        raise ValueError("non-finite input to to_ego_frame")
    dx = world_point[0] - receiver.x
    dy = world_point[1] - receiver.y
    cos_h = math.cos(receiver.heading)
    sin_h = math.sin(receiver.heading)
    return (dx * sin_h - dy * cos_h, dx * cos_h + dy * sin_h)


def from_ego_frame(receiver: VehicleState, offset: tuple[float, float]) -> tuple[float, float]:
    """Inverse of to_ego_frame: (right, front) -> world point."""
    right, front = offset
    cos_h = math.cos(receiver.heading)
    sin_h = math.sin(receiver.heading)
    return (receiver.x + front * cos_h + right * sin_h,
            receiver.y + front * sin_h - right * cos_h)


@dataclass(frozen=True)
class FusedPacket:
    packet: LangPackPacket
    sender_offset: tuple[float, float]  # (right, front) of the raw reported position
    sender_speed: float
    age: float  # s
    aligned_offset: tuple[float, float]  # (right, front) after dead reckoning

    @property
    def range_m(self) -> float:
        return math.hypot(*self.aligned_offset)


def align_time(packet: LangPackPacket, receiver: VehicleState,
               receiver_now: float,
               previous: Optional[LangPackPacket] = None) -> FusedPacket:
    """Dead-reckon the sender to the receiver's clock, then transform.

    Sender heading is not transmitted; motion direction is inferred from the
    sender's two most recent packets. With no prior packet (or no movement
    between packets) the position is used as-is.
    """
    age = receiver_now - packet.timestamp
    if age < -1e-9:
        raise ClockSkewError(
            f"packet from {packet.agent_id!r} stamped {-age:.3f}s in the future")
    age = max(age, 0.0)

    x, y = packet.location
    direction = None
    if previous is not None and previous.agent_id == packet.agent_id:
        px, py = previous.location
        step = math.hypot(x - px, y - py)
        if step > 1e-9:
            direction = ((x - px) / step, (y - py) / step)

    if direction is not None and packet.speed > 0.0:
        x += packet.speed * age * direction[0]
        y += packet.speed * age * direction[1]

    return FusedPacket(
        packet=packet,
        sender_offset=to_ego_frame(receiver, packet.location),
        sender_speed=packet.speed,
        age=age,
        aligned_offset=to_ego_frame(receiver, (x, y)),
    )


class PacketHistory:
    """Keeps the latest packet per sender to infer motion direction."""

    def __init__(self) -> None:
        self._last: dict[str, LangPackPacket] = {}

    def fuse(self, packet: LangPackPacket, receiver: VehicleState,
             receiver_now: float) -> FusedPacket:
        fused = align_time(packet, receiver, receiver_now,
                           previous=self._last.get(packet.agent_id))
        self._last[packet.agent_id] = packet
        return fused


def describe_offset(offset: tuple[float, float]) -> str:
    """Human phrasing of an ego-frame offset, e.g. '12.000 m ahead, 1.500 m left'."""
    right, front = offset
    longitudinal = "ahead" if front >= 0 else "behind"
    lateral = "right" if right >= 0 else "left"
    return f"{abs(front):.3f} m {longitudinal}, {abs(right):.3f} m {lateral}"


def aggregate(own_sections: str, fused: list[FusedPacket], ego_summary: str = "") -> str:
    """Merge own reasoning with received packets into one decision context.

    Own sections come first; received packets are rendered verbatim under a
    sender header with ego-relative position, nearest first.
    """
    parts = []
    if ego_summary:
        parts.append(ego_summary)
    if own_sections:
        parts.append(own_sections)
    for fp in sorted(fused, key=lambda f: f.range_m):
        header = (f"--- Message from Agent {fp.packet.agent_id} "
                  f"({describe_offset(fp.aligned_offset)}, age {fp.age:.3f} s) ---")
        parts.append(header)
        parts.append(fp.packet.body_text())
    return "\n".join(parts)
