"""Simulated V2V broadcast channel: range gating at send time, optional
latency and seeded loss, plus transmission-bandwidth metering."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Optional

from .langpack import EncodedMessage, measure
from .world import WorldSnapshot


@dataclass(frozen=True)
class ChannelConfig:
    range_m: float = 200.0
    latency_s: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.range_m <= 0:
            raise ValueError("range_m must be positive")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ValueError("drop_prob must be in [0, 1)")
        if self.latency_s < 0:
            raise ValueError("latency_s must be >= 0")


@dataclass(frozen=True)
class Envelope:
    sender_id: str
    receiver_id: str
    sent_at: float
    deliver_at: float
    message: EncodedMessage


@dataclass
class ChannelEvent:
    """One line of the channel log, also used for loss bookkeeping."""

    sent_at: float
    sender: str
    receiver: str
    size_bytes: int
    dropped: bool


@dataclass
class _AgentMeter:
    delivered: int = 0
    total_kb: float = 0.0


class Channel:
    """Broadcast fabric owned by the harness loop.

    Range is checked at send time; the drop draw is seeded so a given
    (config, traffic) pair always delivers the same set.
    """

    def __init__(self, cfg: ChannelConfig = ChannelConfig()):
        self.cfg = cfg
        self._rng = random.Random(cfg.seed)
        self._pending: dict[str, list[Envelope]] = {}
        self._meters: dict[str, _AgentMeter] = {}
        self.events: list[ChannelEvent] = []

    def register(self, agent_id: str) -> None:
        self._meters.setdefault(agent_id, _AgentMeter())
        self._pending.setdefault(agent_id, [])

    def broadcast(self, sender_id: str, msg: EncodedMessage,
                  snapshot: WorldSnapshot,
                  origin: Optional[tuple[float, float]] = None,
                  receivers: Optional[set[str]] = None,
                  range_override: Optional[float] = None) -> list[Envelope]:
        """Enqueue one envelope per other CAV in range that survives the
        drop draw. `origin` lets off-map senders (roadside units) transmit;
        `receivers` restricts delivery to a subset, still range-checked."""
        positions = snapshot.agent_positions()
        if origin is None:
            if sender_id not in positions:
                raise KeyError(f"unknown sender {sender_id!r} and no origin given")
            origin = positions[sender_id]
        self._meters.setdefault(sender_id, _AgentMeter())

        max_range = self.cfg.range_m if range_override is None else range_override
        size_kb = measure(msg)
        enqueued = []
        for receiver_id in sorted(positions):
            if receiver_id == sender_id:
                continue
            if receivers is not None and receiver_id not in receivers:
                continue
            if math.dist(origin, positions[receiver_id]) > max_range:
                continue
            dropped = (self.cfg.drop_prob > 0.0
                       and self._rng.random() < self.cfg.drop_prob)
            self.events.append(ChannelEvent(
                sent_at=snapshot.time, sender=sender_id, receiver=receiver_id,
                size_bytes=msg.size_bytes + len(msg.image_attachment or b""),
                dropped=dropped))
            if dropped:
                continue
            env = Envelope(sender_id=sender_id, receiver_id=receiver_id,
                           sent_at=snapshot.time,
                           deliver_at=snapshot.time + self.cfg.latency_s,
                           message=msg)
            self._pending.setdefault(receiver_id, []).append(env)
            meter = self._meters[sender_id]
            meter.delivered += 1
            meter.total_kb += size_kb
            enqueued.append(env)
        return enqueued

    def poll(self, receiver_id: str, now: float) -> list[EncodedMessage]:
        """Messages due by `now`, in sent order, each delivered once."""
        queue = self._pending.get(receiver_id, [])
        due = [e for e in queue if e.deliver_at <= now + 1e-12]
        self._pending[receiver_id] = [e for e in queue if e.deliver_at > now + 1e-12]
        due.sort(key=lambda e: (e.sent_at, e.sender_id))
        return [e.message for e in due]

    def bandwidth_report(self) -> dict[str, float]:
        """Per-agent and overall mean KB per delivered broadcast envelope.

        Agents that delivered nothing (non-collaborative runs) report 0.
        """
        report = {}
        total_kb = 0.0
        total_count = 0
        for agent_id, meter in sorted(self._meters.items()):
            report[agent_id] = (meter.total_kb / meter.delivered
                                if meter.delivered else 0.0)
            total_kb += meter.total_kb
            total_count += meter.delivered
        report["mean"] = total_kb / total_count if total_count else 0.0
        return report

    def event_records(self) -> list[dict]:
        return [dict(sent_at=e.sent_at, sender=e.sender, receiver=e.receiver,
                     size_bytes=e.size_bytes, dropped=e.dropped)
                for e in self.events]
