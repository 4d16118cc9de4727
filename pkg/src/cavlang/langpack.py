"""Natural-language packet codec: canonical encoding, exact byte
accounting, and the message-size budget with ordered section truncation.

The payload layout is bit-exact and documented by golden files in
fixtures/: one metadata sentence, then up to four labeled sections. Numeric
metadata uses shortest-repr rendering so a decode of an encode returns the
original floats exactly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

ENCODING = "utf-8"
TRUNCATION_MARKER = "…"  # single ellipsis char, 3 bytes in UTF-8

SECTION_LABELS = {
    "scene_desc": "It's scene description:",
    "objects_desc": "It's object description:",
    "goal_desc": "It's target description:",
    "intent_desc": "It's intent description:",
}
SECTION_ORDER = ("scene_desc", "objects_desc", "goal_desc", "intent_desc")


class MalformedMessageError(ValueError):
    """Payload is not a decodable packet."""


@dataclass(frozen=True)
class LangPackPacket:
    agent_id: str
    timestamp: float
    location: tuple[float, float]
    speed: float
    acceleration: float
    scene_desc: str = ""
    objects_desc: str = ""
    goal_desc: str = ""
    intent_desc: str = ""

    def __post_init__(self) -> None:
        if "\n" in self.agent_id:
            raise ValueError("agent_id must be a single line")
        if not all(math.isfinite(v) for v in
                   (*self.location, self.timestamp, self.speed, self.acceleration)):
            raise ValueError("packet metadata must be finite")

    def metadata_line(self) -> str:
        x, y = self.location
        return (f"Agent {self.agent_id}, located at: [{x!r}, {y!r}], "
                f"current speed: {self.speed!r}m/s, "
                f"acceleration: {self.acceleration!r}m/s^2, "
                f"timestamp: {self.timestamp!r}s.")

    def sections(self) -> list[tuple[str, str]]:
        return [(name, getattr(self, name)) for name in SECTION_ORDER]

    def body_text(self) -> str:
        """The labeled sections only, as rendered on the wire."""
        lines = []
        for name, text in self.sections():
            if text:
                lines.append(SECTION_LABELS[name])
                lines.append(text)
        return "\n".join(lines)


@dataclass(frozen=True)
class SizeBudget:
    max_bytes: int = 2048
    # least decision-critical first; goal text survives longest
    truncation_order: tuple[str, ...] = (
        "objects_desc", "scene_desc", "intent_desc", "goal_desc")


class MessageMode(str, Enum):
    LANGPACK = "langpack"
    IMAGE = "image"
    IMAGE_LANGPACK = "image+langpack"


@dataclass(frozen=True)
class EncodedMessage:
    payload: bytes
    size_bytes: int
    mode: MessageMode
    image_attachment: Optional[bytes] = None
    sender_id: str = ""

    def __post_init__(self) -> None:
        if self.size_bytes != len(self.payload):
            raise ValueError("size_bytes must equal payload length")
        if self.mode in (MessageMode.IMAGE, MessageMode.IMAGE_LANGPACK):
            if not self.image_attachment:
                raise ValueError(f"mode {self.mode.value} requires an image frame")
        if self.mode in (MessageMode.LANGPACK, MessageMode.IMAGE_LANGPACK):
            if not self.payload:
                raise ValueError(f"mode {self.mode.value} requires a payload")


def _render(meta: str, sections: list[tuple[str, str]]) -> bytes:
    lines = [meta]
    for name, text in sections:
        if text:
            lines.append(SECTION_LABELS[name])
            lines.append(text)
    return "\n".join(lines).encode(ENCODING)


def _truncate_utf8(text: str, max_bytes: int) -> str:
    raw = text.encode(ENCODING)[:max_bytes]
    return raw.decode(ENCODING, errors="ignore")


def encode(packet: LangPackPacket, budget: SizeBudget = SizeBudget()) -> EncodedMessage:
    """Render the canonical payload, truncating sections to fit the budget.

    Sections are cut in budget.truncation_order, each ending with a marker;
    a section whose text cannot fit at all is dropped. The metadata line is
    never truncated.
    """
    meta = packet.metadata_line()
    if len(meta.encode(ENCODING)) > budget.max_bytes:
        raise ValueError(
            f"budget {budget.max_bytes}B smaller than metadata line")

    texts = {name: text for name, text in packet.sections()}
    payload = _render(meta, [(n, texts[n]) for n in SECTION_ORDER])

    marker_bytes = len(TRUNCATION_MARKER.encode(ENCODING))
    for name in budget.truncation_order:
        if len(payload) <= budget.max_bytes:
            break
        if not texts[name]:
            continue
        over = len(payload) - budget.max_bytes
        text_len = len(texts[name].encode(ENCODING))
        keep = text_len - over - marker_bytes
        if keep > 0:
            texts[name] = _truncate_utf8(texts[name], keep) + TRUNCATION_MARKER
        else:
            texts[name] = ""
        payload = _render(meta, [(n, texts[n]) for n in SECTION_ORDER])

    if len(payload) > budget.max_bytes:  # all sections dropped, metadata fits
        raise AssertionError("truncation failed to reach budget")
    return EncodedMessage(payload=payload, size_bytes=len(payload),
                          mode=MessageMode.LANGPACK, sender_id=packet.agent_id)


_META_RE = re.compile(
    r"^Agent (?P<id>.*?), located at: \[(?P<x>[^,\]]+), (?P<y>[^,\]]+)\], "
    r"current speed: (?P<v>.+?)m/s, "
    r"acceleration: (?P<a>.+?)m/s\^2, "
    r"timestamp: (?P<t>.+?)s\.$")


def decode(payload: bytes) -> LangPackPacket:
    """Parse a payload produced by encode (possibly truncated)."""
    try:
        text = payload.decode(ENCODING)
    except UnicodeDecodeError as exc:
        raise MalformedMessageError("payload is not valid UTF-8") from exc
    lines = text.split("\n")
    m = _META_RE.match(lines[0]) if lines else None
    if m is None:
        raise MalformedMessageError("missing or malformed metadata line")
    try:
        fields = dict(
            agent_id=m.group("id"),
            location=(float(m.group("x")), float(m.group("y"))),
            speed=float(m.group("v")),
            acceleration=float(m.group("a")),
            timestamp=float(m.group("t")),
        )
    except ValueError as exc:
        raise MalformedMessageError("non-numeric metadata field") from exc

    label_to_name = {label: name for name, label in SECTION_LABELS.items()}
    texts: dict[str, list[str]] = {}
    current: Optional[str] = None
    for line in lines[1:]:
        if line in label_to_name:
            current = label_to_name[line]
            texts[current] = []
        elif current is not None:
            texts[current].append(line)
        else:
            raise MalformedMessageError(f"unexpected line outside sections: {line!r}")
    sections = {name: "\n".join(body) for name, body in texts.items()}
    try:
        return LangPackPacket(**fields, **sections)
    except ValueError as exc:
        raise MalformedMessageError(str(exc)) from exc


def measure(msg: EncodedMessage) -> float:
    """Total transmitted size in KB: (payload + attachment) / 1024, exact."""
    total = msg.size_bytes + len(msg.image_attachment or b"")
    return total / 1024.0


def make_message(mode: MessageMode, packet: Optional[LangPackPacket] = None,
                 image: Optional[bytes] = None,
                 budget: SizeBudget = SizeBudget()) -> EncodedMessage:
    """Assemble the outbound message for a given sharing mode."""
    if mode == MessageMode.IMAGE:
        if packet is None:
            raise ValueError("image mode still needs sender metadata")
        return EncodedMessage(payload=b"", size_bytes=0, mode=mode,
                              image_attachment=image, sender_id=packet.agent_id)
    if packet is None:
        raise ValueError(f"mode {mode.value} requires a packet")
    encoded = encode(packet, budget)
    if mode == MessageMode.LANGPACK:
        return encoded
    return EncodedMessage(payload=encoded.payload, size_bytes=encoded.size_bytes,
                          mode=MessageMode.IMAGE_LANGPACK, image_attachment=image,
                          sender_id=packet.agent_id)
