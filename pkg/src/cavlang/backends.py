"""Pluggable completion providers: a live HTTP chat-completions client,
deterministic scripted policies for closed-loop tests, and a record/replay
cache keyed by request hash."""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import requests

from .signals import Formulation
from .world import NearbyObject, Observation

Message = tuple[str, str]  # (role, text)


class BackendKind(str, Enum):
    HTTP_CHAT = "http_chat"
    SCRIPTED = "scripted"
    REPLAY = "replay"


class BackendError(RuntimeError):
    def __init__(self, backend_id: str, detail: str):
        super().__init__(f"[{backend_id}] {detail}")
        self.backend_id = backend_id


class BackendTimeout(BackendError):
    pass


class BackendHTTPError(BackendError):
    pass


class ReplayCacheMiss(BackendError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: BackendKind
    endpoint: str = ""
    model: str = ""
    credential_env: str = ""
    timeout_s: float = 30.0
    max_tokens: int = 1024
    temperature: float = 0.0
    policy: str = ""  # scripted
    cache_dir: str = ""  # replay source; also write-through recording target
    min_interval_s: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == BackendKind.HTTP_CHAT and not (self.endpoint and self.model):
            raise ValueError("http_chat backend requires endpoint and model")
        if self.kind == BackendKind.SCRIPTED and not self.policy:
            raise ValueError("scripted backend requires a policy name")
        if self.kind == BackendKind.REPLAY and not self.cache_dir:
            raise ValueError("replay backend requires a cache path")


@dataclass(frozen=True)
class TranscriptRecord:
    request_hash: str
    messages: tuple[Message, ...]
    image_digests: tuple[str, ...]
    completion: str
    latency_s: float
    backend_id: str
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "request_hash": self.request_hash,
            "messages": [list(m) for m in self.messages],
            "image_digests": list(self.image_digests),
            "completion": self.completion,
            "latency_s": self.latency_s,
            "backend_id": self.backend_id,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }


def request_hash(messages: list[Message], images: Optional[list[bytes]] = None,
                 model: str = "", temperature: float = 0.0,
                 max_tokens: int = 0) -> str:
    """Stable digest of the canonicalized request content."""
    canonical = json.dumps({
        "model": model,
        "messages": [[role, text] for role, text in messages],
        "images": [hashlib.sha256(img).hexdigest() for img in (images or [])],
        "temperature": temperature,
        "max_tokens": max_tokens,
    }, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ReceivedIntent:
    """Structured view of a fused packet handed to scripted policies."""

    sender_id: str
    intent_text: str
    right: float
    front: float


@dataclass
class CompletionContext:
    """Structured side-channel consumed by scripted backends only.

    Live HTTP backends see just the rendered prompt; scripted policies need
    the underlying observation to be deterministic without text parsing.
    """

    observation: Optional[Observation] = None
    stage: Optional[str] = None  # None = decision call
    formulation: Formulation = Formulation.CONTROL
    received: list[ReceivedIntent] = field(default_factory=list)
    cruise_speed: float = 8.0
    wheelbase: float = 2.5
    max_steer: float = 0.6
    horizon_s: float = 1.0


# ---------------------------------------------------------------------------
# Scripted policy


SLOW_DOWN_TOKEN = "slow down"
INTENT_REACT_RANGE_M = 30.0
LANE_HALF_WIDTH_M = 1.75


def _lead_object(obs: Observation, max_range: float = INTENT_REACT_RANGE_M
                 ) -> Optional[NearbyObject]:
    for obj in obs.nearby_objects:  # sorted by range
        if abs(obj.right) <= LANE_HALF_WIDTH_M and 0.0 < obj.front <= max_range:
            return obj
    return None


def _offset_sentence(right: float, front: float) -> str:
    lat = "right" if right >= 0 else "left"
    lon = "front" if front >= 0 else "rear"
    return (f"{abs(right):.3f} meters to my {lat} and "
            f"{abs(front):.3f} meters to my {lon}")


def _pursuit_steer(right: float, front: float, wheelbase: float,
                   max_steer: float) -> float:
    d_sq = right * right + front * front
    if d_sq < 1e-9:
        return 0.0
    curvature = 2.0 * right / d_sq
    steer = math.atan(wheelbase * curvature) / max_steer
    return min(max(steer, -1.0), 1.0)


def _signal_block(ctx: CompletionContext, steer: float, target_speed: float) -> str:
    """Render a well-formed signal block for the active formulation."""
    v0 = ctx.observation.ego.speed if ctx.observation else target_speed
    if ctx.formulation == Formulation.CONTROL:
        if target_speed >= v0:
            throttle, brake = min(1.0, (target_speed - v0 + 0.2) * 0.5), 0.0
        else:
            throttle, brake = 0.0, min(1.0, (v0 - target_speed) * 0.4 + 0.2)
        return f"steer: {steer:.3f}, throttle: {throttle:.3f}, brake: {brake:.3f}"
    if ctx.formulation == Formulation.CONTINUOUS:
        curvature = math.tan(steer * ctx.max_steer) / ctx.wheelbase
        return f"({target_speed:.3f} m/s, {curvature:.5f} 1/m, {ctx.horizon_s:.3f} s)"
    # discrete: constant-curvature arc sampled at 0.5 s, 4 points
    curvature = math.tan(steer * ctx.max_steer) / ctx.wheelbase
    decel = 3.0
    stop_time = v0 / decel if target_speed <= 0 else float("inf")
    points = []
    for i in range(1, 5):
        tau = 0.5 * i
        if target_speed > 0:
            arc = target_speed * tau
        else:
            te = min(tau, stop_time)
            arc = max(v0 * te - 0.5 * decel * te * te, 0.0)
        if abs(curvature) < 1e-9:
            points.append((arc, 0.0))
        else:
            points.append((math.sin(arc * curvature) / curvature,
                           (1.0 - math.cos(arc * curvature)) / curvature))
    return " ".join(f"({x:.3f}, {y:.3f})" for x, y in points)


def scripted_policy(ctx: CompletionContext) -> str:
    """Deterministic stand-in for a vision-language model.

    Stage calls emit canned descriptive text from the structured
    observation; the decision call reacts to received 'slow down' intents
    within 30 m ahead, then to its own lead hazard, then steers toward the
    goal. The emitted signal block always parses.
    """
    obs = ctx.observation
    if obs is None:
        raise ValueError("scripted policy needs a structured observation")

    if ctx.stage == "scene_description":
        if not obs.nearby_objects:
            return "Clear road, no nearby actors. Conditions are favorable for driving."
        counts: dict[str, int] = {}
        for obj in obs.nearby_objects:
            counts[obj.object_class] = counts.get(obj.object_class, 0) + 1
        listing = ", ".join(f"{n} {cls}" for cls, n in sorted(counts.items()))
        return f"Road scene with nearby traffic: {listing}. Visibility is good."

    if ctx.stage == "object_description":
        if not obs.nearby_objects:
            return "No interactive objects within sensing range."
        lines = []
        for i, obj in enumerate(obs.nearby_objects, start=1):
            lines.append(f"{i}. {obj.object_class} at {_offset_sentence(obj.right, obj.front)}, "
                         f"{obj.motion}.")
        return "\n".join(lines)

    if ctx.stage == "navigation_goal":
        return f"The target is {_offset_sentence(*obs.goal_offset)}."

    if ctx.stage == "future_intent":
        lead = _lead_object(obs)
        if lead is not None and lead.front < 10.0:
            return ("The car ahead is too close, slow down while keeping a "
                    "safe distance.")
        if lead is not None and (lead.motion == "stationary"
                                 or lead.relative_speed < -0.5):
            return (f"Obstacle ahead at {lead.front:.3f} m, slow down and "
                    f"prepare to stop.")
        return "Maintain speed and continue toward the target."

    # decision call
    goal_right, goal_front = obs.goal_offset
    steer = _pursuit_steer(goal_right, goal_front, ctx.wheelbase, ctx.max_steer)

    for intent in ctx.received:
        if (SLOW_DOWN_TOKEN in intent.intent_text.lower()
                and 0.0 < intent.front <= INTENT_REACT_RANGE_M):
            text = (f"Received intent 'slow down' from Agent {intent.sender_id} "
                    f"{intent.front:.3f} m ahead: braking to keep distance.")
            return f"{text}\n{_signal_block(ctx, steer=0.0, target_speed=0.0)}"

    lead = _lead_object(obs)
    if lead is not None:
        brake_gap = 10.0 + 0.5 * obs.ego.speed
        closing = lead.motion == "stationary" or lead.relative_speed < -0.5
        if lead.front < brake_gap and closing:
            text = (f"Hazard {lead.front:.3f} m ahead: braking.")
            return f"{text}\n{_signal_block(ctx, steer=0.0, target_speed=0.0)}"

    text = "Clear road: maintain speed toward the target."
    return f"{text}\n{_signal_block(ctx, steer=steer, target_speed=ctx.cruise_speed)}"


POLICIES = {
    "follow_route": scripted_policy,
}


# ---------------------------------------------------------------------------
# Registry


@dataclass
class CompletionResult:
    text: str
    latency_s: float
    record: TranscriptRecord


class BackendRegistry:
    """Resolves backend ids to providers and keeps the transcript trail.

    complete() is safe to call from several agent threads; transcript
    appends are serialized and per-backend rate limits respected.
    """

    def __init__(self) -> None:
        self._configs: dict[str, BackendConfig] = {}
        self._last_call: dict[str, float] = {}
        self._lock = threading.Lock()
        self.transcripts: list[TranscriptRecord] = []

    def register(self, cfg: BackendConfig) -> None:
        self._configs[cfg.backend_id] = cfg

    def config(self, backend_id: str) -> BackendConfig:
        if backend_id not in self._configs:
            raise BackendError(backend_id, "backend not registered")
        return self._configs[backend_id]

    def complete(self, backend_id: str, messages: list[Message],
                 images: Optional[list[bytes]] = None,
                 context: Optional[CompletionContext] = None) -> str:
        return self.complete_detailed(backend_id, messages, images, context).text

    def complete_detailed(self, backend_id: str, messages: list[Message],
                          images: Optional[list[bytes]] = None,
                          context: Optional[CompletionContext] = None
                          ) -> CompletionResult:
        cfg = self.config(backend_id)
        self._throttle(cfg)
        req_hash = request_hash(messages, images, model=cfg.model,
                                temperature=cfg.temperature,
                                max_tokens=cfg.max_tokens)

        started = time.monotonic()
        if cfg.kind == BackendKind.SCRIPTED:
            policy = POLICIES.get(cfg.policy)
            if policy is None:
                raise BackendError(backend_id, f"unknown policy {cfg.policy!r}")
            if context is None:
                raise BackendError(backend_id, "scripted backend needs a context")
            text = policy(context)
            latency = time.monotonic() - started
        elif cfg.kind == BackendKind.REPLAY:
            cached = self._load_cached(cfg, req_hash)
            if cached is None:
                raise ReplayCacheMiss(backend_id, f"no cached completion {req_hash}")
            text = cached["completion"]
            latency = float(cached.get("latency_s", 0.0))
        else:
            text = self._http_complete(cfg, messages, images)
            latency = time.monotonic() - started

        record = TranscriptRecord(
            request_hash=req_hash,
            messages=tuple(messages),
            image_digests=tuple(hashlib.sha256(i).hexdigest() for i in (images or [])),
            completion=text,
            latency_s=latency,
            backend_id=backend_id,
        )
        with self._lock:
            self.transcripts.append(record)
        if cfg.cache_dir and cfg.kind != BackendKind.REPLAY:
            self._store_cached(cfg, record)
        return CompletionResult(text=text, latency_s=latency, record=record)

    def _throttle(self, cfg: BackendConfig) -> None:
        if cfg.min_interval_s <= 0:
            return
        with self._lock:
            last = self._last_call.get(cfg.backend_id, 0.0)
            wait = cfg.min_interval_s - (time.monotonic() - last)
            self._last_call[cfg.backend_id] = time.monotonic() + max(wait, 0.0)
        if wait > 0:
            time.sleep(wait)

    @staticmethod
    def _cache_file(cfg: BackendConfig, req_hash: str) -> Path:
        return Path(cfg.cache_dir) / f"{req_hash}.json"

    def _load_cached(self, cfg: BackendConfig, req_hash: str) -> Optional[dict]:
        path = self._cache_file(cfg, req_hash)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _store_cached(self, cfg: BackendConfig, record: TranscriptRecord) -> None:
        path = self._cache_file(cfg, record.request_hash)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record.to_dict(), indent=1), encoding="utf-8")

    def _http_complete(self, cfg: BackendConfig, messages: list[Message],
                       images: Optional[list[bytes]]) -> str:
        headers = {"Content-Type": "application/json"}
        if cfg.credential_env:
            credential = os.environ.get(cfg.credential_env)
            if not credential:
                raise BackendError(cfg.backend_id,
                                   f"credential env var {cfg.credential_env} not set")
            headers["Authorization"] = f"Bearer {credential}"

        wire_messages = []
        for i, (role, text) in enumerate(messages):
            parts: list[dict] = [{"type": "text", "text": text}]
            if images and i == len(messages) - 1:
                for img in images:
                    b64 = base64.b64encode(img).decode("ascii")
                    parts.append({"type": "image_url",
                                  "image_url": {"url": f"data:image/jpeg;base64,{b64}"}})
            wire_messages.append({"role": role, "content": parts})

        body = {"model": cfg.model, "messages": wire_messages,
                "temperature": cfg.temperature, "max_tokens": cfg.max_tokens}
        try:
            resp = requests.post(cfg.endpoint, json=body, headers=headers,
                                 timeout=cfg.timeout_s)
        except requests.Timeout as exc:
            raise BackendTimeout(cfg.backend_id, f"timed out after {cfg.timeout_s}s") from exc
        except requests.RequestException as exc:
            raise BackendHTTPError(cfg.backend_id, str(exc)) from exc
        if resp.status_code // 100 != 2:
            raise BackendHTTPError(cfg.backend_id,
                                   f"HTTP {resp.status_code}: {resp.text[:200]}")
        payload = resp.json()
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendHTTPError(cfg.backend_id, "malformed completion payload") from exc
