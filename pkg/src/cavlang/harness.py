"""Closed-loop harness: per-tick agent pipelines, message exchange,
decision actuation at the physics rate, episode termination, experiment
matrices, and results persistence."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import yaml

from .backends import (BackendConfig, BackendError, BackendKind,
                       BackendRegistry, CompletionContext, ReceivedIntent)
from .comms import Channel, ChannelConfig
from .fusion import FusedPacket, PacketHistory, from_ego_frame, to_ego_frame
from .langpack import (LangPackPacket, MalformedMessageError, MessageMode,
                       SizeBudget, decode, make_message)
from .m3cot import (M3CoTResult, PromptStyle, StageAssignment, StageError,
                    build_decision_prompt, run_pipeline)
from .metrics import EpisodeLog, RunMetrics, finalize, format_table
from .scenario import Scenario, load_scenario
from .signals import (SAFE_STOP, ContinuousTrajectory, ControlCommand,
                      DiscreteTrajectory, DrivingSignal, Formulation,
                      ParseFailure, clamp_control, parse_signal,
                      rollout_continuous, track_discrete)
from .world import Agent, InfractionEvent
from . import feed as feedmod

MESSAGE_MODE_NONE = "none"
MESSAGE_MODES = (MESSAGE_MODE_NONE, "image", "langpack", "image+langpack")


@dataclass
class RunConfig:
    scenario_path: Path
    style: PromptStyle = PromptStyle.CONCISE_COT
    formulation: Formulation = Formulation.CONTINUOUS
    message_mode: str = "langpack"
    backend_config_path: Optional[Path] = None
    default_backend: str = "scripted"
    agent_backends: dict[str, str] = field(default_factory=dict)
    stage_backends: dict[str, str] = field(default_factory=dict)
    decision_backend: Optional[str] = None
    seed: int = 0
    physics_dt: Optional[float] = None  # None = scenario value
    decision_tick: Optional[float] = None
    timeout_s: Optional[float] = None
    channel: Optional[ChannelConfig] = None
    budget: SizeBudget = field(default_factory=SizeBudget)
    out_dir: Optional[Path] = None
    feed_port: Optional[int] = None
    allow_live: bool = False
    record_dir: Optional[Path] = None  # write-through transcript cache
    replay_dir: Optional[Path] = None  # run every backend from this cache
    operator_range_exempt: bool = False
    label: str = ""

    def __post_init__(self) -> None:
        if self.message_mode not in MESSAGE_MODES:
            raise ValueError(f"message_mode must be one of {MESSAGE_MODES}")


def default_registry() -> BackendRegistry:
    registry = BackendRegistry()
    registry.register(BackendConfig(backend_id="scripted",
                                    kind=BackendKind.SCRIPTED,
                                    policy="follow_route"))
    return registry


def load_backend_setup(path: Optional[Path]) -> tuple[BackendRegistry, str, dict]:
    """Read a backend config file; returns (registry, default id, per-agent
    assignment overrides)."""
    if path is None:
        return default_registry(), "scripted", {}
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    registry = BackendRegistry()
    for b in raw.get("backends", []):
        registry.register(BackendConfig(
            backend_id=str(b["id"]),
            kind=BackendKind(b["kind"]),
            endpoint=str(b.get("endpoint", "")),
            model=str(b.get("model", "")),
            credential_env=str(b.get("credential_env", "")),
            timeout_s=float(b.get("timeout_s", 30.0)),
            max_tokens=int(b.get("max_tokens", 1024)),
            temperature=float(b.get("temperature", 0.0)),
            policy=str(b.get("policy", "")),
            cache_dir=str(b.get("cache_dir", "")),
            min_interval_s=float(b.get("min_interval_s", 0.0)),
        ))
    return registry, str(raw.get("default", "scripted")), raw.get("assignments", {})


def _registry_with_cache(registry: BackendRegistry, cache_dir: Path) -> BackendRegistry:
    out = BackendRegistry()
    for cfg in registry._configs.values():
        out.register(replace(cfg, cache_dir=str(cache_dir)))
    return out


def replay_registry_like(registry: BackendRegistry, cache_dir: Path) -> BackendRegistry:
    """Same backend ids, every provider replaced by the replay cache."""
    out = BackendRegistry()
    for cfg in registry._configs.values():
        out.register(BackendConfig(backend_id=cfg.backend_id,
                                   kind=BackendKind.REPLAY,
                                   cache_dir=str(cache_dir)))
    return out


@dataclass
class _AgentRun:
    agent: Agent
    assignment: StageAssignment
    signal: Optional[DrivingSignal] = None
    issued_at: float = 0.0
    world_waypoints: tuple[tuple[float, float], ...] = ()
    spacing_s: float = 0.5
    failures: int = 0
    safe_stopped: bool = False
    disengaged: bool = False
    completion_time: Optional[float] = None
    last_progress: float = 0.0
    last_progress_time: float = 0.0


class EpisodeRunner:
    """One closed-loop episode over a scenario.

    Per decision tick and per CAV: observe -> reasoning pipeline ->
    encode+broadcast -> poll+fuse -> decision prompt -> completion ->
    parse; the controller actuates at the physics rate in between.
    """

    def __init__(self, cfg: RunConfig, registry: Optional[BackendRegistry] = None):
        self.cfg = cfg
        self.scenario: Scenario = load_scenario(cfg.scenario_path)
        self.physics_dt = cfg.physics_dt or self.scenario.physics_dt
        self.decision_tick = cfg.decision_tick or self.scenario.decision_tick
        self.timeout_s = cfg.timeout_s or self.scenario.timeout_s
        ratio = self.decision_tick / self.physics_dt
        if abs(round(ratio) - ratio) > 1e-9 or round(ratio) < 1:
            raise ValueError("decision tick must be an integer multiple of physics dt")
        self.steps_per_tick = round(ratio)

        if registry is None:
            registry, file_default, file_assignments = load_backend_setup(
                cfg.backend_config_path)
        else:
            file_default, file_assignments = cfg.default_backend, {}
        if cfg.replay_dir is not None:
            registry = replay_registry_like(registry, Path(cfg.replay_dir))
        elif cfg.record_dir is not None:
            registry = _registry_with_cache(registry, Path(cfg.record_dir))
        self.registry = registry

        self.world = self.scenario.build_world()
        self.monitor = self.scenario.build_monitor()
        channel_cfg = cfg.channel or replace(self.scenario.channel, seed=cfg.seed)
        self.channel = Channel(channel_cfg)

        self.mode: Optional[MessageMode] = (
            None if cfg.message_mode == MESSAGE_MODE_NONE
            else MessageMode(cfg.message_mode))

        self._agents: dict[str, _AgentRun] = {}
        default_id = cfg.default_backend if cfg.default_backend != "scripted" else file_default
        for agent in self.world.agents.values():
            aid = agent.agent_id
            self.channel.register(aid)
            base = cfg.agent_backends.get(aid, default_id)
            stages = dict(file_assignments.get(aid, {}))
            assignment = StageAssignment(
                stages={s: cfg.stage_backends.get(s.value, stages.get(s.value, base))
                        for s in StageAssignment.uniform(base).stages},
                decision_backend_id=(cfg.decision_backend
                                     or stages.get("decision", base)))
            assignment.validate_against(self.registry)
            self._agents[aid] = _AgentRun(agent=agent, assignment=assignment)

        self._check_live_allowed()
        self._frames = self._load_frames()
        self._histories: dict[str, PacketHistory] = {
            aid: PacketHistory() for aid in self._agents}

        self.trajectory_records: list[dict] = []
        self.decision_records: list[dict] = []
        self.transcript_records: list[dict] = []
        self.infractions: list[InfractionEvent] = []
        self._paused = False
        self._pending_injections: list[dict] = []
        self._channel_cursor = 0
        self.feed: Optional[feedmod.FeedServer] = None
        if cfg.feed_port is not None:
            self.feed = feedmod.FeedServer(cfg.feed_port, hello_extra={
                "scenario": self.scenario.name,
                "agents": sorted(self._agents),
                "map": {
                    "lane_boundaries": [
                        {"points": [list(p) for p in b.points], "keep": b.keep}
                        for b in self.scenario.world_map.lane_boundaries],
                    "routes": {aid: [list(p) for p in run.agent.route.waypoints]
                               for aid, run in self._agents.items()},
                },
            })

    def _check_live_allowed(self) -> None:
        if self.cfg.allow_live:
            return
        used = set()
        for run in self._agents.values():
            used.update(run.assignment.stages.values())
            used.add(run.assignment.decision_backend_id)
        for backend_id in used:
            if self.registry.config(backend_id).kind == BackendKind.HTTP_CHAT:
                raise RuntimeError(
                    f"backend {backend_id!r} is live; pass allow_live to use it")

    def _load_frames(self) -> dict[str, bytes]:
        frames = {}
        for aid in self._agents:
            ref = self.world.frame_assets.get(aid)
            if ref:
                frames[aid] = Path(ref).read_bytes()
        if self.mode in (MessageMode.IMAGE, MessageMode.IMAGE_LANGPACK):
            missing = [aid for aid in self._agents if aid not in frames]
            if missing:
                raise RuntimeError(
                    f"message mode {self.mode.value} needs a frame asset for {missing}; "
                    f"set frame_asset in the scenario")
        return frames

    # ------------------------------------------------------------------
    # main loop

    def run(self) -> tuple[EpisodeLog, dict[str, RunMetrics]]:
        end_reason = "timeout"
        tick = 0
        try:
            while self.world.time < self.timeout_s - 1e-9:
                self._process_operator_commands()
                if self._paused:
                    time.sleep(0.02)
                    continue
                self._decision_phase(tick)
                reason = self._physics_phase(tick)
                self._emit_tick_frames(tick)
                tick += 1
                if reason is not None:
                    end_reason = reason
                    break
        finally:
            if self.feed is not None:
                self.feed.close()

        log = self._build_log(end_reason)
        results = finalize(log)
        if self.cfg.out_dir is not None:
            self._persist(log, results)
        return log, results

    # ------------------------------------------------------------------
    # decision tick

    def _decision_phase(self, tick: int) -> None:
        self._flush_injections()
        now = self.world.time
        snapshot = self.world.snapshot()
        observations = {aid: self.world.make_observation(aid)
                        for aid in sorted(self._agents)}

        pipeline_results: dict[str, Optional[M3CoTResult]] = {}
        for aid in sorted(self._agents):
            run = self._agents[aid]
            if run.disengaged:
                pipeline_results[aid] = None
                continue
            ctx = self._base_context(run)
            trace: list[dict] = []
            try:
                result = run_pipeline(
                    observations[aid], run.assignment, self.cfg.style,
                    self.registry, base_context=ctx,
                    images=self._own_images(aid), trace=trace)
                pipeline_results[aid] = result
            except StageError as exc:
                pipeline_results[aid] = None
                self._record_failure(tick, aid, f"stage: {exc}")
            for entry in trace:
                self.transcript_records.append({"tick": tick, "agent": aid, **entry})

        # broadcast before any agent polls so same-tick delivery works
        if self.mode is not None:
            for aid in sorted(self._agents):
                result = pipeline_results.get(aid)
                if result is None and not self._agents[aid].disengaged:
                    continue
                packet = self._build_packet(aid, observations[aid],
                                            result or M3CoTResult())
                msg = make_message(self.mode, packet=packet,
                                   image=self._frames.get(aid),
                                   budget=self.cfg.budget)
                self.channel.broadcast(aid, msg, snapshot)

        for aid in sorted(self._agents):
            run = self._agents[aid]
            if run.disengaged:
                run.safe_stopped = True
                self._log_decision(tick, aid, action="disengaged")
                continue
            received = self.channel.poll(aid, now)
            fused: list[FusedPacket] = []
            image_senders: list[str] = []
            received_images: list[bytes] = []
            for msg in received:
                if msg.payload:
                    try:
                        packet = decode(msg.payload)
                    except MalformedMessageError:
                        continue
                    fused.append(self._histories[aid].fuse(
                        packet, observations[aid].ego, now))
                if msg.image_attachment:
                    image_senders.append(msg.sender_id)
                    received_images.append(msg.image_attachment)
            if pipeline_results.get(aid) is None and self.cfg.style != PromptStyle.NAIVE:
                self._apply_failure(run)
                self._log_decision(tick, aid, action=self._hold_action(run))
                continue
            self._decide(tick, aid, observations[aid],
                         pipeline_results[aid] or M3CoTResult(),
                         fused, image_senders, received_images)

    def _base_context(self, run: _AgentRun) -> CompletionContext:
        cruise = (run.agent.cruise_speed
                  if run.agent.cruise_speed is not None
                  else self.scenario.cruise_speed)
        return CompletionContext(
            formulation=self.cfg.formulation,
            cruise_speed=cruise,
            wheelbase=run.agent.limits.wheelbase,
            max_steer=run.agent.limits.max_steer,
            horizon_s=self.decision_tick,
        )

    def _own_images(self, aid: str) -> Optional[list[bytes]]:
        frame = self._frames.get(aid)
        return [frame] if frame is not None else None

    def _build_packet(self, aid: str, obs, result: M3CoTResult) -> LangPackPacket:
        ego = obs.ego
        return LangPackPacket(
            agent_id=aid, timestamp=obs.sim_time,
            location=(ego.x, ego.y), speed=ego.speed,
            acceleration=ego.acceleration, **result.section_texts())

    def _decide(self, tick: int, aid: str, obs, own: M3CoTResult,
                fused: list[FusedPacket], image_senders: list[str],
                received_images: list[bytes]) -> None:
        run = self._agents[aid]
        prompt = build_decision_prompt(
            own, fused, obs, self.cfg.formulation, agent_id=aid,
            image_senders=image_senders, horizon_s=2.0, spacing_s=0.5)
        ctx = self._base_context(run)
        ctx.observation = obs
        ctx.received = [
            ReceivedIntent(sender_id=fp.packet.agent_id,
                           intent_text=fp.packet.intent_desc,
                           right=fp.aligned_offset[0],
                           front=fp.aligned_offset[1])
            for fp in fused]
        images = (self._own_images(aid) or []) + received_images
        try:
            result = self.registry.complete_detailed(
                run.assignment.decision_backend_id, [("user", prompt)],
                images=images or None, context=ctx)
            signal = parse_signal(result.text, self.cfg.formulation)
        except (ParseFailure, BackendError) as exc:
            self._apply_failure(run)
            self._record_failure(tick, aid, str(exc))
            self._log_decision(tick, aid, action=self._hold_action(run))
            return

        run.signal = signal
        run.issued_at = self.world.time
        run.failures = 0
        run.safe_stopped = False
        if isinstance(signal, DiscreteTrajectory):
            run.world_waypoints = tuple(
                from_ego_frame(run.agent.state, (wp[1], wp[0]))
                for wp in signal.waypoints)
            run.spacing_s = signal.spacing_s
        self._log_decision(tick, aid, action="replan",
                           backend=run.assignment.decision_backend_id,
                           prompt_hash=result.record.request_hash,
                           text=result.text)

    def _apply_failure(self, run: _AgentRun) -> None:
        run.failures += 1
        if run.failures >= 2 or run.signal is None:
            run.safe_stopped = True

    @staticmethod
    def _hold_action(run: _AgentRun) -> str:
        return "safe_stop" if run.safe_stopped else "hold"

    def _record_failure(self, tick: int, aid: str, detail: str) -> None:
        self.decision_records.append({"tick": tick, "agent": aid,
                                      "action": "failure", "detail": detail})

    def _log_decision(self, tick: int, aid: str, action: str,
                      backend: str = "", prompt_hash: str = "",
                      text: str = "") -> None:
        self.decision_records.append({
            "tick": tick, "agent": aid, "action": action,
            "backend": backend, "prompt_hash": prompt_hash, "text": text})

    # ------------------------------------------------------------------
    # physics

    def _actuate(self, run: _AgentRun, dt: float) -> ControlCommand:
        if run.safe_stopped or run.disengaged:
            return SAFE_STOP
        signal = run.signal
        state = run.agent.state
        if signal is None:
            return ControlCommand()
        if isinstance(signal, ControlCommand):
            return clamp_control(signal, run.agent.limits)
        if isinstance(signal, ContinuousTrajectory):
            return rollout_continuous(signal, state, run.agent.limits, dt,
                                      elapsed=self.world.time - run.issued_at)
        ego_wps = []
        for wp in run.world_waypoints:
            right, front = to_ego_frame(state, wp)
            ego_wps.append((front, right))
        return track_discrete(
            DiscreteTrajectory(waypoints=tuple(ego_wps), spacing_s=run.spacing_s),
            state, run.agent.limits)

    def _physics_phase(self, tick: int) -> Optional[str]:
        for _ in range(self.steps_per_tick):
            commands = {aid: self._actuate(self._agents[aid], self.physics_dt)
                        for aid in self._agents}
            self.world.step(commands, self.physics_dt)
            snapshot = self.world.snapshot()
            step_events = self.monitor.detect(snapshot)
            self.infractions.extend(step_events)
            t = self.world.time
            for aid in sorted(self._agents):
                run = self._agents[aid]
                state = run.agent.state
                progress = run.agent.tracker.best
                if progress > run.last_progress + 1e-6:
                    run.last_progress = progress
                    run.last_progress_time = t
                if run.completion_time is None and run.agent.tracker.complete:
                    run.completion_time = t
                cmd = commands[aid]
                self.trajectory_records.append({
                    "t": t, "agent": aid, "x": state.x, "y": state.y,
                    "heading": state.heading, "speed": state.speed,
                    "steer": cmd.steer, "throttle": cmd.throttle,
                    "brake": cmd.brake, "progress": progress,
                    "infractions": [e.kind.value for e in step_events
                                    if e.agent_id == aid],
                })
            if all(r.agent.tracker.complete for r in self._agents.values()):
                return "completed"
            status = self._terminal_status()
            if status is not None:
                return status
            if self.world.time >= self.timeout_s - 1e-9:
                return None
        return None

    def _terminal_status(self) -> Optional[str]:
        """Terminal failure when every CAV is finished or going nowhere."""
        any_stuck = False
        for run in self._agents.values():
            if run.agent.tracker.complete:
                continue
            stuck = (self.world.time - run.last_progress_time
                     > self.scenario.stuck_timeout_s
                     and run.agent.state.speed < 0.05)
            if not stuck:
                return None
            any_stuck = True
        return "terminal_failure" if any_stuck else None

    # ------------------------------------------------------------------
    # operator commands

    def _process_operator_commands(self) -> None:
        if self.feed is None:
            return
        for conn, frame in self.feed.poll_commands():
            ack = self._handle_command(frame)
            ack.setdefault("id", frame.get("id"))
            self.feed.send_to(conn, {"v": 1, "kind": "ack", **ack})

    def _handle_command(self, frame: dict) -> dict:
        if frame.get("kind") != "operator_command":
            return {"ok": False, "reason": "unknown frame kind"}
        action = frame.get("action")
        if action == "pause":
            self._paused = True
            return {"ok": True}
        if action == "resume":
            agent = frame.get("agent")
            if agent is not None:
                if agent not in self._agents:
                    return {"ok": False, "reason": f"unknown agent {agent!r}"}
                self._agents[agent].disengaged = False
                self._agents[agent].safe_stopped = False
                return {"ok": True}
            self._paused = False
            return {"ok": True}
        if action == "disengage":
            agent = frame.get("agent")
            if agent not in self._agents:
                return {"ok": False, "reason": f"unknown agent {agent!r}"}
            self._agents[agent].disengaged = True
            return {"ok": True}
        if action == "inject":
            return self._validate_injection(frame)
        return {"ok": False, "reason": f"unknown action {action!r}"}

    def _validate_injection(self, frame: dict) -> dict:
        text = frame.get("text")
        position = frame.get("position")
        if not text or not isinstance(text, str):
            return {"ok": False, "reason": "injection needs non-empty text"}
        if (not isinstance(position, (list, tuple)) or len(position) != 2
                or not all(isinstance(v, (int, float)) for v in position)):
            return {"ok": False, "reason": "injection needs position [x, y]"}
        target = frame.get("target", "broadcast")
        if target != "broadcast" and target not in self._agents:
            return {"ok": False, "reason": f"unknown target {target!r}"}
        self._pending_injections.append({
            "text": text, "position": (float(position[0]), float(position[1])),
            "target": target})
        if self._paused:
            return {"ok": True, "queued": True}
        return {"ok": True}

    def _flush_injections(self) -> None:
        if self._paused or not self._pending_injections:
            return
        snapshot = self.world.snapshot()
        for inj in self._pending_injections:
            packet = LangPackPacket(
                agent_id="operator", timestamp=self.world.time,
                location=inj["position"], speed=0.0, acceleration=0.0,
                intent_desc=inj["text"])
            msg = make_message(MessageMode.LANGPACK, packet=packet,
                               budget=self.cfg.budget)
            receivers = (None if inj["target"] == "broadcast"
                         else {inj["target"]})
            range_override = (float("inf") if self.cfg.operator_range_exempt
                              else None)
            self.channel.broadcast("operator", msg, snapshot,
                                   origin=inj["position"], receivers=receivers,
                                   range_override=range_override)
        self._pending_injections.clear()

    # ------------------------------------------------------------------
    # feed frames

    def _emit_tick_frames(self, tick: int) -> None:
        if self.feed is None:
            return
        events = self.channel.events[self._channel_cursor:]
        self._channel_cursor = len(self.channel.events)
        for e in events:
            self.feed.broadcast({
                "v": 1, "kind": "message_event", "tick": tick,
                "sent_at": e.sent_at, "sender": e.sender,
                "receiver": e.receiver, "size_bytes": e.size_bytes,
                "kb": e.size_bytes / 1024.0, "dropped": e.dropped})
        vehicles = []
        for body in self.world.snapshot().bodies:
            entry = {"id": body.body_id, "class": body.object_class,
                     "x": body.state.x, "y": body.state.y,
                     "heading": body.state.heading, "speed": body.state.speed}
            if body.body_id in self._agents:
                entry["progress"] = self._agents[body.body_id].agent.tracker.best
            vehicles.append(entry)
        self.feed.broadcast({"v": 1, "kind": "snapshot", "tick": tick,
                             "sim_time": self.world.time, "vehicles": vehicles})
        report = self.channel.bandwidth_report()
        self.feed.broadcast({
            "v": 1, "kind": "metrics_update", "tick": tick,
            "progress": {aid: self._agents[aid].agent.tracker.best
                         for aid in sorted(self._agents)},
            "infractions": len(self.infractions),
            "tb_kb": report})

    # ------------------------------------------------------------------
    # results

    def _build_log(self, end_reason: str) -> EpisodeLog:
        return EpisodeLog(
            scenario=self.scenario.name,
            end_time=self.world.time,
            end_reason=end_reason,
            final_progress={aid: run.agent.tracker.best
                            for aid, run in self._agents.items()},
            completion_times={aid: run.completion_time
                              for aid, run in self._agents.items()},
            infractions=list(self.infractions),
            bandwidth=self.channel.bandwidth_report(),
            config_label=self.cfg.label,
            trajectory_records=self.trajectory_records,
            channel_records=self.channel.event_records(),
            decision_records=self.decision_records,
        )

    def _persist(self, log: EpisodeLog, results: dict[str, RunMetrics]) -> None:
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "trajectory.jsonl", log.trajectory_records)
        _write_jsonl(out / "channel.jsonl", log.channel_records)
        _write_jsonl(out / "events.jsonl", [
            {"kind": e.kind.value, "coefficient": e.coefficient,
             "timestamp": e.timestamp, "agent_id": e.agent_id,
             "counterpart": e.counterpart} for e in log.infractions])
        _write_jsonl(out / "decisions.jsonl", log.decision_records)
        _write_jsonl(out / "transcripts.jsonl", self.transcript_records)
        summary = {
            "scenario": log.scenario,
            "label": log.config_label,
            "config": {
                "style": self.cfg.style.value,
                "signal": self.cfg.formulation.value,
                "message": self.cfg.message_mode,
                "seed": self.cfg.seed,
                "physics_dt": self.physics_dt,
                "decision_tick": self.decision_tick,
            },
            "end_reason": log.end_reason,
            "end_time": log.end_time,
            "bandwidth": log.bandwidth,
            "metrics": {aid: m.to_dict() for aid, m in results.items()},
        }
        (out / "episode.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")


def _write_jsonl(path: Path, records: list[dict]) -> None:
    with path.open("w", encoding="utf-8") as handle:
        for rec in records:
            handle.write(json.dumps(rec, sort_keys=True) + "\n")


def run_episode(cfg: RunConfig,
                registry: Optional[BackendRegistry] = None
                ) -> tuple[EpisodeLog, dict[str, RunMetrics]]:
    return EpisodeRunner(cfg, registry=registry).run()


# ---------------------------------------------------------------------------
# experiment matrices


@dataclass
class ExperimentMatrix:
    base: RunConfig
    variations: list[tuple[str, dict]]
    repetitions: int = 1
    label_header: str = "Variation"


_OVERRIDE_KEYS = {
    "style": lambda v: ("style", PromptStyle(v)),
    "signal": lambda v: ("formulation", Formulation(v)),
    "message": lambda v: ("message_mode", str(v)),
    "scenario": lambda v: ("scenario_path", Path(v)),
    "backend": lambda v: ("default_backend", str(v)),
    "agent_backends": lambda v: ("agent_backends", dict(v)),
    "stage_backends": lambda v: ("stage_backends", dict(v)),
    "decision_backend": lambda v: ("decision_backend", str(v)),
    "seed": lambda v: ("seed", int(v)),
}


def _apply_overrides(base: RunConfig, overrides: dict) -> RunConfig:
    changes = {}
    for key, value in overrides.items():
        if key == "label":
            continue
        if key not in _OVERRIDE_KEYS:
            raise ValueError(f"unknown matrix override {key!r}")
        field_name, converted = _OVERRIDE_KEYS[key](value)
        changes[field_name] = converted
    return replace(base, **changes)


def load_matrix(path: Path | str) -> ExperimentMatrix:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    base_raw = dict(raw.get("base", {}))
    scenario = raw.get("scenario") or base_raw.pop("scenario", None)
    if scenario is None:
        raise ValueError("matrix spec needs a scenario")
    scenario_path = (Path(path).parent / scenario).resolve()
    base = _apply_overrides(
        RunConfig(scenario_path=scenario_path, seed=int(raw.get("seed", 0))),
        base_raw)
    if raw.get("backend_config"):
        base = replace(base, backend_config_path=(
            Path(path).parent / raw["backend_config"]).resolve())
    variations = []
    for var in raw.get("variations", []):
        label = str(var.get("label", "cell"))
        variations.append((label, {k: v for k, v in var.items() if k != "label"}))
    return ExperimentMatrix(base=base, variations=variations,
                            repetitions=int(raw.get("repetitions", 1)),
                            label_header=str(raw.get("label", "Variation")))


def run_matrix(matrix: ExperimentMatrix,
               out_dir: Optional[Path] = None) -> tuple[list[dict], str]:
    """Execute every cell; failures are recorded and the matrix continues.

    Returns result rows and a rendered comparison table.
    """
    rows = []
    agent_ids: list[str] = []
    for index, (label, overrides) in enumerate(matrix.variations):
        for rep in range(matrix.repetitions):
            cfg = _apply_overrides(matrix.base, overrides)
            cfg = replace(cfg, seed=matrix.base.seed + 1000 * rep + index,
                          label=label,
                          out_dir=(Path(out_dir) / f"{index:02d}_{label}_{rep}"
                                   if out_dir else None))
            row: dict = {"label": label, "rep": rep, "seed": cfg.seed,
                         "scenario": str(cfg.scenario_path)}
            try:
                log, results = run_episode(cfg)
                row["metrics"] = results
                row["end_reason"] = log.end_reason
                row["tb_mean"] = log.bandwidth.get("mean", 0.0)
                if not agent_ids:
                    agent_ids = sorted(results)
            except Exception as exc:  # cell failures must not stop the matrix
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)

    table = format_table([r for r in rows if "metrics" in r],
                         matrix.label_header, agent_ids)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "results.jsonl", [_row_record(r) for r in rows])
        (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    return rows, table


def _row_record(row: dict) -> dict:
    rec = {k: row[k] for k in ("label", "rep", "seed", "scenario") if k in row}
    if "error" in row:
        rec["error"] = row["error"]
    if "metrics" in row:
        rec["end_reason"] = row.get("end_reason", "")
        rec["tb_mean"] = row.get("tb_mean", 0.0)
        rec["metrics"] = {aid: m.to_dict() for aid, m in row["metrics"].items()}
    return rec
