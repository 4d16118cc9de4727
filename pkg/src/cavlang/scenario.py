"""Scenario files: structured YAML configs describing map polylines,
routes, actor scripts, vehicle limits, infraction coefficients, tick
rates, and the seed. See scenarios/ for the shipped set."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .comms import ChannelConfig
from .world import (Agent, InfractionKind, InfractionMonitor, LaneBoundary,
                    RouteSpec, ScriptedActor, TrafficLight, VehicleLimits,
                    VehicleState, World, WorldMap)


@dataclass
class Scenario:
    name: str
    path: Path
    seed: int = 0
    physics_dt: float = 0.05
    decision_tick: float = 1.0
    timeout_s: float = 300.0
    cruise_speed: float = 8.0
    sensing_range: float = 50.0
    stuck_timeout_s: float = 30.0
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    coefficients: dict[InfractionKind, float] = field(default_factory=dict)
    world_map: WorldMap = field(default_factory=WorldMap)
    agents: list[Agent] = field(default_factory=list)
    actors: list[ScriptedActor] = field(default_factory=list)
    frame_assets: dict[str, str] = field(default_factory=dict)
    description: str = ""

    def build_world(self) -> World:
        return World(agents=[_copy_agent(a) for a in self.agents],
                     actors=[_copy_actor(a) for a in self.actors],
                     world_map=self.world_map,
                     sensing_range=self.sensing_range,
                     frame_assets=self.frame_assets)

    def build_monitor(self) -> InfractionMonitor:
        return InfractionMonitor(self.coefficients)


def _copy_agent(a: Agent) -> Agent:
    return Agent(agent_id=a.agent_id, state=a.state, limits=a.limits,
                 route=a.route, length=a.length, width=a.width,
                 sensing_range=a.sensing_range, cruise_speed=a.cruise_speed)


def _copy_actor(a: ScriptedActor) -> ScriptedActor:
    return ScriptedActor(actor_id=a.actor_id, kind=a.kind, state=a.state,
                         length=a.length, width=a.width, path=a.path,
                         speed_profile=a.speed_profile)


def _state(d: dict) -> VehicleState:
    return VehicleState(x=float(d["x"]), y=float(d["y"]),
                        heading=float(d.get("heading", 0.0)),
                        speed=float(d.get("speed", 0.0)))


def _points(raw) -> tuple[tuple[float, float], ...]:
    return tuple((float(p[0]), float(p[1])) for p in raw)


def load_scenario(path: Path | str) -> Scenario:
    path = Path(path)
    raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError(f"scenario file {path} is not a mapping")

    channel_raw = raw.get("channel", {})
    channel = ChannelConfig(
        range_m=float(channel_raw.get("range_m", 200.0)),
        latency_s=float(channel_raw.get("latency_s", 0.0)),
        drop_prob=float(channel_raw.get("drop_prob", 0.0)),
        seed=int(channel_raw.get("seed", raw.get("seed", 0))),
    )

    coefficients = {InfractionKind(k): float(v)
                    for k, v in raw.get("coefficients", {}).items()}

    map_raw = raw.get("map", {})
    boundaries = tuple(
        LaneBoundary(points=_points(b["points"]), keep=b.get("keep", "left"))
        for b in map_raw.get("lane_boundaries", []))
    lights = tuple(
        TrafficLight(
            light_id=str(t.get("id", f"light_{i}")),
            stop_line=(tuple(map(float, t["stop_line"][0])),
                       tuple(map(float, t["stop_line"][1]))),
            phases=tuple((float(p[0]), float(p[1]), str(p[2]))
                         for p in t["phases"]),
            period=float(t.get("period", 0.0)))
        for i, t in enumerate(map_raw.get("traffic_lights", [])))

    agents = []
    frame_assets = {}
    for a in raw.get("agents", []):
        limits_raw = a.get("limits", {})
        route_raw = a["route"]
        agent = Agent(
            agent_id=str(a["id"]),
            state=_state(a["start"]),
            limits=VehicleLimits(
                wheelbase=float(limits_raw.get("wheelbase", 2.5)),
                max_steer=float(limits_raw.get("max_steer", 0.6)),
                max_accel=float(limits_raw.get("max_accel", 3.0)),
                max_decel=float(limits_raw.get("max_decel", 6.0)),
                max_speed=float(limits_raw.get("max_speed", 20.0))),
            route=RouteSpec(waypoints=_points(route_raw["waypoints"]),
                            goal_tolerance=float(route_raw.get("goal_tolerance", 2.0))),
            length=float(a.get("length", 4.5)),
            width=float(a.get("width", 2.0)),
            sensing_range=(float(a["sensing_range"])
                           if "sensing_range" in a else None),
            cruise_speed=(float(a["cruise_speed"])
                          if "cruise_speed" in a else None),
        )
        agents.append(agent)
        if "frame_asset" in a:
            frame_assets[agent.agent_id] = str((path.parent / a["frame_asset"]).resolve())
    if not agents:
        raise ValueError(f"scenario {path} defines no agents")
    if "frame_asset" in raw:  # one shared asset for every agent
        shared = str((path.parent / raw["frame_asset"]).resolve())
        for agent in agents:
            frame_assets.setdefault(agent.agent_id, shared)

    actors = []
    for a in raw.get("actors", []):
        actors.append(ScriptedActor(
            actor_id=str(a["id"]),
            kind=str(a.get("kind", "vehicle")),
            state=_state(a["start"]),
            length=float(a.get("length", 4.5 if a.get("kind") != "pedestrian" else 0.5)),
            width=float(a.get("width", 2.0 if a.get("kind") != "pedestrian" else 0.5)),
            path=_points(a.get("path", [])),
            speed_profile=tuple((float(t), float(v))
                                for t, v in a.get("speed_profile", [])),
        ))

    ticks = raw.get("ticks", {})
    return Scenario(
        name=str(raw.get("name", path.stem)),
        path=path,
        seed=int(raw.get("seed", 0)),
        physics_dt=float(ticks.get("physics_dt", 0.05)),
        decision_tick=float(ticks.get("decision_tick", 1.0)),
        timeout_s=float(raw.get("timeout_s", 300.0)),
        cruise_speed=float(raw.get("cruise_speed", 8.0)),
        sensing_range=float(raw.get("sensing_range", 50.0)),
        stuck_timeout_s=float(raw.get("stuck_timeout_s", 30.0)),
        channel=channel,
        coefficients=coefficients,
        world_map=WorldMap(lane_boundaries=boundaries, traffic_lights=lights),
        agents=agents,
        actors=actors,
        frame_assets=frame_assets,
        description=str(raw.get("description", "")),
    )
