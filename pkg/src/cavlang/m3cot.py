"""Four-stage reasoning pipeline with per-stage model routing, plus the
final decision prompt built from own and received context.

Stage prompts are versioned text assets under templates/<version>/; the
concise style is the plain chain-of-thought template with a constant
suffix appended.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendError, BackendRegistry, CompletionContext
from .fusion import FusedPacket, describe_offset
from .langpack import SECTION_ORDER
from .signals import Formulation
from .world import Observation

TEMPLATE_VERSION = "v1"
TEMPLATE_DIR = Path(__file__).parent / "templates" / TEMPLATE_VERSION
CONCISE_SUFFIX = "Please be very concise"
SAFETY_INSTRUCTION = "Drive safely and avoid collisions."


class StageKind(str, Enum):
    SCENE_DESCRIPTION = "scene_description"
    OBJECT_DESCRIPTION = "object_description"
    NAVIGATION_GOAL = "navigation_goal"
    FUTURE_INTENT = "future_intent"


STAGE_ORDER: tuple[StageKind, ...] = (
    StageKind.SCENE_DESCRIPTION,
    StageKind.OBJECT_DESCRIPTION,
    StageKind.NAVIGATION_GOAL,
    StageKind.FUTURE_INTENT,
)

# stage result field on M3CoTResult, in stage order
_STAGE_FIELD = {
    StageKind.SCENE_DESCRIPTION: "scene_desc",
    StageKind.OBJECT_DESCRIPTION: "objects_desc",
    StageKind.NAVIGATION_GOAL: "goal_desc",
    StageKind.FUTURE_INTENT: "intent_desc",
}


class PromptStyle(str, Enum):
    NAIVE = "naive"
    COT = "cot"
    CONCISE_COT = "concise_cot"


class StageError(RuntimeError):
    def __init__(self, stage: StageKind, cause: Exception):
        super().__init__(f"stage {stage.value} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class StageAssignment:
    """Which backend answers each stage, and which makes the decision."""

    stages: dict[StageKind, str]
    decision_backend_id: str

    def __post_init__(self) -> None:
        missing = [s.value for s in STAGE_ORDER if s not in self.stages]
        if missing:
            raise ValueError(f"stages without a backend: {missing}")

    @classmethod
    def uniform(cls, backend_id: str) -> "StageAssignment":
        return cls(stages={s: backend_id for s in STAGE_ORDER},
                   decision_backend_id=backend_id)

    def validate_against(self, registry: BackendRegistry) -> None:
        for backend_id in (*self.stages.values(), self.decision_backend_id):
            registry.config(backend_id)


@dataclass
class M3CoTResult:
    scene_desc: str = ""
    objects_desc: str = ""
    goal_desc: str = ""
    intent_desc: str = ""
    stage_backend: dict[str, str] = field(default_factory=dict)
    stage_latency: dict[str, float] = field(default_factory=dict)

    def section_texts(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in SECTION_ORDER}


@lru_cache(maxsize=None)
def load_template(style: str, stage: str) -> str:
    return (TEMPLATE_DIR / style / f"{stage}.txt").read_text(encoding="utf-8")


def goal_sentence(goal_offset: tuple[float, float]) -> str:
    """Prompt phrasing of the goal offset, fixed 3-decimal rendering."""
    right, front = goal_offset
    lat = "right" if right >= 0 else "left"
    lon = "front" if front >= 0 else "rear"
    return (f"{abs(right):.3f} meters to my {lat} and "
            f"{abs(front):.3f} meters to my {lon}")


def observation_summary(obs: Observation) -> str:
    ego = obs.ego
    lines = [f"Ego speed {ego.speed:.3f} m/s, acceleration "
             f"{ego.acceleration:.3f} m/s^2, sim time {obs.sim_time:.3f} s."]
    if not obs.nearby_objects:
        lines.append("No nearby actors.")
    for obj in obs.nearby_objects:
        lines.append(f"- {obj.object_class}: {describe_offset((obj.right, obj.front))}, "
                     f"{obj.motion}, relative speed {obj.relative_speed:.3f} m/s")
    return "\n".join(lines)


def build_stage_prompt(stage: StageKind, obs: Observation,
                       prior: M3CoTResult, style: PromptStyle) -> str:
    template_style = "cot"  # concise is cot plus a constant suffix
    template = load_template(template_style, stage.value)
    prompt = template.format(
        observation=observation_summary(obs),
        goal_sentence=goal_sentence(obs.goal_offset),
        scene_desc=prior.scene_desc,
        objects_desc=prior.objects_desc,
        goal_desc=prior.goal_desc,
    )
    if style == PromptStyle.CONCISE_COT:
        prompt += CONCISE_SUFFIX
    return prompt


def run_stage(stage: StageKind, obs: Observation, prior: M3CoTResult,
              registry: BackendRegistry, backend_id: str, style: PromptStyle,
              base_context: Optional[CompletionContext] = None,
              images: Optional[list[bytes]] = None,
              trace: Optional[list[dict]] = None) -> str:
    """Run one reasoning stage; earlier stages must already be in `prior`."""
    prompt = build_stage_prompt(stage, obs, prior, style)
    context = replace(base_context or CompletionContext(),
                      observation=obs, stage=stage.value)
    try:
        result = registry.complete_detailed(
            backend_id, [("user", prompt)], images=images, context=context)
    except BackendError as exc:
        raise StageError(stage, exc) from exc
    prior.stage_backend[stage.value] = backend_id
    prior.stage_latency[stage.value] = result.latency_s
    if trace is not None:
        trace.append({"stage": stage.value, "backend": backend_id,
                      "prompt_hash": result.record.request_hash,
                      "completion": result.text,
                      "latency_s": result.latency_s})
    return result.text


def run_pipeline(obs: Observation, assignment: StageAssignment,
                 style: PromptStyle, registry: BackendRegistry,
                 base_context: Optional[CompletionContext] = None,
                 images: Optional[list[bytes]] = None,
                 trace: Optional[list[dict]] = None) -> M3CoTResult:
    """Execute the four stages in order; naive style skips them all."""
    result = M3CoTResult()
    if style == PromptStyle.NAIVE:
        return result
    for stage in STAGE_ORDER:
        text = run_stage(stage, obs, result, registry,
                         assignment.stages[stage], style,
                         base_context=base_context, images=images, trace=trace)
        setattr(result, _STAGE_FIELD[stage], text)
    return result


def _ego_metadata(agent_id: str, obs: Observation) -> str:
    ego = obs.ego
    return (f"You are Agent {agent_id}, located at [{ego.x:.3f}, {ego.y:.3f}], "
            f"current speed {ego.speed:.3f} m/s, acceleration "
            f"{ego.acceleration:.3f} m/s^2, sim time {obs.sim_time:.3f} s.")


def build_decision_prompt(own: M3CoTResult, received: Sequence[FusedPacket],
                          obs: Observation, formulation: Formulation,
                          agent_id: str = "ego",
                          image_senders: Sequence[str] = (),
                          horizon_s: float = 2.0,
                          spacing_s: float = 0.5) -> str:
    """Assemble the signal-generation prompt from own and received context.

    Received packets must already be coordinate-transformed and
    time-aligned; their text is embedded verbatim under a sender header,
    nearest sender first.
    """
    parts = [_ego_metadata(agent_id, obs),
             f"Your navigation target is {goal_sentence(obs.goal_offset)}."]

    own_sections = []
    labels = {"scene_desc": "Your scene description:",
              "objects_desc": "Your object description:",
              "goal_desc": "Your target description:",
              "intent_desc": "Your intent description:"}
    for name, text in own.section_texts().items():
        if text:
            own_sections += [labels[name], text]
    if own_sections:
        parts.append("\n".join(own_sections))

    for fp in sorted(received, key=lambda f: f.range_m):
        header = (f"--- Message from Agent {fp.packet.agent_id} "
                  f"({describe_offset(fp.aligned_offset)}, age {fp.age:.3f} s) ---")
        parts.append("\n".join([header, fp.packet.metadata_line(),
                                fp.packet.body_text()]))
    for sender in image_senders:
        parts.append(f"--- Camera frame shared by Agent {sender} (attached) ---")

    instruction = load_template("decision", formulation.value).format(
        horizon_s=horizon_s, spacing_s=spacing_s)
    parts.append(instruction.rstrip("\n"))
    parts.append(SAFETY_INSTRUCTION)
    return "\n\n".join(parts)
