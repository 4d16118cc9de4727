"""Per-agent episode metrics: driving score, route completion, infraction
penalty, time consumed, and transmission bandwidth.

Metrics are a pure function of the episode logs; everything here can be
recomputed from the line-delimited records the harness writes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .world import InfractionEvent, InfractionKind


def infraction_penalty(events: Iterable[InfractionEvent]) -> float:
    """IP = 1 - product of event coefficients; 0 for a clean run."""
    product = 1.0
    for event in events:
        product *= event.coefficient
    return 1.0 - product


def driving_score(rc: float, ip: float) -> float:
    """DS = RC * (1 - IP), the exact product."""
    if not (0.0 <= rc <= 100.0):
        raise ValueError(f"RC out of range: {rc}")
    if not (0.0 <= ip <= 1.0):
        raise ValueError(f"IP out of range: {ip}")
    return rc * (1.0 - ip)


@dataclass(frozen=True)
class RunMetrics:
    agent_id: str
    ds: float
    rc: float
    ip: float
    tc_s: float
    tb_kb: float
    infractions: tuple[InfractionEvent, ...] = ()
    completion_time_s: Optional[float] = None

    def __post_init__(self) -> None:
        if not math.isclose(self.ds, self.rc * (1.0 - self.ip),
                            rel_tol=0, abs_tol=1e-9):
            raise ValueError("DS must equal RC * (1 - IP)")

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "ds": self.ds, "rc": self.rc, "ip": self.ip,
            "tc_s": self.tc_s, "tb_kb": self.tb_kb,
            "completion_time_s": self.completion_time_s,
            "infractions": [{"kind": e.kind.value, "coefficient": e.coefficient,
                             "timestamp": e.timestamp, "agent_id": e.agent_id,
                             "counterpart": e.counterpart}
                            for e in self.infractions],
        }


@dataclass
class EpisodeLog:
    """What an episode leaves behind, enough to recompute every metric."""

    scenario: str
    end_time: float
    end_reason: str  # completed | timeout | terminal_failure
    final_progress: dict[str, float]
    completion_times: dict[str, Optional[float]]
    infractions: list[InfractionEvent]
    bandwidth: dict[str, float]  # per-agent mean KB plus "mean"
    config_label: str = ""
    trajectory_records: list[dict] = field(default_factory=list)
    channel_records: list[dict] = field(default_factory=list)
    decision_records: list[dict] = field(default_factory=list)


def finalize(log: EpisodeLog) -> dict[str, RunMetrics]:
    """Per-agent metrics at episode end (route done, timeout, or failure)."""
    out = {}
    for agent_id in sorted(log.final_progress):
        events = tuple(e for e in log.infractions if e.agent_id == agent_id)
        rc = log.final_progress[agent_id]
        ip = infraction_penalty(events)
        out[agent_id] = RunMetrics(
            agent_id=agent_id,
            ds=driving_score(rc, ip),
            rc=rc, ip=ip,
            tc_s=log.end_time,
            tb_kb=log.bandwidth.get(agent_id, 0.0),
            infractions=events,
            completion_time_s=log.completion_times.get(agent_id),
        )
    return out


def recompute_from_files(trajectory_path: Path, channel_path: Path,
                         events_path: Path) -> dict[str, RunMetrics]:
    """Independent recomputation of the metrics from the persisted logs."""
    final_progress: dict[str, float] = {}
    completion: dict[str, Optional[float]] = {}
    end_time = 0.0
    for line in Path(trajectory_path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        agent = rec["agent"]
        progress = rec["progress"]
        final_progress[agent] = max(final_progress.get(agent, 0.0), progress)
        end_time = max(end_time, rec["t"])
        if progress >= 100.0 and completion.get(agent) is None:
            completion[agent] = rec["t"]
        completion.setdefault(agent, None)

    events = []
    for line in Path(events_path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        events.append(InfractionEvent(
            kind=InfractionKind(rec["kind"]), coefficient=rec["coefficient"],
            timestamp=rec["timestamp"], agent_id=rec["agent_id"],
            counterpart=rec.get("counterpart", "")))

    sent_kb: dict[str, list[float]] = {}
    for line in Path(channel_path).read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if not rec["dropped"]:
            sent_kb.setdefault(rec["sender"], []).append(rec["size_bytes"] / 1024.0)
    bandwidth = {agent: sum(v) / len(v) for agent, v in sent_kb.items()}

    log = EpisodeLog(scenario="", end_time=end_time, end_reason="",
                     final_progress=final_progress, completion_times=completion,
                     infractions=events, bandwidth=bandwidth)
    return finalize(log)


def format_table(rows: list[dict], label_header: str,
                 agent_ids: list[str]) -> str:
    """Render results in the per-vehicle DS/RC + TC + TB column layout."""
    headers = [label_header]
    for i, _ in enumerate(agent_ids, start=1):
        headers += [f"V{i} DS", f"V{i} RC"]
    headers += ["TC(s)", "TB(KB)"]

    table_rows = [headers]
    for row in rows:
        cells = [str(row["label"])]
        metrics: dict[str, RunMetrics] = row["metrics"]
        for agent_id in agent_ids:
            m = metrics.get(agent_id)
            cells += ([f"{m.ds:.1f}", f"{m.rc:.1f}"] if m else ["-", "-"])
        tc = max((m.tc_s for m in metrics.values()), default=0.0)
        tb = row.get("tb_mean")
        if tb is None:
            tb = sum(m.tb_kb for m in metrics.values()) / max(len(metrics), 1)
        cells += [f"{tc:.1f}", f"{tb:.1f}"]
        table_rows.append(cells)

    widths = [max(len(r[i]) for r in table_rows) for i in range(len(headers))]
    lines = []
    for r_i, r in enumerate(table_rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip())
        if r_i == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(headers))))
    return "\n".join(lines)
