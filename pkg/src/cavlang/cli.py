"""Command line entry points: run one episode, run an experiment matrix,
or render a report from persisted results."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import RunConfig, load_matrix, run_episode, run_matrix
from .m3cot import PromptStyle
from .metrics import RunMetrics, format_table
from .signals import Formulation

_STYLES = {"naive": PromptStyle.NAIVE, "cot": PromptStyle.COT,
           "concise": PromptStyle.CONCISE_COT}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cavlang",
        description="Collaborative driving with natural-language V2V messages")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one closed-loop episode")
    run_p.add_argument("--scenario", required=True, type=Path)
    run_p.add_argument("--style", choices=sorted(_STYLES), default="concise")
    run_p.add_argument("--signal", choices=[f.value for f in Formulation],
                       default="continuous")
    run_p.add_argument("--message", default="langpack",
                       choices=["none", "image", "langpack", "image+langpack"])
    run_p.add_argument("--backend-config", type=Path, default=None)
    run_p.add_argument("--backend", default="scripted",
                       help="default backend id for all agents")
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--out", type=Path, default=None)
    run_p.add_argument("--serve", type=int, default=None, metavar="PORT",
                       help="expose the live feed for the operator console")
    run_p.add_argument("--timeout", type=float, default=None)
    run_p.add_argument("--allow-live", action="store_true",
                       help="permit HTTP backends (transcripts always recorded)")
    run_p.add_argument("--record", type=Path, default=None,
                       help="write-through transcript cache directory")
    run_p.add_argument("--replay", type=Path, default=None,
                       help="serve every completion from this cache")

    matrix_p = sub.add_parser("matrix", help="run an experiment matrix")
    matrix_p.add_argument("--spec", required=True, type=Path)
    matrix_p.add_argument("--out", type=Path, default=None)

    report_p = sub.add_parser("report", help="render a results table")
    report_p.add_argument("--in", dest="in_dir", required=True, type=Path)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    record = args.record
    if args.allow_live and record is None and args.out is not None:
        record = args.out / "transcript_cache"  # live runs must stay replayable
    cfg = RunConfig(
        scenario_path=args.scenario,
        style=_STYLES[args.style],
        formulation=Formulation(args.signal),
        message_mode=args.message,
        backend_config_path=args.backend_config,
        default_backend=args.backend,
        seed=args.seed,
        timeout_s=args.timeout,
        out_dir=args.out,
        feed_port=args.serve,
        allow_live=args.allow_live,
        record_dir=record,
        replay_dir=args.replay,
    )
    log, results = run_episode(cfg)
    print(f"scenario={log.scenario} end={log.end_reason} t={log.end_time:.2f}s")
    for aid, m in sorted(results.items()):
        print(f"  {aid}: DS={m.ds:.1f} RC={m.rc:.1f} IP={m.ip:.3f} "
              f"TC={m.tc_s:.1f}s TB={m.tb_kb:.2f}KB")
    return 0


def _cmd_matrix(args: argparse.Namespace) -> int:
    matrix = load_matrix(args.spec)
    rows, table = run_matrix(matrix, out_dir=args.out)
    print(table)
    failures = [r for r in rows if "error" in r]
    for row in failures:
        print(f"cell {row['label']!r} failed: {row['error']}", file=sys.stderr)
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    results_path = args.in_dir / "results.jsonl"
    if not results_path.exists():
        print(f"no results.jsonl under {args.in_dir}", file=sys.stderr)
        return 1
    rows = []
    agent_ids: list[str] = []
    for line in results_path.read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if "metrics" not in rec:
            continue
        metrics = {aid: RunMetrics(
            agent_id=aid, ds=m["ds"], rc=m["rc"], ip=m["ip"],
            tc_s=m["tc_s"], tb_kb=m["tb_kb"],
            completion_time_s=m.get("completion_time_s"))
            for aid, m in rec["metrics"].items()}
        rows.append({"label": rec["label"], "metrics": metrics,
                     "tb_mean": rec.get("tb_mean")})
        if not agent_ids:
            agent_ids = sorted(metrics)
    print(format_table(rows, "Variation", agent_ids))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "matrix":
        return _cmd_matrix(args)
    return _cmd_report(args)


if __name__ == "__main__":
    sys.exit(main())
