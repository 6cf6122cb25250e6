"""Command-line entry points: run, serve, replay, kr inspect, gen-stream, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ExpertLoopError
from .events import load_events
from .metrics import render_metrics_table


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--dataset", "--stream", dest="stream_path", help="stream file (JSONL)")
    parser.add_argument("--budget", type=int)
    parser.add_argument("--cost-mode", choices=["uniform", "cuad", "custom-file"], dest="cost_mode")
    parser.add_argument("--cost-file", dest="cost_file")
    parser.add_argument("--oracle", choices=["scripted", "llm"], help="oracle adapter (human runs go through serve)")
    parser.add_argument("--llm", help="mock | script:<path> | http")
    parser.add_argument("--policy", choices=["guided", "random", "uncertainty"])
    parser.add_argument("--random-rate", type=float, dest="random_rate")
    parser.add_argument("--theta", type=float, dest="uncertainty_theta")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--truth", dest="truth_path")
    parser.add_argument("--oracle-pack", dest="oracle_pack_path")
    parser.add_argument("--labels", nargs="+")
    parser.add_argument("--kr0", dest="kr0_path")
    parser.add_argument("--phases-file", help="JSON list of phase specs")
    parser.add_argument("--w-po", type=float, dest="w_po")
    parser.add_argument("--decay-per-day", type=float, dest="decay_per_day")
    parser.add_argument("--n-top", type=int, dest="n_top")
    parser.add_argument("--tau-score", type=float, dest="tau_score")
    parser.add_argument("--retrieval-mode", choices=["top_n", "threshold"], dest="retrieval_mode")
    parser.add_argument("--tau-sim", type=float, dest="tau_sim")
    parser.add_argument(
        "--no-conflict-resolution", action="store_true", help="skip the relation pass on integration"
    )
    parser.add_argument("--query-kinds", nargs="+", dest="allowed_query_kinds", help="restrict query kinds")
    parser.add_argument("--question-set", dest="question_set")
    parser.add_argument("--out-dir", help="directory for the event log and metrics sidecar")


def _overrides_from_args(args: argparse.Namespace) -> dict:
    keys = [
        "stream_path", "budget", "cost_mode", "cost_file", "oracle", "llm", "policy",
        "random_rate", "uncertainty_theta", "seed", "truth_path", "oracle_pack_path",
        "labels", "kr0_path", "w_po", "decay_per_day", "n_top", "tau_score",
        "retrieval_mode", "tau_sim", "allowed_query_kinds", "question_set",
    ]
    overrides = {key: getattr(args, key, None) for key in keys}
    if args.no_conflict_resolution:
        overrides["conflict_resolution"] = False
    if args.phases_file:
        overrides["phases"] = json.loads(Path(args.phases_file).read_text(encoding="utf-8"))
    return overrides


def cmd_run(args: argparse.Namespace) -> int:
    from .config import build_run, load_config
    from .harness import run_stream

    overrides = _overrides_from_args(args)
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        overrides["log_path"] = str(out_dir / "events.log")
    config = load_config(path=args.config, overrides=overrides)
    assembled = build_run(config)
    metrics = run_stream(assembled.stream, assembled.state, assembled.oracle, assembled.policy, assembled.llm)
    print(render_metrics_table(metrics, title=config.run_id))
    if out_dir:
        (out_dir / "metrics.json").write_text(
            json.dumps(metrics.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
        print(f"event log: {out_dir / 'events.log'}")
        print(f"metrics sidecar: {out_dir / 'metrics.json'}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve

    serve(args.config, args.host, args.port, args.token, args.runs_dir)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    from .harness import replay_run

    records = load_events(args.log)
    result = replay_run(records)
    print(render_metrics_table(result.metrics, title=f"replay:{result.run_id}"))
    if args.out:
        Path(args.out).write_text(
            json.dumps(result.metrics.to_dict(), indent=2, sort_keys=True), encoding="utf-8"
        )
    return 0


def cmd_kr(args: argparse.Namespace) -> int:
    from .kr import KnowledgeRepository

    records = load_events(args.log)
    run_id = "run"
    for record in records:
        if record.kind == "run_control" and record.payload.get("action") == "start":
            run_id = record.payload.get("run_id", run_id)
            break
    repo = KnowledgeRepository.replay_from_log(records, run_id=run_id)
    items = repo.items()
    if args.status:
        items = [item for item in items if item.status.value == args.status]
    if args.q:
        lowered = args.q.lower()
        items = [item for item in items if lowered in item.content.text.lower()]
    for item in items:
        marker = f" superseded_by={item.meta.superseded_by}" if item.meta.superseded_by else ""
        print(
            f"{item.kid}  [{item.status.value}]  added={item.ts_added} validated={item.ts_validated} "
            f"uses={item.meta.usage_count}{marker}\n    {item.content.text}"
        )
    print(f"({len(items)} items)")
    return 0


def cmd_gen_stream(args: argparse.Namespace) -> int:
    from .stream import PhaseSpec, write_stream
    from .streamgen import DriftStreamConfig, RuleDomainSpec, make_drift_stream, make_rule_discovery_task

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.preset == "rules":
        spec = RuleDomainSpec(
            n=args.n,
            n_rules=args.rules,
            seed=args.seed,
            flip_ordinal=args.flip_ordinal,
            flip_marker=args.flip_marker,
        )
        instances, table, phases = make_rule_discovery_task(spec)
    else:
        raw = json.loads(Path(args.phases_file).read_text(encoding="utf-8"))
        phases = [PhaseSpec.from_dict(p) for p in raw]
        labels = args.labels or sorted({label for p in phases for label in p.label_frequency})
        config = DriftStreamConfig(n=args.n, labels=list(labels), field_templates={})
        instances, table = make_drift_stream(phases, config, seed=args.seed)
    write_stream(out / "stream.jsonl", instances)
    table.write(out / "truth.jsonl", out / "oracle_pack.json")
    (out / "phases.json").write_text(
        json.dumps([p.to_dict() for p in phases], indent=2), encoding="utf-8"
    )
    print(f"wrote {len(instances)} instances to {out / 'stream.jsonl'}")
    print(f"truth table: {out / 'truth.jsonl'}")
    print(f"oracle pack: {out / 'oracle_pack.json'}")
    print(f"phases: {out / 'phases.json'}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .harness import replay_run

    records = load_events(args.log)
    result = replay_run(records)
    print(render_metrics_table(result.metrics, title=result.run_id))
    sidecar = {
        "run_id": result.run_id,
        "metrics": result.metrics.to_dict(),
        "processed": result.processed,
    }
    out = Path(args.out) if args.out else Path(args.log).with_suffix(".metrics.json")
    out.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    print(f"metrics sidecar: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertloop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a batch run with scripted/llm providers")
    _add_run_flags(run_p)
    run_p.set_defaults(fn=cmd_run)

    serve_p = sub.add_parser("serve", help="start the HTTP service")
    serve_p.add_argument("--config", help="service config JSON (token)")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8765)
    serve_p.add_argument("--token", help="shared auth token (X-Auth-Token header)")
    serve_p.add_argument("--runs-dir", default="runs")
    serve_p.set_defaults(fn=cmd_serve)

    replay_p = sub.add_parser("replay", help="rebuild state and metrics from an event log")
    replay_p.add_argument("log")
    replay_p.add_argument("--out", help="write metrics JSON here")
    replay_p.set_defaults(fn=cmd_replay)

    kr_p = sub.add_parser("kr", help="knowledge repository tools")
    kr_sub = kr_p.add_subparsers(dest="kr_command", required=True)
    inspect_p = kr_sub.add_parser("inspect", help="list items reconstructed from an event log")
    inspect_p.add_argument("log")
    inspect_p.add_argument("--status", choices=["Valid", "PotentiallyOutdated", "Superseded"])
    inspect_p.add_argument("--q", help="substring filter over item text")
    inspect_p.set_defaults(fn=cmd_kr)

    gen_p = sub.add_parser("gen-stream", help="generate a drift stream plus oracle tables")
    gen_p.add_argument("--preset", choices=["rules", "phases"], default="rules")
    gen_p.add_argument("--n", type=int, default=500)
    gen_p.add_argument("--rules", type=int, default=10)
    gen_p.add_argument("--seed", type=int, default=20240601)
    gen_p.add_argument("--flip-ordinal", type=int, dest="flip_ordinal")
    gen_p.add_argument("--flip-marker", dest="flip_marker", default="R1")
    gen_p.add_argument("--phases-file", help="JSON phase list (preset=phases)")
    gen_p.add_argument("--labels", nargs="+")
    gen_p.add_argument("--out-dir", required=True)
    gen_p.set_defaults(fn=cmd_gen_stream)

    report_p = sub.add_parser("report", help="metrics table plus machine-readable sidecar")
    report_p.add_argument("log")
    report_p.add_argument("--out")
    report_p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ExpertLoopError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
