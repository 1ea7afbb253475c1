"""Scenario runner: validate process files, execute runs, explain traces.

Exit codes
  0  run succeeded (partial success counts unless --no-partial-ok)
  1  partial success rejected by --no-partial-ok
  2  parse error, unreadable file, or malformed trace
  3  validation violations
  4  run failed safely (site restored to a consistent state)
  5  run failed unsafely (compensation could not restore the site)
  6  multi-site aggregate failure
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

from . import consistency, engine, model, pml, world as world_mod

EXIT_OK = 0
EXIT_PARTIAL_REFUSED = 1
EXIT_PARSE_ERROR = 2
EXIT_INVALID = 3
EXIT_FAILED_SAFE = 4
EXIT_FAILED_UNSAFE = 5
EXIT_AGGREGATE_FAILURE = 6


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="txdeploy",
                                     description="transactional deployment-process runner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="parse and validate a process file")
    p_validate.add_argument("--process", required=True, help="path to a .dproc file")
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="execute a process against a world")
    p_run.add_argument("--process", required=True, help="path to a .dproc file")
    p_run.add_argument("--world", required=True, help="path to a .world file")
    p_run.add_argument("--seed", type=int, default=0, help="seed for deterministic interleaving")
    p_run.add_argument("--threshold", type=float, default=None,
                       help="contingency threshold on the progress variable (default 0.5)")
    p_run.add_argument("--max-attempts", type=int, default=None,
                       help="maximum contingency attempts per activity (default 1)")
    p_run.add_argument("--multi", choices=["all", "best"], default=None,
                       help="run one site per world site under this multi-site mode")
    p_run.add_argument("--min-fraction", type=float, default=None,
                       help="minimum success fraction for --multi best")
    p_run.add_argument("--resume", action="store_true",
                       help="resume forward once after a successful compensation")
    p_run.add_argument("--trace-out", default=None, help="trace file path")
    p_run.add_argument("--report", choices=["table", "records"], default="table")
    p_run.add_argument("--partial-ok", action=argparse.BooleanOptionalAction, default=True,
                       help="treat partial success as success (default on)")
    p_run.set_defaults(func=cmd_run)

    p_explain = sub.add_parser("explain", help="pretty-print a trace file")
    p_explain.add_argument("trace", help="path to a trace file")
    p_explain.set_defaults(func=cmd_explain)
    return parser


def _read_file(path: str) -> str | None:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return None


def _parse_process(path: str) -> model.ProcessDefinition | None:
    source = _read_file(path)
    if source is None:
        return None
    result = pml.parse(source, file=path)
    for diag in result.diagnostics:
        print(diag, file=sys.stderr)
    return result.process


def cmd_validate(args) -> int:
    process = _parse_process(args.process)
    if process is None:
        return EXIT_PARSE_ERROR
    violations = model.validate(process)
    for violation in violations:
        print(f"violation: {violation}", file=sys.stderr)
    if violations:
        return EXIT_INVALID
    print(f"{args.process}: ok ({len(process.activities)} activities)")
    return EXIT_OK


def _default_trace_path(args) -> Path:
    base = os.environ.get("TXDEPLOY_TRACE_DIR", ".")
    stem = Path(args.process).stem
    return Path(base) / f"{stem}-{args.seed}.trace"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def cmd_run(args) -> int:
    process = _parse_process(args.process)
    if process is None:
        return EXIT_PARSE_ERROR
    violations = model.validate(process)
    if violations:
        for violation in violations:
            print(f"violation: {violation}", file=sys.stderr)
        return EXIT_INVALID

    source = _read_file(args.world)
    if source is None:
        return EXIT_PARSE_ERROR
    loaded = world_mod.parse_world(source, file=args.world)
    for diag in loaded.diagnostics:
        print(diag, file=sys.stderr)
    if loaded.world is None:
        return EXIT_PARSE_ERROR

    policy = engine.RecoveryPolicy()
    if args.threshold is not None:
        policy.contingency_threshold = args.threshold
    if args.max_attempts is not None:
        policy.max_contingency_attempts = args.max_attempts
    if args.resume:
        policy.resume_after_compensation = True

    multi = _multi_policy(args, process)
    trace_path = Path(args.trace_out) if args.trace_out else _default_trace_path(args)

    if multi is not None:
        return _run_multi(args, process, loaded.world, policy, multi, trace_path)
    return _run_single(args, process, loaded.world, policy, trace_path)


def _multi_policy(args, process: model.ProcessDefinition) -> model.MultiSitePolicy | None:
    if args.multi is None:
        multi = process.multi_site_policy
        if multi is not None and args.min_fraction is not None:
            multi.min_success_fraction = args.min_fraction
        return multi
    if args.multi == "all":
        return model.MultiSitePolicy(model.MultiSiteMode.ALL_OR_NOTHING)
    return model.MultiSitePolicy(model.MultiSiteMode.BEST_EFFORT,
                                 args.min_fraction if args.min_fraction is not None else 0.9)


def _run_id(process: model.ProcessDefinition, site: str, seed: int) -> str:
    return f"{process.name}@{site}#{seed}"


def _run_single(args, process, world, policy, trace_path: Path) -> int:
    pre_installed = {sid: set(s.installed) for sid, s in world.sites.items()}
    state = engine.run(process, world, policy, seed=args.seed)
    report = consistency.build_report(
        _run_id(process, world.default_site, args.seed), state, world, process, pre_installed)
    lines = engine.render_trace_lines(state)
    lines.append(json.dumps(consistency.report_record(report)))
    _atomic_write(trace_path, "\n".join(lines) + "\n")

    if args.report == "records":
        print(json.dumps(consistency.report_record(report)))
    else:
        print(consistency.render_table([report]))
    print(f"trace: {trace_path}")
    return _exit_code_single(state.outcome, args.partial_ok)


def _exit_code_single(outcome: engine.Outcome, partial_ok: bool) -> int:
    if outcome is engine.Outcome.SUCCEEDED_FULL:
        return EXIT_OK
    if outcome is engine.Outcome.SUCCEEDED_PARTIAL:
        return EXIT_OK if partial_ok else EXIT_PARTIAL_REFUSED
    if outcome is engine.Outcome.FAILED_SAFE:
        return EXIT_FAILED_SAFE
    return EXIT_FAILED_UNSAFE


def _run_multi(args, process, whole_world, policy, multi, trace_path: Path) -> int:
    worlds = whole_world.split_per_site()
    pre_installed = {w.default_site: set(w.site(None).installed) for w in worlds}
    result = engine.run_multi_site(process, worlds, policy, multi, seed=args.seed)
    world_by_site = {w.default_site: w for w in worlds}

    lines: list[str] = []
    reports = []
    for state in result.states:
        w = world_by_site[state.site]
        report = consistency.build_report(
            _run_id(process, state.site, args.seed), state, w, process,
            {state.site: pre_installed[state.site]})
        reports.append(report)
        lines.append(json.dumps({"site": state.site}))
        lines.extend(engine.render_trace_lines(state))
        lines.append(json.dumps(consistency.report_record(report)))
    aggregate_record = {
        "aggregate": {
            "verdict": result.aggregate,
            "mode": multi.mode.value,
            "success_fraction": result.success_fraction,
            "retry": result.retry if multi.retry_list_output or result.retry else [],
        }
    }
    lines.append(json.dumps(aggregate_record))
    _atomic_write(trace_path, "\n".join(lines) + "\n")

    if args.report == "records":
        for report in reports:
            print(json.dumps(consistency.report_record(report)))
        print(json.dumps(aggregate_record))
    else:
        print(consistency.render_table(reports, aggregate=result.aggregate, retry=result.retry))
    print(f"trace: {trace_path}")
    return EXIT_OK if result.aggregate == "Success" else EXIT_AGGREGATE_FAILURE


# --- explain ----------------------------------------------------------------


def cmd_explain(args) -> int:
    source = _read_file(args.trace)
    if source is None:
        return EXIT_PARSE_ERROR
    try:
        rendered = render_explanation(source)
    except ValueError as exc:
        print(f"error: malformed trace: {exc}", file=sys.stderr)
        return EXIT_PARSE_ERROR
    print(rendered)
    return EXIT_OK


def render_explanation(source: str) -> str:
    """Timeline view of a trace: lifecycle per activity, decisions, recovery arcs."""
    sections: list[tuple[str | None, list[dict]]] = []
    current: list[dict] = []
    current_site: str | None = None
    reports: list[dict] = []
    aggregate: dict | None = None
    for line_no, raw in enumerate(source.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {line_no}: {exc.msg}")
        if not isinstance(obj, dict):
            raise ValueError(f"line {line_no}: expected a JSON object")
        if "site" in obj and len(obj) == 1:
            if current:
                sections.append((current_site, current))
            current, current_site = [], obj["site"]
        elif "report" in obj:
            reports.append(obj["report"])
        elif "aggregate" in obj:
            aggregate = obj["aggregate"]
        elif "clock" in obj and "kind" in obj:
            current.append(obj)
        else:
            raise ValueError(f"line {line_no}: unrecognized record")
    if current or not sections:
        sections.append((current_site, current))

    out: list[str] = []
    for site, events in sections:
        if site is not None:
            out.append(f"=== site {site} ===")
        out.extend(_render_events(events))
        out.append("")
    for report in reports:
        out.append(
            f"report {report.get('site', '?')}: outcome={report.get('outcome')} "
            f"success={report.get('success')} safety={report.get('safety')}"
        )
        for item in report.get("evidence", []):
            out.append(f"  evidence: {item}")
    if aggregate is not None:
        out.append(f"aggregate: {aggregate.get('verdict')} "
                   f"(success fraction {aggregate.get('success_fraction')})")
        if aggregate.get("retry"):
            out.append(f"retry list: {', '.join(aggregate['retry'])}")
    return "\n".join(out).rstrip()


def _render_events(events: list[dict]) -> list[str]:
    if not events:
        return ["(empty trace)"]
    width = max(len(str(e.get("activity") or "-")) for e in events)
    width = max(width, 8)
    out = []
    for e in events:
        clock = e.get("clock")
        kind = e.get("kind", "?")
        activity = e.get("activity") or "-"
        payload = e.get("payload", {})
        detail = _describe(kind, payload)
        out.append(f"{clock:>5}  {activity:<{width}}  {detail}")
    return out


def _describe(kind: str, payload: dict) -> str:
    if kind == "Started":
        of = f" (recovery of {payload['of']})" if "of" in payload else ""
        return f"Started action={payload.get('action')}{of}"
    if kind == "Finished":
        if "target_status" in payload:
            return f'Finished -> {payload["of"]} becomes {payload["target_status"]}'
        return "Finished (Succeeded)"
    if kind == "ExceptionRaised":
        return f'ExceptionRaised {payload.get("kind")}: "{payload.get("detail")}"'
    if kind == "RoutedToKO":
        return f"RoutedToKO via port {payload.get('port')}"
    if kind == "DecisionMade":
        if payload.get("choice") == "Resume":
            return f"Resume from savepoint {payload.get('resume')}"
        reason = str(payload.get("reason", "")).replace(">=", "≥")
        sp = f" -> savepoint {payload['savepoint']}" if "savepoint" in payload else ""
        return f'DecisionMade "{payload.get("choice")} ({reason})"{sp}'
    if kind == "SavepointTaken":
        return f"SavepointTaken {payload.get('savepoint')} snapshot={payload.get('snapshot')}"
    if kind == "CompensationRun":
        return f"↩ compensate {payload.get('of')}"
    if kind == "ContingencyRun":
        return f"↪ contingency for {payload.get('of')} (attempt {payload.get('attempt')})"
    if kind == "SiteEffect":
        if payload.get("op") == "rollback":
            return f"SiteEffect rollback of {payload.get('attempt')} ({payload.get('removed')} effects undone)"
        return f"SiteEffect {payload.get('effect')} {payload.get('subject')} on {payload.get('site')}"
    return kind


if __name__ == "__main__":
    sys.exit(main())
