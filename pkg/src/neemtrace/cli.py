"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error,
3 object not found, 4 integrity violation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import (
    InconsistentTransition,
    IntegrityViolation,
    InvalidPlan,
    InvalidScene,
    MalformedObject,
    MalformedTree,
    NotFound,
    ParseError,
    StoreLocked,
    TraceError,
    UnitMismatch,
    UnknownField,
)
from .model import Quantity, Ref, canonical_encode, decode_episode, is_pose, pose_ints
from .simworld import DEFAULT_TICK_US, FaultSpec, decode_faults_file, decode_plan, decode_scene, describe_action, encode_plan, run_plan
from .store import KINDS, Store, _now

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_NOT_FOUND = 3
EXIT_INTEGRITY = 4


class _Usage(Exception):
    pass


def fmt_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Quantity):
        return f"{v.value} {v.unit.value}"
    if isinstance(v, Ref):
        return f"@{v.id}"
    if is_pose(v):
        x, y, z = pose_ints(v)
        return f"({x}, {y}, {z}) µm"
    return str(v)


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise _Usage(f"cannot read {path}: {exc.strerror}") from None


def _store(args) -> Store:
    return Store(args.store) if args.store else Store.from_env()


def _load_episode(store: Store, h: str):
    if store.kind_of(h) != "episode":
        raise NotFound(f"object {h} is not an episode")
    return decode_episode(store.get(h))


def cmd_run(args, out) -> int:
    from dataclasses import replace

    from .perception import decode_pipeline

    scene = decode_scene(_read(args.scene))
    plan = decode_plan(_read(args.plan))
    if args.ppt:
        plan = replace(plan, perception=decode_pipeline(_read(args.ppt)))
    faults = decode_faults_file(_read(args.faults)) if args.faults else FaultSpec()
    episode = run_plan(scene, plan, args.seed, args.tick_us, faults)
    store = _store(args)
    created = _now()
    with store.writer():
        store.put(encode_plan(plan), "plan", created=created)
        h = store.put(canonical_encode(episode), "episode", created=created)
    out.write(f"{h}\n")
    if not args.deterministic_output:
        out.write(f"created: {store.index[h].get('created', created)}\n")
    return EXIT_OK


def cmd_replay(args, out) -> int:
    from .replay import replay

    e = _load_episode(_store(args), args.hash)
    r = replay(e)
    out.write(f"episode {args.hash}\n")
    out.write(f"transitions applied: {r.steps}\n")
    out.write(f"belief snapshots: {len(r.beliefs)}\n")
    beliefs_ok = r.beliefs == tuple(e.beliefs)
    out.write(f"beliefs match record: {'yes' if beliefs_ok else 'no'}\n")
    out.write("final state:\n")
    for ent in sorted(r.final_state):
        for attr in sorted(r.final_state[ent]):
            out.write(f"  {ent}.{attr} = {fmt_value(r.final_state[ent][attr])}\n")
    return EXIT_OK if beliefs_ok else EXIT_FAILED


def _write_quad(out, name, q, indent="  "):
    out.write(f"{indent}{name}: D_s={'true' if q.decision else 'false'} C_f={q.confidence_ppm} ppm\n")
    out.write(f"{indent}  E_d: {q.explanation}\n")
    if q.recovery is not None:
        out.write(f"{indent}  E_r:\n")
        for i, a in enumerate(q.recovery, 1):
            out.write(f"{indent}    {i}. {describe_action(a)}\n")


def cmd_verify(args, out) -> int:
    from .verify import audit

    store = _store(args)
    rules_text = _read(args.rules) if args.rules else b""
    _load_episode(store, args.hash)
    if args.reference:
        _load_episode(store, args.reference)
    trail = audit(store, args.hash, rules_text, args.reference, created=_now())
    out.write(f"audit trail {trail.hash}\n")
    if not args.deterministic_output:
        out.write(f"created: {trail.created}\n")
    out.write(f"episode: {trail.episode}\n")
    out.write(f"pipeline: {', '.join(trail.pipeline)}\n")
    out.write("results:\n")
    for name in trail.pipeline:
        _write_quad(out, name, trail.results[name])
    for v in trail.violations:
        out.write(f"violation [{v.severity}]: {v.message}\n")
    _write_quad(out, "final", trail.final, indent="")
    return EXIT_OK if trail.final.decision else EXIT_FAILED


def cmd_diff(args, out) -> int:
    from .replay import re_execute_and_diff

    store = _store(args)
    e = _load_episode(store, args.hash)
    report = re_execute_and_diff(e, store)
    out.write(f"status: {report.status}\n")
    out.write(f"rerun: {report.rerun_hash}\n")
    if report.first_difference is not None:
        out.write(f"first difference: {report.first_difference}\n")
    return EXIT_FAILED if report.status == "mismatch" else EXIT_OK


def cmd_query(args, out) -> int:
    from .query import parse_query, run_query

    text = sys.stdin.buffer.read() if args.text == "-" else args.text.encode("utf-8")
    table = run_query(parse_query(text), _store(args))
    if args.format == "canonical":
        out.write(table.to_canonical().decode("utf-8") + "\n")
    else:
        out.write(table.to_tsv())
    return EXIT_OK


def cmd_store(args, out) -> int:
    store = _store(args)
    if args.action == "list":
        for h in store.list(args.kind):
            out.write(f"{h}\t{store.index[h]['kind']}\n")
        return EXIT_OK
    bad = 0
    for h, status in store.verify_all():
        out.write(f"{h}\t{status}\n")
        bad += status != "ok"
    out.write(f"{bad} problem(s)\n")
    return EXIT_INTEGRITY if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neemtrace", description="Record, store, replay, verify and query robot episodes.")
    p.add_argument("--store", metavar="DIR", help="store directory (default: $TRACE_STORE_DIR or .trace-store)")
    p.add_argument("--deterministic-output", action="store_true", help="suppress timestamp lines")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute a plan in the simulator and store the episode")
    r.add_argument("--scene", required=True)
    r.add_argument("--plan", required=True)
    r.add_argument("--seed", required=True, type=int)
    r.add_argument("--tick-us", type=int, default=DEFAULT_TICK_US)
    r.add_argument("--faults")
    r.add_argument("--ppt", help="perception pipeline tree to run after the plan")
    r.set_defaults(func=cmd_run)

    r = sub.add_parser("replay", help="rebuild state and beliefs from a stored episode")
    r.add_argument("hash")
    r.set_defaults(func=cmd_replay)

    r = sub.add_parser("verify", help="audit an episode; exit 1 if the verdict is negative")
    r.add_argument("hash")
    r.add_argument("--rules")
    r.add_argument("--reference", metavar="HASH")
    r.set_defaults(func=cmd_verify)

    r = sub.add_parser("diff", help="re-execute an episode and compare")
    r.add_argument("hash")
    r.set_defaults(func=cmd_diff)

    r = sub.add_parser("query", help="run a query ('-' reads stdin)")
    r.add_argument("text")
    r.add_argument("--format", choices=("tsv", "canonical"), default="tsv")
    r.set_defaults(func=cmd_query)

    r = sub.add_parser("store", help="inspect the object store")
    r.add_argument("action", choices=("verify", "list"))
    r.add_argument("--kind", choices=KINDS)
    r.set_defaults(func=cmd_store)
    return p


USAGE_ERRORS = (
    _Usage,
    ParseError,
    MalformedObject,
    MalformedTree,
    InvalidScene,
    InvalidPlan,
    UnknownField,
    UnitMismatch,
)


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args, out)
    except NotFound as exc:
        err.write(f"not found: {exc}\n")
        return EXIT_NOT_FOUND
    except (IntegrityViolation, InconsistentTransition) as exc:
        err.write(f"integrity violation: {exc}\n")
        return EXIT_INTEGRITY
    except USAGE_ERRORS as exc:
        err.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (StoreLocked, TraceError) as exc:
        err.write(f"error: {exc}\n")
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
