"""Context-adaptive verification and audit trails.

Each verifier returns a :class:`Quadruplet` (decision, confidence, explanation,
optional recovery plan). The metareasoner picks verifiers whose competence
covers the episode, runs them, and folds the results with :func:`synthesize`.
Results are keyed by verifier name and folded in name order, so execution
order cannot change the outcome.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .errors import (
    EmptyInput,
    InconsistentTransition,
    IntegrityViolation,
    MalformedObject,
    MissingReference,
    NotFound,
    UnitMismatch,
    UnknownField,
)
from .model import (
    HASH_RE,
    TaskTree,
    _int,
    _list,
    _obj,
    _str,
    canonical_bytes,
    canonical_encode,
    content_hash,
    decode_episode,
    extract_task_tree,
    load_json,
)

CONFIDENCE_FULL = 1_000_000
RULE_FAIL_CONFIDENCE = 900_000
TREE_FAIL_CONFIDENCE = 950_000
DISCREPANCY_PASS_CONFIDENCE = 950_000
DISCREPANCY_FAIL_CONFIDENCE = 800_000
KINDS = ("rule", "replay_determinism", "tree_isomorphism", "discrepancy", "hash_integrity")
ALWAYS_ON = ("hash_integrity", "replay_determinism")
ACTION_EVENTS = frozenset({"move_to", "grasp", "release", "open", "close", "pour"})


@dataclass(frozen=True)
class Quadruplet:
    decision: bool
    confidence_ppm: int
    explanation: str
    recovery: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.confidence_ppm <= 1_000_000:
            raise ValueError("confidence outside [0, 1000000] ppm")
        if self.decision and self.recovery is not None:
            raise ValueError("a passing decision carries no recovery plan")


@dataclass(frozen=True)
class VerifierSpec:
    name: str
    competence: frozenset
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown verifier kind '{self.kind}'")
        object.__setattr__(self, "competence", frozenset(self.competence))


@dataclass
class VerificationContext:
    """What a verifier may consult besides the episode itself."""

    store: object = None
    episode_hash: str | None = None
    rules: tuple = ()
    reference: object = None  # Episode
    reference_hash: str | None = None
    violations: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# tree isomorphism


def canonical_code(node) -> str:
    """AHU-style code: label followed by the sorted codes of the children."""
    kids = sorted(canonical_code(c) for c in node.children)
    return "(" + json.dumps(node.label, ensure_ascii=False) + "".join(kids) + ")"


def is_isomorphic(a, b) -> bool:
    """Rooted, labeled, unordered tree isomorphism."""
    ra = a.root if isinstance(a, TaskTree) else a
    rb = b.root if isinstance(b, TaskTree) else b
    return canonical_code(ra) == canonical_code(rb)


# ---------------------------------------------------------------------------
# metareasoner


def plan_verification(episode, available: Iterable[VerifierSpec]) -> list[VerifierSpec]:
    events = episode.event_types
    chosen = [v for v in available if v.kind in ALWAYS_ON or v.competence & events]
    names = [v.name for v in chosen]
    if len(set(names)) != len(names):
        raise ValueError("verifier names must be unique within a pipeline")
    return sorted(chosen, key=lambda v: v.name)


def _keyed(quadruplets) -> list[tuple[object, Quadruplet]]:
    if isinstance(quadruplets, Mapping):
        return sorted(quadruplets.items(), key=lambda kv: kv[0])
    items = list(quadruplets)
    if items and isinstance(items[0], tuple) and not isinstance(items[0], Quadruplet):
        return sorted(items, key=lambda kv: kv[0])
    return list(enumerate(items))


def synthesize(quadruplets) -> Quadruplet:
    """Fold verifier results into the final verdict.

    Pass: every verifier passed; confidence is the minimum. Fail: confidence
    and recovery plan come from the most confident failing verifier (ties by
    name); explanations of all failing verifiers are joined in order.
    Accepts a name->Quadruplet mapping, (name, Quadruplet) pairs, or a plain
    sequence (position order).
    """
    items = _keyed(quadruplets)
    if not items:
        raise EmptyInput("synthesize needs at least one quadruplet")
    failing = [(k, q) for k, q in items if not q.decision]
    if not failing:
        return Quadruplet(
            True,
            min(q.confidence_ppm for _, q in items),
            "; ".join(q.explanation for _, q in items),
        )
    best = failing[0][1]
    for _, q in failing[1:]:
        if q.confidence_ppm > best.confidence_ppm:
            best = q
    return Quadruplet(
        False,
        best.confidence_ppm,
        "; ".join(q.explanation for _, q in failing),
        best.recovery,
    )


# ---------------------------------------------------------------------------
# verifiers


def _plan_for(episode, store):
    from .simworld import decode_plan

    return decode_plan(store.get(episode.meta.plan_hash))


def _recovery(episode, ann_ids, store) -> tuple | None:
    """Re-execute the plan steps behind the given annotations."""
    try:
        plan = _plan_for(episode, store)
    except (NotFound, IntegrityViolation, MalformedObject, AttributeError):
        return None
    steps = []
    root = next(a.id for a in episode.annotations if a.parent is None)
    for ann_id in ann_ids:
        ann = episode.annotation(ann_id)
        if ann.parent != root or ann.event_type not in ACTION_EVENTS:
            continue
        i = int(ann.id[1:]) - 1
        if 0 <= i < len(plan.actions) and plan.actions[i] not in steps:
            steps.append(plan.actions[i])
    return tuple(steps) or None


def _hash_integrity(spec, episode, ctx):
    if ctx.store is None or ctx.episode_hash is None:
        return Quadruplet(False, CONFIDENCE_FULL, "episode is not in the store")
    try:
        data = ctx.store.get(ctx.episode_hash)
    except NotFound:
        return Quadruplet(False, CONFIDENCE_FULL, f"episode {ctx.episode_hash} missing from store")
    except IntegrityViolation:
        return Quadruplet(False, CONFIDENCE_FULL, f"episode {ctx.episode_hash} fails hash verification")
    if data != canonical_encode(episode):
        return Quadruplet(False, CONFIDENCE_FULL, "stored bytes differ from the episode under audit")
    return Quadruplet(True, CONFIDENCE_FULL, "hash verified")


def _replay_determinism(spec, episode, ctx):
    from .replay import re_execute_and_diff, replay

    try:
        rep = replay(episode)
    except InconsistentTransition as exc:
        return Quadruplet(False, CONFIDENCE_FULL, f"replay inconsistent: {exc}")
    recorded = sorted(episode.beliefs, key=lambda s: s.t)
    if list(rep.beliefs) != recorded:
        return Quadruplet(False, CONFIDENCE_FULL, "replayed belief timeline differs from the record")
    try:
        diff = re_execute_and_diff(episode, ctx.store)
    except (NotFound, IntegrityViolation, MalformedObject) as exc:
        return Quadruplet(False, CONFIDENCE_FULL, f"cannot re-execute: {exc}")
    if diff.status == "identical-bytes":
        return Quadruplet(True, CONFIDENCE_FULL, "re-execution reproduced identical bytes")
    return Quadruplet(
        False, CONFIDENCE_FULL, f"re-execution {diff.status}, first difference at {diff.first_difference}"
    )


def _rule(spec, episode, ctx):
    from .rules import evaluate

    rules = [r for r in ctx.rules if not spec.competence or r.scope in spec.competence]
    violations = []
    try:
        for r in rules:
            violations += evaluate(r, episode)
    except (UnknownField, UnitMismatch) as exc:
        return Quadruplet(False, RULE_FAIL_CONFIDENCE, f"rule evaluation error: {exc}")
    ctx.violations.extend(violations)
    errors = [v for v in violations if v.severity == "error"]
    if not errors:
        note = f"{len(rules)} rule(s) satisfied"
        if violations:
            note += "; warnings: " + "; ".join(v.message for v in violations)
        return Quadruplet(True, CONFIDENCE_FULL, note)
    return Quadruplet(
        False,
        RULE_FAIL_CONFIDENCE,
        "; ".join(v.message for v in errors),
        _recovery(episode, [v.annotation for v in errors], ctx.store),
    )


def _tree_isomorphism(spec, episode, ctx):
    if ctx.reference is None:
        raise MissingReference(f"verifier {spec.name} needs a reference episode")
    tree = extract_task_tree(episode)
    failed = sorted({lbl[0] for lbl in tree.root.labels() if lbl[2] == "failed"})
    if not is_isomorphic(tree, extract_task_tree(ctx.reference)):
        why = "task tree not isomorphic to reference"
        if failed:
            why += "; failed steps: " + ", ".join(failed)
        return Quadruplet(False, TREE_FAIL_CONFIDENCE, why)
    if failed:
        return Quadruplet(False, TREE_FAIL_CONFIDENCE, "task tree contains failed steps: " + ", ".join(failed))
    return Quadruplet(True, CONFIDENCE_FULL, "task tree isomorphic to reference")


def _discrepancy(spec, episode, ctx):
    from .simworld import compare_outcomes, predict, scene_from_manifest

    try:
        plan = _plan_for(episode, ctx.store)
    except (NotFound, IntegrityViolation, MalformedObject) as exc:
        return Quadruplet(False, DISCREPANCY_FAIL_CONFIDENCE, f"no plan to predict from: {exc}")
    predicted = predict(scene_from_manifest(episode.scene), plan, episode.meta.tick_us)
    report = compare_outcomes(predicted, episode)
    if report.overall == "match":
        return Quadruplet(True, DISCREPANCY_PASS_CONFIDENCE, "observed outcome matches prediction")
    entities = {d.entity for d in report.items}
    touching = [a for a in episode.annotations if entities & set(a.participants.values())]
    failed = [a.id for a in touching if a.outcome == "failed"]
    targets = failed or [a.id for a in touching]
    text = "; ".join(f"{d.entity}.{d.attribute}: {d.explanation}" for d in report.items)
    return Quadruplet(False, DISCREPANCY_FAIL_CONFIDENCE, text, _recovery(episode, targets, ctx.store))


_RUNNERS = {
    "hash_integrity": _hash_integrity,
    "replay_determinism": _replay_determinism,
    "rule": _rule,
    "tree_isomorphism": _tree_isomorphism,
    "discrepancy": _discrepancy,
}


def run_verifier(spec: VerifierSpec, episode, context: VerificationContext) -> Quadruplet:
    return _RUNNERS[spec.kind](spec, episode, context)


# ---------------------------------------------------------------------------
# audit trails


@dataclass(frozen=True)
class AuditTrail:
    episode: str
    pipeline: tuple
    results: Mapping[str, Quadruplet]
    final: Quadruplet
    violations: tuple = ()
    rules_hash: str = ""
    reference: str | None = None
    created: str = field(default="", compare=False)
    hash: str | None = field(default=None, compare=False)


def quad_doc(q: Quadruplet) -> dict:
    from .simworld import action_doc

    return {
        "confidence_ppm": q.confidence_ppm,
        "decision": q.decision,
        "explanation": q.explanation,
        "recovery": None if q.recovery is None else [action_doc(a) for a in q.recovery],
    }


def quad_from_doc(d, where="quadruplet") -> Quadruplet:
    from .simworld import action_from_doc

    d = _obj(d, {"confidence_ppm", "decision", "explanation", "recovery"}, where)
    if not isinstance(d["decision"], bool):
        raise MalformedObject(f"{where}.decision: expected boolean")
    rec = None if d["recovery"] is None else tuple(action_from_doc(a) for a in _list(d["recovery"], where))
    try:
        return Quadruplet(d["decision"], _int(d["confidence_ppm"], where), _str(d["explanation"], where), rec)
    except ValueError as exc:
        raise MalformedObject(f"{where}: {exc}") from None


def audit_doc(t: AuditTrail) -> dict:
    return {
        "kind": "audit_trail",
        "schema_version": 1,
        "episode": t.episode,
        "reference": t.reference,
        "rules_hash": t.rules_hash,
        "pipeline": list(t.pipeline),
        "results": {k: quad_doc(q) for k, q in t.results.items()},
        "final": quad_doc(t.final),
        "violations": [
            {
                "annotation": v.annotation,
                "message": v.message,
                "observed": v.observed,
                "rule": v.rule,
                "severity": v.severity,
                "threshold": v.threshold,
            }
            for v in t.violations
        ],
    }


def encode_audit_trail(t: AuditTrail) -> bytes:
    return canonical_bytes(audit_doc(t))


def decode_audit_trail(data: bytes) -> AuditTrail:
    from .rules import Violation

    keys = {"kind", "schema_version", "episode", "reference", "rules_hash", "pipeline", "results", "final", "violations"}
    d = _obj(load_json(data), keys, "audit_trail")
    if d["kind"] != "audit_trail" or d["schema_version"] != 1:
        raise MalformedObject("audit_trail: wrong kind or schema_version")
    episode = _str(d["episode"], "episode")
    if not HASH_RE.match(episode):
        raise MalformedObject("audit_trail.episode: not a content hash")
    if not isinstance(d["results"], dict):
        raise MalformedObject("audit_trail.results: expected object")
    violations = []
    for v in _list(d["violations"], "violations"):
        v = _obj(v, {"annotation", "message", "observed", "rule", "severity", "threshold"}, "violation")
        obs = None if v["observed"] is None else _int(v["observed"], "observed")
        violations.append(
            Violation(
                _str(v["rule"], "rule"),
                _str(v["annotation"], "annotation"),
                obs,
                _int(v["threshold"], "threshold"),
                _str(v["message"], "message"),
                _str(v["severity"], "severity"),
            )
        )
    ref = d["reference"]
    return AuditTrail(
        episode=episode,
        pipeline=tuple(_str(n, "pipeline") for n in _list(d["pipeline"], "pipeline")),
        results={k: quad_from_doc(q, f"results.{k}") for k, q in d["results"].items()},
        final=quad_from_doc(d["final"], "final"),
        violations=tuple(violations),
        rules_hash=_str(d["rules_hash"], "rules_hash"),
        reference=None if ref is None else _str(ref, "reference"),
    )


def default_verifiers(rules, with_reference: bool, episode) -> list[VerifierSpec]:
    out = [
        VerifierSpec("hash_integrity", frozenset(), "hash_integrity"),
        VerifierSpec("replay_determinism", frozenset(), "replay_determinism"),
        VerifierSpec("discrepancy", ACTION_EVENTS, "discrepancy"),
    ]
    if rules:
        out.append(VerifierSpec("rules", frozenset(r.scope for r in rules), "rule"))
    if with_reference:
        out.append(VerifierSpec("task_tree", episode.event_types, "tree_isomorphism"))
    return out


def audit(store, episode_hash: str, rules_text="", reference_hash: str | None = None, *, available=None, created=""):
    """Plan, run and synthesize verification, then store the trail.

    The returned trail carries its own content hash in ``hash``.
    """
    from .rules import parse_rules

    episode = decode_episode(store.get(episode_hash))
    if isinstance(rules_text, str):
        rules_text = rules_text.encode("utf-8")
    rules = tuple(parse_rules(rules_text))
    reference = None
    if reference_hash is not None:
        reference = decode_episode(store.get(reference_hash))
    ctx = VerificationContext(store, episode_hash, rules, reference, reference_hash)
    if available is None:
        available = default_verifiers(rules, reference is not None, episode)
    pipeline = plan_verification(episode, available)
    results = {spec.name: run_verifier(spec, episode, ctx) for spec in pipeline}
    trail = AuditTrail(
        episode=episode_hash,
        pipeline=tuple(s.name for s in pipeline),
        results=results,
        final=synthesize(results),
        violations=tuple(ctx.violations),
        rules_hash=content_hash(rules_text),
        reference=reference_hash,
        created=created,
    )
    h = store.put(encode_audit_trail(trail), "audit_trail", created=created or None)
    return replace(trail, hash=h)
