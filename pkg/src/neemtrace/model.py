"""Three-layer episode model, canonical text encoding and task trees.

An episode holds raw frames (sensor streams), symbolic transitions (discrete
state changes) and semantic annotations (nested events), plus the belief
timeline. Every stored quantity is an integer in micro-units.

The canonical form is compact JSON with sorted keys, UTF-8, integers only.
``meta.created`` is wall-clock metadata and is never encoded, so identical
reruns produce identical bytes.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

from .errors import CycleDetected, InvalidEpisode, MalformedObject, MultipleRoots

SCHEMA_VERSION = 1
HASH_RE = re.compile(r"^[0-9a-f]{64}$")
ROLES = ("agent", "destination", "patient", "source")
OUTCOMES = ("succeeded", "failed")
MASK64 = (1 << 64) - 1


class Unit(str, enum.Enum):
    UM = "µm"
    URAD = "µrad"
    UN = "µN"
    UL = "µL"
    UG = "µg"
    US = "µs"
    PPM = "ppm"


@dataclass(frozen=True)
class Quantity:
    value: int
    unit: Unit

    def __post_init__(self):
        if type(self.value) is not int:
            raise TypeError(f"quantity value must be int, got {self.value!r}")
        object.__setattr__(self, "unit", Unit(self.unit))


@dataclass(frozen=True)
class Ref:
    """Reference to an entity of the scene manifest."""

    id: str


Pose = tuple  # (Quantity, Quantity, Quantity) in µm
Value = Union[Pose, Quantity, Ref, bool, str, None]


def pose(x: int, y: int, z: int) -> Pose:
    return (Quantity(x, Unit.UM), Quantity(y, Unit.UM), Quantity(z, Unit.UM))


def pose_ints(p: Pose) -> tuple[int, int, int]:
    return tuple(q.value for q in p)


def is_pose(v: Any) -> bool:
    return (
        isinstance(v, tuple)
        and len(v) == 3
        and all(isinstance(q, Quantity) and q.unit is Unit.UM for q in v)
    )


@dataclass(frozen=True)
class FaultSpec:
    grasp_slip_ppm: int = 0
    pour_spill_ppm: int = 0

    @property
    def is_zero(self) -> bool:
        return self.grasp_slip_ppm == 0 and self.pour_spill_ppm == 0


@dataclass(frozen=True)
class Meta:
    plan_hash: str
    seed: int
    tick_us: int
    faults: FaultSpec = FaultSpec()
    nominal: bool = False
    schema_version: int = SCHEMA_VERSION
    created: str = field(default="", compare=False)


@dataclass(frozen=True)
class EntityDescriptor:
    """Scene manifest entry; ``attrs`` is the entity's initial state."""

    id: str
    type: str
    attrs: Mapping[str, Value]


@dataclass(frozen=True)
class RawFrame:
    t: int
    stream: str
    payload: tuple  # ((field-name, Quantity), ...)

    def get(self, name: str) -> Quantity | None:
        for key, q in self.payload:
            if key == name:
                return q
        return None


@dataclass(frozen=True)
class SymbolicTransition:
    t: int
    entity: str
    attribute: str
    old: Value
    new: Value


@dataclass(frozen=True)
class SemanticAnnotation:
    id: str
    begin: int
    end: int
    event_type: str
    participants: Mapping[str, str]
    outcome: str = "succeeded"
    failure_reason: str | None = None
    parent: str | None = None


@dataclass(frozen=True)
class Belief:
    pose: Pose
    confidence_ppm: int


@dataclass(frozen=True)
class BeliefSnapshot:
    t: int
    beliefs: Mapping[str, Belief]


@dataclass(frozen=True)
class Episode:
    meta: Meta
    scene: tuple
    frames: tuple = ()
    transitions: tuple = ()
    annotations: tuple = ()
    beliefs: tuple = ()

    @property
    def event_types(self) -> frozenset:
        return frozenset(a.event_type for a in self.annotations)

    def annotation(self, ann_id: str) -> SemanticAnnotation:
        for a in self.annotations:
            if a.id == ann_id:
                return a
        raise KeyError(ann_id)


# ---------------------------------------------------------------------------
# validation


def annotation_id(n: int) -> str:
    return f"a{n:04d}"


def _is_u64(x) -> bool:
    return type(x) is int and 0 <= x <= MASK64


def _value_refs(v: Value):
    if isinstance(v, Ref):
        yield v.id


def validate_episode(e: Episode) -> list[str]:
    """Every broken invariant as a human-readable line; empty when valid."""
    out: list[str] = []
    m = e.meta
    if m.schema_version != SCHEMA_VERSION:
        out.append(f"meta: unsupported schema_version {m.schema_version}")
    if not isinstance(m.plan_hash, str) or not HASH_RE.match(m.plan_hash):
        out.append("meta: plan_hash is not a 64-digit lowercase hex digest")
    if not _is_u64(m.seed):
        out.append("meta: seed is not a 64-bit unsigned integer")
    if type(m.tick_us) is not int or m.tick_us < 1:
        out.append("meta: tick_us must be a positive integer")
    for name in ("grasp_slip_ppm", "pour_spill_ppm"):
        p = getattr(m.faults, name)
        if type(p) is not int or not 0 <= p <= 1_000_000:
            out.append(f"meta: faults.{name} outside [0, 1000000]")

    ids = {d.id for d in e.scene}
    if len(ids) != len(e.scene):
        out.append("scene: duplicate entity id")
    for d in e.scene:
        for attr, v in d.attrs.items():
            for r in _value_refs(v):
                if r not in ids:
                    out.append(f"scene {d.id}.{attr}: unknown entity '{r}'")

    last_t: dict[str, int] = {}
    for i, f in enumerate(e.frames):
        if f.t < 0:
            out.append(f"frame {i}: negative timestamp")
        prev = last_t.get(f.stream)
        if prev is not None and f.t <= prev:
            out.append(f"frame {i}: timestamps in stream '{f.stream}' not strictly increasing")
        last_t[f.stream] = f.t
        names = [k for k, _ in f.payload]
        if len(set(names)) != len(names):
            out.append(f"frame {i}: duplicate payload field")

    prev_t = 0
    for i, tr in enumerate(e.transitions):
        if tr.t < 0:
            out.append(f"transition {i}: negative timestamp")
        if tr.t < prev_t:
            out.append(f"transition {i}: timestamp decreases")
        prev_t = max(prev_t, tr.t)
        if tr.entity not in ids:
            out.append(f"transition {i}: unknown entity '{tr.entity}'")
        if tr.new == tr.old:
            out.append(f"transition {i}: new_value equals old_value")
        for v in (tr.old, tr.new):
            for r in _value_refs(v):
                if r not in ids:
                    out.append(f"transition {i}: unknown entity '{r}'")

    by_id: dict[str, SemanticAnnotation] = {}
    for a in e.annotations:
        if a.id in by_id:
            out.append(f"annotation {a.id}: duplicate id")
        by_id[a.id] = a
    roots = [a for a in e.annotations if a.parent is None]
    if len(roots) != 1:
        out.append(f"annotations: expected exactly one root, found {len(roots)}")
    for a in e.annotations:
        if a.begin < 0 or a.begin > a.end:
            out.append(f"annotation {a.id}: invalid interval [{a.begin}, {a.end}]")
        if a.outcome not in OUTCOMES:
            out.append(f"annotation {a.id}: unknown outcome '{a.outcome}'")
        for role, ent in a.participants.items():
            if role not in ROLES:
                out.append(f"annotation {a.id}: unknown role '{role}'")
            if ent not in ids:
                out.append(f"annotation {a.id}: unknown entity '{ent}'")
        if a.parent is not None:
            p = by_id.get(a.parent)
            if p is None:
                out.append(f"annotation {a.id}: unknown parent {a.parent}")
            elif not (p.begin <= a.begin and a.end <= p.end):
                out.append(f"annotation {a.id}: interval not contained in parent {p.id}")
    for a in e.annotations:
        seen = {a.id}
        cur = a
        while cur.parent is not None and cur.parent in by_id:
            if cur.parent in seen:
                out.append(f"annotation {a.id}: parent chain contains a cycle")
                break
            seen.add(cur.parent)
            cur = by_id[cur.parent]

    prev_b = -1
    for i, b in enumerate(e.beliefs):
        if b.t <= prev_b:
            out.append(f"belief {i}: timestamps not strictly increasing")
        prev_b = b.t
        for ent, bel in b.beliefs.items():
            if ent not in ids:
                out.append(f"belief {i}: unknown entity '{ent}'")
            if not 0 <= bel.confidence_ppm <= 1_000_000:
                out.append(f"belief {i}: confidence of '{ent}' outside [0, 1000000]")

    if e.annotations:
        horizon = max(a.end for a in e.annotations)
        stamps = [f.t for f in e.frames] + [t.t for t in e.transitions] + [b.t for b in e.beliefs]
        if stamps and max(stamps) > horizon:
            out.append(f"timestamps: record at {max(stamps)} after last annotation end {horizon}")
    return out


# ---------------------------------------------------------------------------
# canonical encoding


def canonical_bytes(doc: Any) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def content_hash(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def encode_quantity(q: Quantity) -> dict:
    return {"u": q.unit.value, "v": q.value}


def encode_pose(p: Pose) -> list:
    return [encode_quantity(q) for q in p]


def encode_value(v: Value) -> dict:
    if v is None:
        return {"t": "none", "v": None}
    if isinstance(v, bool):
        return {"t": "bool", "v": v}
    if isinstance(v, str):
        return {"t": "str", "v": v}
    if isinstance(v, Ref):
        return {"t": "ref", "v": v.id}
    if isinstance(v, Quantity):
        return {"t": "qty", "v": encode_quantity(v)}
    if is_pose(v):
        return {"t": "pose", "v": encode_pose(v)}
    raise TypeError(f"not an encodable value: {v!r}")


def encode_faults(f: FaultSpec) -> dict:
    return {"grasp_slip_ppm": f.grasp_slip_ppm, "pour_spill_ppm": f.pour_spill_ppm}


def episode_doc(e: Episode) -> dict:
    m = e.meta
    return {
        "kind": "episode",
        "meta": {
            "faults": encode_faults(m.faults),
            "nominal": m.nominal,
            "plan_hash": m.plan_hash,
            "schema_version": m.schema_version,
            "seed": m.seed,
            "tick_us": m.tick_us,
        },
        "scene": [
            {"attrs": {k: encode_value(v) for k, v in d.attrs.items()}, "id": d.id, "type": d.type}
            for d in sorted(e.scene, key=lambda d: d.id)
        ],
        "frames": [
            {"payload": [[k, encode_quantity(q)] for k, q in f.payload], "stream": f.stream, "t": f.t}
            for f in sorted(e.frames, key=lambda f: (f.t, f.stream))
        ],
        "transitions": [
            {
                "attribute": t.attribute,
                "entity": t.entity,
                "new": encode_value(t.new),
                "old": encode_value(t.old),
                "t": t.t,
            }
            for t in sorted(e.transitions, key=lambda t: t.t)
        ],
        "annotations": [
            {
                "begin": a.begin,
                "end": a.end,
                "event_type": a.event_type,
                "failure_reason": a.failure_reason,
                "id": a.id,
                "outcome": a.outcome,
                "parent": a.parent,
                "participants": dict(a.participants),
            }
            for a in sorted(e.annotations, key=lambda a: a.id)
        ],
        "beliefs": [
            {
                "beliefs": {
                    k: {"confidence_ppm": b.confidence_ppm, "pose": encode_pose(b.pose)}
                    for k, b in s.beliefs.items()
                },
                "t": s.t,
            }
            for s in sorted(e.beliefs, key=lambda s: s.t)
        ],
    }


def canonical_encode(e: Episode) -> bytes:
    problems = validate_episode(e)
    if problems:
        raise InvalidEpisode(problems)
    return canonical_bytes(episode_doc(e))


def episode_hash(e: Episode) -> str:
    return content_hash(canonical_encode(e))


# ---------------------------------------------------------------------------
# decoding (strict: anything unexpected is a MalformedObject)


def _obj(x, keys: set, where: str) -> dict:
    if not isinstance(x, dict) or set(x) != keys:
        raise MalformedObject(f"{where}: expected object with keys {sorted(keys)}")
    return x


def _int(x, where: str) -> int:
    if type(x) is not int:
        raise MalformedObject(f"{where}: expected integer")
    return x


def _str(x, where: str) -> str:
    if not isinstance(x, str):
        raise MalformedObject(f"{where}: expected string")
    return x


def _list(x, where: str) -> list:
    if not isinstance(x, list):
        raise MalformedObject(f"{where}: expected list")
    return x


def decode_quantity(x, where="quantity") -> Quantity:
    d = _obj(x, {"u", "v"}, where)
    try:
        unit = Unit(d["u"])
    except ValueError:
        raise MalformedObject(f"{where}: unknown unit {d['u']!r}") from None
    return Quantity(_int(d["v"], where), unit)


def decode_pose(x, where="pose") -> Pose:
    items = _list(x, where)
    if len(items) != 3:
        raise MalformedObject(f"{where}: expected 3 components")
    p = tuple(decode_quantity(q, where) for q in items)
    if not is_pose(p):
        raise MalformedObject(f"{where}: pose components must be in µm")
    return p


def decode_value(x, where="value") -> Value:
    d = _obj(x, {"t", "v"}, where)
    tag, v = d["t"], d["v"]
    if tag == "none" and v is None:
        return None
    if tag == "bool" and isinstance(v, bool):
        return v
    if tag == "str":
        return _str(v, where)
    if tag == "ref":
        return Ref(_str(v, where))
    if tag == "qty":
        return decode_quantity(v, where)
    if tag == "pose":
        return decode_pose(v, where)
    raise MalformedObject(f"{where}: bad tagged value")


def decode_faults(x, where="faults") -> FaultSpec:
    d = _obj(x, {"grasp_slip_ppm", "pour_spill_ppm"}, where)
    return FaultSpec(_int(d["grasp_slip_ppm"], where), _int(d["pour_spill_ppm"], where))


def load_json(data: bytes) -> Any:
    try:
        text = data.decode("utf-8")
        return json.loads(text, parse_float=_reject_float, parse_constant=_reject_float)
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise MalformedObject(f"not canonical JSON: {exc}") from None


def _reject_float(s):
    raise ValueError(f"non-integer number {s}")


def _opt_str(x, where):
    return None if x is None else _str(x, where)


def episode_from_doc(doc: Any) -> Episode:
    d = _obj(doc, {"kind", "meta", "scene", "frames", "transitions", "annotations", "beliefs"}, "episode")
    if d["kind"] != "episode":
        raise MalformedObject("episode: wrong kind")
    m = _obj(d["meta"], {"faults", "nominal", "plan_hash", "schema_version", "seed", "tick_us"}, "meta")
    if _int(m["schema_version"], "meta.schema_version") != SCHEMA_VERSION:
        raise MalformedObject(f"meta: unsupported schema_version {m['schema_version']}")
    if not isinstance(m["nominal"], bool):
        raise MalformedObject("meta.nominal: expected boolean")
    meta = Meta(
        plan_hash=_str(m["plan_hash"], "meta.plan_hash"),
        seed=_int(m["seed"], "meta.seed"),
        tick_us=_int(m["tick_us"], "meta.tick_us"),
        faults=decode_faults(m["faults"]),
        nominal=m["nominal"],
    )
    scene = []
    for i, s in enumerate(_list(d["scene"], "scene")):
        s = _obj(s, {"attrs", "id", "type"}, f"scene[{i}]")
        attrs = s["attrs"]
        if not isinstance(attrs, dict):
            raise MalformedObject(f"scene[{i}].attrs: expected object")
        scene.append(
            EntityDescriptor(
                _str(s["id"], "scene.id"),
                _str(s["type"], "scene.type"),
                {k: decode_value(v, f"scene[{i}].{k}") for k, v in attrs.items()},
            )
        )
    frames = []
    for i, f in enumerate(_list(d["frames"], "frames")):
        f = _obj(f, {"payload", "stream", "t"}, f"frames[{i}]")
        payload = []
        for item in _list(f["payload"], f"frames[{i}].payload"):
            item = _list(item, f"frames[{i}].payload")
            if len(item) != 2:
                raise MalformedObject(f"frames[{i}].payload: expected [name, quantity]")
            payload.append((_str(item[0], "payload.name"), decode_quantity(item[1])))
        frames.append(RawFrame(_int(f["t"], "frame.t"), _str(f["stream"], "frame.stream"), tuple(payload)))
    transitions = []
    for i, t in enumerate(_list(d["transitions"], "transitions")):
        t = _obj(t, {"attribute", "entity", "new", "old", "t"}, f"transitions[{i}]")
        transitions.append(
            SymbolicTransition(
                _int(t["t"], "transition.t"),
                _str(t["entity"], "transition.entity"),
                _str(t["attribute"], "transition.attribute"),
                decode_value(t["old"]),
                decode_value(t["new"]),
            )
        )
    annotations = []
    keys = {"begin", "end", "event_type", "failure_reason", "id", "outcome", "parent", "participants"}
    for i, a in enumerate(_list(d["annotations"], "annotations")):
        a = _obj(a, keys, f"annotations[{i}]")
        parts = a["participants"]
        if not isinstance(parts, dict) or not all(isinstance(v, str) for v in parts.values()):
            raise MalformedObject(f"annotations[{i}].participants: expected string map")
        annotations.append(
            SemanticAnnotation(
                id=_str(a["id"], "annotation.id"),
                begin=_int(a["begin"], "annotation.begin"),
                end=_int(a["end"], "annotation.end"),
                event_type=_str(a["event_type"], "annotation.event_type"),
                participants=dict(parts),
                outcome=_str(a["outcome"], "annotation.outcome"),
                failure_reason=_opt_str(a["failure_reason"], "annotation.failure_reason"),
                parent=_opt_str(a["parent"], "annotation.parent"),
            )
        )
    beliefs = []
    for i, s in enumerate(_list(d["beliefs"], "beliefs")):
        s = _obj(s, {"beliefs", "t"}, f"beliefs[{i}]")
        if not isinstance(s["beliefs"], dict):
            raise MalformedObject(f"beliefs[{i}]: expected object")
        snap = {}
        for ent, b in s["beliefs"].items():
            b = _obj(b, {"confidence_ppm", "pose"}, f"beliefs[{i}].{ent}")
            snap[ent] = Belief(decode_pose(b["pose"]), _int(b["confidence_ppm"], "confidence_ppm"))
        beliefs.append(BeliefSnapshot(_int(s["t"], "belief.t"), snap))
    return Episode(
        meta=meta,
        scene=tuple(scene),
        frames=tuple(frames),
        transitions=tuple(transitions),
        annotations=tuple(annotations),
        beliefs=tuple(beliefs),
    )


def decode_episode(data: bytes) -> Episode:
    e = episode_from_doc(load_json(data))
    problems = validate_episode(e)
    if problems:
        raise MalformedObject("invalid episode: " + "; ".join(problems))
    return e


# ---------------------------------------------------------------------------
# task trees


@dataclass(frozen=True)
class TaskNode:
    label: tuple  # (event_type, sorted role names, outcome)
    children: tuple = ()

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)

    def labels(self):
        yield self.label
        for c in self.children:
            yield from c.labels()


@dataclass(frozen=True)
class TaskTree:
    root: TaskNode


def extract_task_tree(e: Episode) -> TaskTree:
    """Abstract the annotation hierarchy into a labeled tree.

    Timestamps, quantities and entity identities are dropped; only the event
    type, the set of participant roles and the outcome survive.
    """
    roots = [a for a in e.annotations if a.parent is None]
    if len(roots) != 1:
        raise MultipleRoots([f"expected exactly one root annotation, found {len(roots)}"])
    kids: dict[str, list[SemanticAnnotation]] = {}
    for a in e.annotations:
        if a.parent is not None:
            kids.setdefault(a.parent, []).append(a)

    seen: set[str] = set()

    def build(a: SemanticAnnotation) -> TaskNode:
        seen.add(a.id)
        ordered = sorted(kids.get(a.id, ()), key=lambda c: (c.begin, c.id))
        label = (a.event_type, tuple(sorted(a.participants)), a.outcome)
        return TaskNode(label, tuple(build(c) for c in ordered))

    tree = TaskTree(build(roots[0]))
    if len(seen) != len(e.annotations):
        raise CycleDetected(["annotations unreachable from the root (cycle or dangling parent)"])
    return tree
