"""Deterministic tabletop micro-world.

Executes symbolic plans kinematically and records complete episodes: a
``joints`` frame per tick, ``force_torque`` frames on grasp and release,
``proximity`` frames when obstacles exist, one symbolic transition per state
change, one annotation per action under a root, and a belief snapshot at
every action boundary.

All arithmetic is integer. Physical constants live in ``docs/world.md``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

from .errors import InvalidPlan, InvalidScene, MalformedObject, PlanMismatch
from .model import (
    Belief,
    BeliefSnapshot,
    EntityDescriptor,
    Episode,
    FaultSpec,
    Meta,
    Quantity,
    RawFrame,
    Ref,
    SemanticAnnotation,
    SymbolicTransition,
    Unit,
    _int,
    annotation_id,
    _list,
    _obj,
    _str,
    canonical_bytes,
    content_hash,
    load_json,
    pose,
    pose_ints,
)
from .prng import SplitMix64, derive_seed

# world constants
CAPACITY_UL = {"bottle": 1_000_000, "cup": 300_000, "canister": 2_000_000, "tray": 0, "obstacle": 0}
ENTITY_TYPES = tuple(CAPACITY_UL)
SYSTEM_ENTITIES = ("gripper", "world")
SPEED_US_PER_UM = 10  # 100 mm/s
REACH_LIMIT_UM = 1_000_000
GRASP_RADIUS_UM = 20_000
DURATION_US = {"grasp": 500_000, "release": 300_000, "open": 800_000, "close": 800_000, "pour": 1_500_000}
FAILED_ACTION_US = 100_000
MIN_ACTION_US = 1_000
DEFAULT_TICK_US = 10_000
MIN_TICK_US = 1_000
EPSILON_BOUND_PPM = 20_000
PERCEPTION_STREAM = 0x5045_5243  # side-stream id for observation noise
POSE_TOLERANCE_UM = 1_000
FILL_TOLERANCE_PCT = 5


def contact_force_un(mass_ug: int) -> int:
    """Static grasp load with g = 10 m/s^2: 10 µN per mg."""
    return mass_ug // 100


# ---------------------------------------------------------------------------
# scene and plan


@dataclass(frozen=True)
class SceneEntity:
    id: str
    type: str
    pose: tuple  # (x, y, z) µm
    mass_ug: int = 0
    is_container: bool = False
    is_open: bool = False
    fill_ul: int = 0
    transparent: bool = False


@dataclass(frozen=True)
class Scene:
    entities: tuple
    gripper_pose: tuple = (0, 0, 300_000)
    holding: str | None = None

    def entity(self, ent_id: str) -> SceneEntity:
        for e in self.entities:
            if e.id == ent_id:
                return e
        raise KeyError(ent_id)


@dataclass(frozen=True)
class MoveTo:
    target: tuple


@dataclass(frozen=True)
class Grasp:
    entity: str


@dataclass(frozen=True)
class Release:
    pass


@dataclass(frozen=True)
class Open:
    entity: str


@dataclass(frozen=True)
class Close:
    entity: str


@dataclass(frozen=True)
class Pour:
    source: str
    destination: str
    volume_ul: int


Action = Union[MoveTo, Grasp, Release, Open, Close, Pour]


@dataclass(frozen=True)
class Plan:
    actions: tuple
    name: str = "task"
    perception: object = None  # optional PipelineNode run after the actions


def _triple(x, where):
    items = _list(x, where)
    if len(items) != 3:
        raise MalformedObject(f"{where}: expected [x, y, z]")
    return tuple(_int(v, where) for v in items)


def action_doc(a: Action) -> dict:
    if isinstance(a, MoveTo):
        return {"op": "move_to", "target": list(a.target)}
    if isinstance(a, Grasp):
        return {"op": "grasp", "entity": a.entity}
    if isinstance(a, Release):
        return {"op": "release"}
    if isinstance(a, Open):
        return {"op": "open", "entity": a.entity}
    if isinstance(a, Close):
        return {"op": "close", "entity": a.entity}
    if isinstance(a, Pour):
        return {"op": "pour", "source": a.source, "destination": a.destination, "volume_ul": a.volume_ul}
    raise TypeError(f"unknown action {a!r}")


def action_from_doc(d) -> Action:
    if not isinstance(d, dict) or "op" not in d:
        raise MalformedObject("action: expected object with 'op'")
    op = d["op"]
    if op == "move_to":
        return MoveTo(_triple(_obj(d, {"op", "target"}, "move_to")["target"], "move_to.target"))
    if op == "grasp":
        return Grasp(_str(_obj(d, {"op", "entity"}, "grasp")["entity"], "grasp.entity"))
    if op == "release":
        _obj(d, {"op"}, "release")
        return Release()
    if op == "open":
        return Open(_str(_obj(d, {"op", "entity"}, "open")["entity"], "open.entity"))
    if op == "close":
        return Close(_str(_obj(d, {"op", "entity"}, "close")["entity"], "close.entity"))
    if op == "pour":
        d = _obj(d, {"op", "source", "destination", "volume_ul"}, "pour")
        return Pour(_str(d["source"], "pour.source"), _str(d["destination"], "pour.destination"), _int(d["volume_ul"], "pour.volume_ul"))
    raise MalformedObject(f"action: unknown op {op!r}")


def describe_action(a: Action) -> str:
    if isinstance(a, MoveTo):
        return "move_to({}, {}, {})".format(*a.target)
    if isinstance(a, Grasp):
        return f"grasp({a.entity})"
    if isinstance(a, Release):
        return "release()"
    if isinstance(a, Open):
        return f"open({a.entity})"
    if isinstance(a, Close):
        return f"close({a.entity})"
    return f"pour({a.source}, {a.destination}, {a.volume_ul})"


def plan_doc(p: Plan) -> dict:
    from .perception import pipeline_doc

    return {
        "kind": "plan",
        "name": p.name,
        "actions": [action_doc(a) for a in p.actions],
        "perception": None if p.perception is None else pipeline_doc(p.perception),
    }


def encode_plan(p: Plan) -> bytes:
    if not p.actions:
        raise InvalidPlan("plan has no actions")
    return canonical_bytes(plan_doc(p))


def plan_hash(p: Plan) -> str:
    return content_hash(encode_plan(p))


def decode_plan(data: bytes) -> Plan:
    from .perception import pipeline_from_doc

    d = _obj(load_json(data), {"kind", "name", "actions", "perception"}, "plan")
    if d["kind"] != "plan":
        raise MalformedObject("plan: wrong kind")
    actions = tuple(action_from_doc(a) for a in _list(d["actions"], "plan.actions"))
    if not actions:
        raise MalformedObject("plan: no actions")
    ppt = None if d["perception"] is None else pipeline_from_doc(d["perception"])
    return Plan(actions, _str(d["name"], "plan.name"), ppt)


def scene_doc(s: Scene) -> dict:
    return {
        "kind": "scene",
        "entities": [
            {
                "fill_ul": e.fill_ul,
                "id": e.id,
                "is_container": e.is_container,
                "is_open": e.is_open,
                "mass_ug": e.mass_ug,
                "pose": list(e.pose),
                "transparent": e.transparent,
                "type": e.type,
            }
            for e in sorted(s.entities, key=lambda e: e.id)
        ],
        "gripper": {"holding": s.holding, "pose": list(s.gripper_pose)},
    }


def encode_scene(s: Scene) -> bytes:
    return canonical_bytes(scene_doc(s))


def _bool(x, where):
    if not isinstance(x, bool):
        raise MalformedObject(f"{where}: expected boolean")
    return x


def decode_scene(data: bytes) -> Scene:
    d = _obj(load_json(data), {"kind", "entities", "gripper"}, "scene")
    if d["kind"] != "scene":
        raise MalformedObject("scene: wrong kind")
    keys = {"fill_ul", "id", "is_container", "is_open", "mass_ug", "pose", "transparent", "type"}
    ents = []
    for i, e in enumerate(_list(d["entities"], "scene.entities")):
        e = _obj(e, keys, f"entities[{i}]")
        ents.append(
            SceneEntity(
                id=_str(e["id"], "id"),
                type=_str(e["type"], "type"),
                pose=_triple(e["pose"], "pose"),
                mass_ug=_int(e["mass_ug"], "mass_ug"),
                is_container=_bool(e["is_container"], "is_container"),
                is_open=_bool(e["is_open"], "is_open"),
                fill_ul=_int(e["fill_ul"], "fill_ul"),
                transparent=_bool(e["transparent"], "transparent"),
            )
        )
    g = _obj(d["gripper"], {"holding", "pose"}, "gripper")
    holding = None if g["holding"] is None else _str(g["holding"], "gripper.holding")
    return Scene(tuple(ents), _triple(g["pose"], "gripper.pose"), holding)


def decode_faults_file(data: bytes) -> FaultSpec:
    d = _obj(load_json(data), {"grasp_slip_ppm", "pour_spill_ppm"}, "faults")
    return FaultSpec(_int(d["grasp_slip_ppm"], "grasp_slip_ppm"), _int(d["pour_spill_ppm"], "pour_spill_ppm"))


def validate_scene(s: Scene) -> None:
    ids = [e.id for e in s.entities]
    if len(set(ids)) != len(ids):
        raise InvalidScene("duplicate entity ids")
    for e in s.entities:
        if e.id in SYSTEM_ENTITIES or not e.id:
            raise InvalidScene(f"reserved or empty entity id '{e.id}'")
        if e.type not in CAPACITY_UL:
            raise InvalidScene(f"{e.id}: unknown type '{e.type}'")
        if e.is_container and CAPACITY_UL[e.type] == 0:
            raise InvalidScene(f"{e.id}: type '{e.type}' cannot be a container")
        if e.mass_ug < 0 or e.fill_ul < 0:
            raise InvalidScene(f"{e.id}: negative mass or fill")
        if e.fill_ul > (CAPACITY_UL[e.type] if e.is_container else 0):
            raise InvalidScene(f"{e.id}: fill {e.fill_ul} µL exceeds capacity")
    if s.holding is not None and s.holding not in ids:
        raise InvalidScene(f"gripper holds unknown entity '{s.holding}'")


def validate_plan(p: Plan, s: Scene) -> None:
    if not p.actions:
        raise InvalidPlan("plan has no actions")
    ids = {e.id for e in s.entities}
    for i, a in enumerate(p.actions):
        refs = []
        if isinstance(a, (Grasp, Open, Close)):
            refs = [a.entity]
        elif isinstance(a, Pour):
            refs = [a.source, a.destination]
            if a.volume_ul <= 0:
                raise InvalidPlan(f"action {i}: pour volume must be positive")
        elif isinstance(a, MoveTo):
            if len(a.target) != 3 or not all(type(c) is int for c in a.target):
                raise InvalidPlan(f"action {i}: move_to target must be 3 integers")
        elif not isinstance(a, Release):
            raise InvalidPlan(f"action {i}: unknown action {a!r}")
        for r in refs:
            if r not in ids:
                raise InvalidPlan(f"action {i}: unknown entity '{r}'")


# ---------------------------------------------------------------------------
# execution


def scene_manifest(s: Scene) -> tuple:
    out = []
    for e in s.entities:
        held = Ref("gripper") if s.holding == e.id else None
        out.append(
            EntityDescriptor(
                e.id,
                e.type,
                {
                    "pose": pose(*e.pose),
                    "mass": Quantity(e.mass_ug, Unit.UG),
                    "container": e.is_container,
                    "open": e.is_open,
                    "fill_level": Quantity(e.fill_ul, Unit.UL),
                    "transparent": e.transparent,
                    "held_by": held,
                },
            )
        )
    out.append(
        EntityDescriptor(
            "gripper",
            "gripper",
            {"pose": pose(*s.gripper_pose), "holding": Ref(s.holding) if s.holding else None},
        )
    )
    out.append(EntityDescriptor("world", "world", {"spilled": Quantity(0, Unit.UL)}))
    return tuple(sorted(out, key=lambda d: d.id))


def scene_from_manifest(manifest) -> Scene:
    """Inverse of :func:`scene_manifest`; lets a stored episode be re-executed."""
    ents = []
    gripper_pose, holding = None, None
    for d in manifest:
        a = d.attrs
        if d.id == "gripper":
            gripper_pose = pose_ints(a["pose"])
            holding = a["holding"].id if a["holding"] else None
        elif d.id != "world":
            ents.append(
                SceneEntity(
                    id=d.id,
                    type=d.type,
                    pose=pose_ints(a["pose"]),
                    mass_ug=a["mass"].value,
                    is_container=a["container"],
                    is_open=a["open"],
                    fill_ul=a["fill_level"].value,
                    transparent=a["transparent"],
                )
            )
    if gripper_pose is None:
        raise InvalidScene("manifest has no gripper")
    return Scene(tuple(ents), gripper_pose, holding)


def initial_state(manifest) -> dict:
    return {d.id: dict(d.attrs) for d in manifest}


def _dist(a, b) -> int:
    return math.isqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


class _Failure(Exception):
    def __init__(self, code, text):
        self.reason = f"{code}: {text}"


class _Recorder:
    def __init__(self, scene, plan, seed, tick_us, faults, nominal):
        self.scene = scene
        self.plan = plan
        self.tick_us = tick_us
        self.faults = FaultSpec() if nominal else faults
        self.nominal = nominal
        self.seed = seed
        self.rng = SplitMix64(seed)
        self.start_xyz = tuple(scene.gripper_pose)
        self.manifest = scene_manifest(scene)
        self.state = initial_state(self.manifest)
        self.types = {d.id: d.type for d in self.manifest}
        self.t = 0
        self.transitions: list[SymbolicTransition] = []
        self.annotations: list[SemanticAnnotation] = []
        self.beliefs: list[BeliefSnapshot] = []
        self.force_frames: list[RawFrame] = []
        self.segments: list[tuple] = []  # (t0, t1, p0, p1) of gripper motion

    # state helpers
    def get(self, ent, attr):
        return self.state[ent][attr]

    def set(self, ent, attr, value):
        old = self.state[ent][attr]
        if old != value:
            self.transitions.append(SymbolicTransition(self.t, ent, attr, old, value))
            self.state[ent][attr] = value

    def gripper_xyz(self):
        return pose_ints(self.get("gripper", "pose"))

    def holding(self):
        ref = self.get("gripper", "holding")
        return ref.id if ref else None

    def fill(self, ent) -> int:
        return self.get(ent, "fill_level").value

    def snapshot(self):
        beliefs = {
            ent: Belief(attrs["pose"], 1_000_000)
            for ent, attrs in self.state.items()
            if "pose" in attrs
        }
        self.beliefs.append(BeliefSnapshot(self.t, beliefs))

    # each handler returns (duration, deferred state update, fault reason)
    def do_move(self, a: MoveTo):
        target = tuple(a.target)
        if _dist(target, (0, 0, 0)) > REACH_LIMIT_UM:
            raise _Failure("reach_limit", "target beyond reach limit of 1 m from the base")
        start = self.gripper_xyz()
        duration = max(_dist(start, target) * SPEED_US_PER_UM, MIN_ACTION_US)
        self.segments.append((self.t, self.t + duration, start, target))

        def apply():
            self.set("gripper", "pose", pose(*target))
            held = self.holding()
            if held:
                self.set(held, "pose", pose(*target))

        return duration, apply, None

    def do_grasp(self, a: Grasp):
        slip = self.rng.chance_ppm(self.faults.grasp_slip_ppm)
        held = self.holding()
        if held:
            raise _Failure("gripper_occupied", f"gripper already holding {held}")
        if self.types[a.entity] == "obstacle":
            raise _Failure("not_graspable", f"{a.entity} is an obstacle")
        if _dist(self.gripper_xyz(), pose_ints(self.get(a.entity, "pose"))) > GRASP_RADIUS_UM:
            raise _Failure("out_of_reach", f"{a.entity} not within grasp radius of 20 mm")
        duration = DURATION_US["grasp"]
        force = contact_force_un(self.get(a.entity, "mass").value)
        self._force_frame(self.t + duration // 2, force)
        if slip:
            return duration, None, "grasp_slip: object slipped out of the gripper (grasp slip fault)"

        def apply():
            self.set("gripper", "holding", Ref(a.entity))
            self.set(a.entity, "held_by", Ref("gripper"))

        return duration, apply, None

    def do_release(self, a: Release):
        held = self.holding()
        if not held:
            raise _Failure("nothing_held", "gripper is empty")
        duration = DURATION_US["release"]
        self._force_frame(self.t + duration // 2, 0)

        def apply():
            self.set("gripper", "holding", None)
            self.set(held, "held_by", None)

        return duration, apply, None

    def _force_frame(self, t, fz):
        payload = (("fx", Quantity(0, Unit.UN)), ("fy", Quantity(0, Unit.UN)), ("fz", Quantity(fz, Unit.UN)))
        self.force_frames.append(RawFrame(t, "force_torque", payload))

    def do_open_close(self, a, want_open: bool):
        verb = "open" if want_open else "close"
        if not self.get(a.entity, "container"):
            raise _Failure("not_container", f"{a.entity} is not a container")
        if self.get(a.entity, "open") == want_open:
            raise _Failure(f"already_{'open' if want_open else 'closed'}", f"{a.entity} is already {'open' if want_open else 'closed'}")

        def apply():
            self.set(a.entity, "open", want_open)

        return DURATION_US[verb], apply, None

    def do_pour(self, a: Pour):
        eps = self.rng.symmetric(EPSILON_BOUND_PPM)
        spill = self.rng.chance_ppm(self.faults.pour_spill_ppm)
        if self.nominal:
            eps = 0
        src, dst = a.source, a.destination
        if src == dst:
            raise _Failure("same_container", "source and destination are the same container")
        for ent in (src, dst):
            if not self.get(ent, "container"):
                raise _Failure("not_container", f"{ent} is not a container")
        if self.holding() != src:
            raise _Failure("source_not_held", f"source {src} is not held by the gripper")
        if not self.get(src, "open"):
            raise _Failure("source_closed", f"containers must be open before pouring (source {src} is closed)")
        if not self.get(dst, "open"):
            raise _Failure(
                "destination_closed", f"containers must be open before pouring (destination {dst} is closed)"
            )
        available = self.fill(src)
        if available == 0:
            raise _Failure("source_empty", f"source {src} is empty")
        amount = min(a.volume_ul * (1_000_000 + eps) // 1_000_000, available)
        spilled = amount // 2 if spill else 0
        room = CAPACITY_UL[self.types[dst]] - self.fill(dst)
        into = min(amount - spilled, room)
        overflow = amount - spilled - into
        spilled += overflow
        reason = None
        if spill:
            reason = f"pour_spill: {spilled} µL spilled during transfer (pour spill fault)"
        elif overflow:
            reason = f"overflow: destination {dst} capacity exceeded, {overflow} µL spilled"

        def apply():
            self.set(src, "fill_level", Quantity(available - amount, Unit.UL))
            self.set(dst, "fill_level", Quantity(self.fill(dst) + into, Unit.UL))
            if spilled:
                total = self.get("world", "spilled").value + spilled
                self.set("world", "spilled", Quantity(total, Unit.UL))

        return DURATION_US["pour"], apply, reason

    def participants(self, a: Action) -> dict:
        parts = {"agent": "gripper"}
        if isinstance(a, (Grasp, Open, Close)):
            parts["patient"] = a.entity
        elif isinstance(a, (MoveTo, Release)) and self.holding():
            parts["patient"] = self.holding()
        elif isinstance(a, Pour):
            parts["source"] = a.source
            parts["destination"] = a.destination
        return parts

    def event_type(self, a: Action) -> str:
        return {MoveTo: "move_to", Grasp: "grasp", Release: "release", Open: "open", Close: "close", Pour: "pour"}[type(a)]

    def run(self) -> Episode:
        self.snapshot()
        handlers = {
            MoveTo: self.do_move,
            Grasp: self.do_grasp,
            Release: self.do_release,
            Open: lambda a: self.do_open_close(a, True),
            Close: lambda a: self.do_open_close(a, False),
            Pour: self.do_pour,
        }
        for i, a in enumerate(self.plan.actions):
            begin = self.t
            parts = self.participants(a)
            try:
                duration, apply, fault = handlers[type(a)](a)
            except _Failure as f:
                duration, apply, fault = FAILED_ACTION_US, None, f.reason
            self.t = begin + duration
            if apply is not None:
                apply()
            self.annotations.append(
                SemanticAnnotation(
                    id=annotation_id(i + 1),
                    begin=begin,
                    end=self.t,
                    event_type=self.event_type(a),
                    participants=parts,
                    outcome="failed" if fault else "succeeded",
                    failure_reason=fault,
                    parent=annotation_id(0),
                )
            )
            self.snapshot()
        root = SemanticAnnotation(
            id=annotation_id(0),
            begin=0,
            end=self.t,
            event_type=self.plan.name,
            participants={"agent": "gripper"},
        )
        return Episode(
            meta=Meta(
                plan_hash=plan_hash(self.plan),
                seed=self.seed,
                tick_us=self.tick_us,
                faults=self.faults,
                nominal=self.nominal,
            ),
            scene=self.manifest,
            frames=tuple(self.sample_frames()),
            transitions=tuple(self.transitions),
            annotations=(root, *self.annotations),
            beliefs=tuple(self.beliefs),
        )

    def sample_frames(self):
        obstacles = [pose_ints(d.attrs["pose"]) for d in self.manifest if d.type == "obstacle"]
        frames = list(self.force_frames)
        seg_i = 0
        last = self.start_xyz
        for t in range(0, self.t + 1, self.tick_us):
            while seg_i < len(self.segments) and self.segments[seg_i][1] < t:
                last = self.segments[seg_i][3]
                seg_i += 1
            p = last
            if seg_i < len(self.segments):
                t0, t1, p0, p1 = self.segments[seg_i]
                if t >= t0:
                    p = tuple(a + (b - a) * (t - t0) // (t1 - t0) for a, b in zip(p0, p1))
            frames.append(RawFrame(t, "joints", tuple(zip(("x", "y", "z"), pose(*p)))))
            if obstacles:
                nearest = min(_dist(p, o) for o in obstacles)
                frames.append(RawFrame(t, "proximity", (("nearest", Quantity(nearest, Unit.UM)),)))
        frames.sort(key=lambda f: (f.t, f.stream))
        return frames


def _check_inputs(scene, plan, seed, tick_us, faults):
    validate_scene(scene)
    validate_plan(plan, scene)
    if type(tick_us) is not int or tick_us < MIN_TICK_US:
        raise InvalidPlan(f"tick_us must be an integer >= {MIN_TICK_US}")
    if type(seed) is not int or not 0 <= seed < 1 << 64:
        raise InvalidPlan("seed must be a 64-bit unsigned integer")
    for p in (faults.grasp_slip_ppm, faults.pour_spill_ppm):
        if not 0 <= p <= 1_000_000:
            raise InvalidPlan("fault probabilities must lie in [0, 1000000] ppm")


def simulate(
    scene: Scene,
    plan: Plan,
    seed: int,
    tick_us: int = DEFAULT_TICK_US,
    faults: FaultSpec = FaultSpec(),
    nominal: bool = False,
) -> tuple[Episode, dict]:
    """Run the plan and return the episode plus the final world state."""
    _check_inputs(scene, plan, seed, tick_us, faults)
    rec = _Recorder(scene, plan, seed, tick_us, faults, nominal)
    episode = rec.run()
    if plan.perception is not None:
        from . import perception

        noise = SplitMix64(derive_seed(seed, PERCEPTION_STREAM))
        obs = perception.observe(episode.scene, rec.state, None if nominal else noise)
        cas, trace = perception.execute_pipeline(plan.perception, obs)
        episode = perception.attach_to_episode(cas, trace, episode)
    return episode, rec.state


def run_plan(
    scene: Scene,
    plan: Plan,
    seed: int,
    tick_us: int = DEFAULT_TICK_US,
    faults: FaultSpec = FaultSpec(),
    nominal: bool = False,
) -> Episode:
    """Execute ``plan`` in ``scene``; failed preconditions are recorded, not raised.

    ``nominal`` forces the pour noise to zero and disables faults; it is the
    model used by :func:`predict`. A perception pipeline attached to the plan
    runs once after the last action.
    """
    return simulate(scene, plan, seed, tick_us, faults, nominal)[0]


def predict(scene: Scene, plan: Plan, tick_us: int = DEFAULT_TICK_US) -> Episode:
    return run_plan(scene, plan, 0, tick_us, FaultSpec(), nominal=True)


# ---------------------------------------------------------------------------
# imagination: compare predicted and observed outcomes


@dataclass(frozen=True)
class Discrepancy:
    entity: str
    attribute: str
    predicted: object
    observed: object
    explanation: str


@dataclass(frozen=True)
class DiscrepancyReport:
    items: tuple = ()

    @property
    def overall(self) -> str:
        return "mismatch" if self.items else "match"


# failure code -> (attributes it explains, explanation)
CAUSAL_RULES = {
    "grasp_slip": ({"pose", "held_by", "holding", "fill_level"}, "grasp slip fault"),
    "destination_closed": ({"fill_level"}, "pour blocked: destination container closed"),
    "source_closed": ({"fill_level"}, "pour blocked: source container closed"),
    "source_not_held": ({"fill_level"}, "pour skipped: source container not held"),
    "source_empty": ({"fill_level"}, "pour produced nothing: source container empty"),
    "pour_spill": ({"fill_level"}, "pour spill fault"),
    "overflow": ({"fill_level"}, "destination overflow"),
    "reach_limit": ({"pose"}, "move blocked: target beyond reach limit"),
    "out_of_reach": ({"pose", "held_by", "holding"}, "grasp failed: object out of reach"),
    "gripper_occupied": ({"pose", "held_by", "holding"}, "grasp failed: gripper occupied"),
    "nothing_held": ({"held_by", "holding"}, "release failed: nothing held"),
    "already_open": ({"open"}, "open failed: container already open"),
    "already_closed": ({"open"}, "close failed: container already closed"),
}


def _failure_code(reason: str | None) -> str | None:
    return reason.split(":", 1)[0] if reason else None


def _explain(entity, attribute, predicted_ep, observed_ep, initial_differs) -> str:
    predicted_fail = {a.id: _failure_code(a.failure_reason) for a in predicted_ep.annotations}
    for a in sorted(observed_ep.annotations, key=lambda a: (a.begin, a.id)):
        code = _failure_code(a.failure_reason)
        if code is None or predicted_fail.get(a.id) == code:
            continue
        if entity not in a.participants.values():
            continue
        rule = CAUSAL_RULES.get(code)
        if rule and attribute in rule[0]:
            return rule[1]
    if initial_differs:
        return f"initial {attribute} of {entity} differed from the model"
    if attribute == "fill_level":
        return "pour volume deviation beyond tolerance"
    return "unexplained deviation"


def compare_outcomes(predicted: Episode, observed: Episode) -> DiscrepancyReport:
    """Entity-by-entity comparison of final states (semantic metric only)."""
    if predicted.meta.plan_hash != observed.meta.plan_hash:
        raise PlanMismatch(f"plan {predicted.meta.plan_hash} != {observed.meta.plan_hash}")
    from .replay import replay

    pred_final = replay(predicted).final_state
    obs_final = replay(observed).final_state
    pred_init = initial_state(predicted.scene)
    obs_init = initial_state(observed.scene)
    items = []
    for ent in sorted(set(pred_final) & set(obs_final)):
        p, o = pred_final[ent], obs_final[ent]
        for attr in ("pose", "fill_level", "open", "held_by", "holding"):
            if attr not in p or attr not in o:
                continue
            pv, ov = p[attr], o[attr]
            if attr == "pose":
                bad = _dist(pose_ints(pv), pose_ints(ov)) > POSE_TOLERANCE_UM
            elif attr == "fill_level":
                transfer = abs(pv.value - pred_init[ent][attr].value)
                bad = abs(ov.value - pv.value) * 100 > FILL_TOLERANCE_PCT * transfer
            else:
                bad = pv != ov
            if bad:
                differs = pred_init[ent].get(attr) != obs_init[ent].get(attr)
                why = _explain(ent, attr, predicted, observed, differs)
                items.append(Discrepancy(ent, attr, pv, ov, why))
    return DiscrepancyReport(tuple(items))
