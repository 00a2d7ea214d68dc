"""Perception pipeline trees over noisy observations.

A pipeline is a behavior tree of ``Sequence``, ``Fallback`` and ``Annotator``
nodes. It runs once per observed entity; every annotator invocation, skipped
ones included, lands in the trace with a fixed-template justification so that
traces are byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import MalformedObject, MalformedTree
from .model import (
    Belief,
    BeliefSnapshot,
    Episode,
    RawFrame,
    SemanticAnnotation,
    _int,
    _list,
    _obj,
    _str,
    annotation_id,
    canonical_bytes,
    load_json,
    pose,
    pose_ints,
)

NOISE_BOUND_UM = 500
PERCEIVE_STEP_US = 50_000

# annotator -> (confidence if opaque, confidence if transparent)
CONFIDENCE = {
    "PrimitiveDetector": (900_000, 400_000),
    "TransparentObjectDetector": (100_000, 850_000),
    "PoseEstimator": (800_000, 800_000),
}
EVENT_TYPE = {
    "PrimitiveDetector": "primitive_detector",
    "TransparentObjectDetector": "transparent_object_detector",
    "PoseEstimator": "pose_estimator",
}


@dataclass(frozen=True)
class Annotator:
    name: str


@dataclass(frozen=True)
class Sequence:
    children: tuple


@dataclass(frozen=True)
class Fallback:
    children: tuple
    threshold_ppm: int


@dataclass(frozen=True)
class ObservedEntity:
    id: str
    type: str
    pose: tuple
    transparent: bool


@dataclass(frozen=True)
class Observation:
    entities: tuple


@dataclass(frozen=True)
class ObjectHypothesis:
    entity: str
    type_guess: str
    pose: tuple
    confidence_ppm: int
    rationale: str


@dataclass(frozen=True)
class Cas:
    hypotheses: tuple = ()


@dataclass(frozen=True)
class TraceEntry:
    path: str
    annotator: str
    entity: str
    outcome: str  # success | low_confidence | skipped
    confidence_ppm: int
    justification: str


def check_tree(node, path="0") -> None:
    if isinstance(node, Annotator):
        if node.name not in CONFIDENCE:
            raise MalformedTree(f"{path}: unknown annotator '{node.name}'")
    elif isinstance(node, (Sequence, Fallback)):
        if not node.children:
            raise MalformedTree(f"{path}: control node without children")
        if isinstance(node, Fallback) and (
            type(node.threshold_ppm) is not int or not 0 <= node.threshold_ppm <= 1_000_000
        ):
            raise MalformedTree(f"{path}: threshold outside [0, 1000000]")
        for i, c in enumerate(node.children):
            check_tree(c, f"{path}/{i}")
    else:
        raise MalformedTree(f"{path}: not a pipeline node: {node!r}")


def observe(manifest, state=None, noise=None) -> Observation:
    """Perturb true poses by uniform noise of at most 500 µm per axis.

    ``noise`` is a :class:`~neemtrace.prng.SplitMix64` side stream; ``None``
    yields the ground truth. Entities are visited in id order, three draws
    each, so the observation is a pure function of the stream state.
    """
    out = []
    for d in sorted(manifest, key=lambda d: d.id):
        if d.type in ("gripper", "world"):
            continue
        attrs = state[d.id] if state is not None else d.attrs
        p = pose_ints(attrs["pose"])
        if noise is not None:
            p = tuple(c + noise.symmetric(NOISE_BOUND_UM) for c in p)
        out.append(ObservedEntity(d.id, d.type, p, bool(attrs.get("transparent", False))))
    return Observation(tuple(out))


def _leaves(node, path):
    if isinstance(node, Annotator):
        yield path, node
    else:
        for i, c in enumerate(node.children):
            yield from _leaves(c, f"{path}/{i}")


class _Execution:
    def __init__(self):
        self.hypotheses: list[ObjectHypothesis] = []
        self.trace: list[TraceEntry] = []

    def skip(self, node, path, ent, why):
        for p, leaf in _leaves(node, path):
            self.trace.append(TraceEntry(p, leaf.name, ent.id, "skipped", 0, f"skipped: {why}"))

    def run(self, node, path, ent: ObservedEntity, threshold: int):
        if isinstance(node, Annotator):
            conf = CONFIDENCE[node.name][1 if ent.transparent else 0]
            if conf >= threshold:
                outcome, why = "success", f"confidence {conf} meets threshold {threshold} → accept"
            else:
                outcome, why = "low_confidence", f"confidence {conf} below threshold {threshold} → fallback"
            self.hypotheses.append(ObjectHypothesis(ent.id, ent.type, ent.pose, conf, f"{node.name}: {why}"))
            self.trace.append(TraceEntry(path, node.name, ent.id, outcome, conf, why))
            return outcome == "success", conf
        if isinstance(node, Sequence):
            confs = []
            for i, child in enumerate(node.children):
                ok, conf = self.run(child, f"{path}/{i}", ent, threshold)
                confs.append(conf)
                if not ok:
                    for j in range(i + 1, len(node.children)):
                        self.skip(node.children[j], f"{path}/{j}", ent, "sequence aborted")
                    return False, min(confs)
            return True, min(confs)
        confs = []
        for i, child in enumerate(node.children):
            ok, conf = self.run(child, f"{path}/{i}", ent, node.threshold_ppm)
            confs.append(conf)
            if ok:
                for j in range(i + 1, len(node.children)):
                    self.skip(node.children[j], f"{path}/{j}", ent, "earlier alternative succeeded")
                return True, conf
        return False, max(confs)


def execute_pipeline(root, obs: Observation) -> tuple[Cas, tuple]:
    check_tree(root)
    ex = _Execution()
    for ent in obs.entities:
        ex.run(root, "0", ent, 0)
    return Cas(tuple(ex.hypotheses)), tuple(ex.trace)


def _reason(entry: TraceEntry) -> str:
    if entry.outcome == "skipped":
        return entry.justification
    return f"{entry.outcome}: {entry.justification}"


def attach_to_episode(cas: Cas, trace, episode: Episode) -> Episode:
    """Append a ``perceive`` block after the last annotation.

    Each trace entry becomes a child annotation; the best hypothesis per
    entity becomes that entity's belief in a new snapshot at the block's end.
    Sensor streams are held at their last sample through the block.
    """
    root = next(a for a in episode.annotations if a.parent is None)
    t0 = max(a.end for a in episode.annotations)
    next_n = 1 + max(int(a.id[1:]) for a in episode.annotations if a.id[1:].isdigit())
    perceive_id = annotation_id(next_n)
    children = []
    for i, entry in enumerate(trace):
        ok = entry.outcome == "success"
        children.append(
            SemanticAnnotation(
                id=annotation_id(next_n + 1 + i),
                begin=t0 + i * PERCEIVE_STEP_US,
                end=t0 + (i + 1) * PERCEIVE_STEP_US,
                event_type=EVENT_TYPE[entry.annotator],
                participants={"agent": "gripper", "patient": entry.entity},
                outcome="succeeded" if ok else "failed",
                failure_reason=None if ok else _reason(entry),
                parent=perceive_id,
            )
        )
    t1 = t0 + len(trace) * PERCEIVE_STEP_US
    perceive = SemanticAnnotation(perceive_id, t0, t1, "perceive", {"agent": "gripper"}, parent=root.id)
    annotations = [replace(root, end=max(root.end, t1)) if a is root else a for a in episode.annotations]
    annotations += [perceive, *children]

    beliefs = list(episode.beliefs)
    best: dict[str, ObjectHypothesis] = {}
    for h in cas.hypotheses:
        if h.entity not in best or h.confidence_ppm > best[h.entity].confidence_ppm:
            best[h.entity] = h
    if best and t1 > t0:
        merged = dict(beliefs[-1].beliefs) if beliefs else {}
        for ent, h in best.items():
            merged[ent] = Belief(pose(*h.pose), h.confidence_ppm)
        beliefs.append(BeliefSnapshot(t1, merged))

    frames = list(episode.frames)
    last: dict[str, RawFrame] = {}
    for f in frames:
        if f.stream in ("joints", "proximity"):
            last[f.stream] = f
    tick = episode.meta.tick_us
    for stream, f in sorted(last.items()):
        t = f.t + tick
        while t <= t1:
            frames.append(RawFrame(t, stream, f.payload))
            t += tick
    frames.sort(key=lambda f: (f.t, f.stream))

    return replace(
        episode,
        frames=tuple(frames),
        annotations=tuple(annotations),
        beliefs=tuple(beliefs),
    )


# ---------------------------------------------------------------------------
# .ppt files


def pipeline_doc(node) -> dict:
    if isinstance(node, Annotator):
        return {"annotator": node.name}
    if isinstance(node, Sequence):
        return {"sequence": [pipeline_doc(c) for c in node.children]}
    if isinstance(node, Fallback):
        return {"fallback": [pipeline_doc(c) for c in node.children], "threshold_ppm": node.threshold_ppm}
    raise MalformedTree(f"not a pipeline node: {node!r}")


def pipeline_from_doc(d, depth=0):
    if depth > 64:
        raise MalformedObject("pipeline nested too deeply")
    if isinstance(d, dict) and "annotator" in d:
        node = Annotator(_str(_obj(d, {"annotator"}, "annotator")["annotator"], "annotator"))
    elif isinstance(d, dict) and "sequence" in d:
        kids = _list(_obj(d, {"sequence"}, "sequence")["sequence"], "sequence")
        node = Sequence(tuple(pipeline_from_doc(c, depth + 1) for c in kids))
    elif isinstance(d, dict) and "fallback" in d:
        d = _obj(d, {"fallback", "threshold_ppm"}, "fallback")
        kids = _list(d["fallback"], "fallback")
        node = Fallback(tuple(pipeline_from_doc(c, depth + 1) for c in kids), _int(d["threshold_ppm"], "threshold_ppm"))
    else:
        raise MalformedObject("pipeline node must be annotator, sequence or fallback")
    if depth == 0:
        try:
            check_tree(node)
        except MalformedTree as exc:
            raise MalformedObject(str(exc)) from None
    return node


def encode_pipeline(node) -> bytes:
    check_tree(node)
    return canonical_bytes(pipeline_doc(node))


def decode_pipeline(data: bytes):
    return pipeline_from_doc(load_json(data))
