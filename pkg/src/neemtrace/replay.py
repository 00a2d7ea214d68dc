"""Deterministic replay of recorded episodes.

Replay never re-simulates: it folds the symbolic transitions over the
initial state in the scene manifest, so a trace is replayable without the
world model that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InconsistentTransition, InvalidEpisode
from .model import (
    Belief,
    BeliefSnapshot,
    Episode,
    canonical_encode,
    content_hash,
    episode_doc,
    extract_task_tree,
    validate_episode,
)


@dataclass(frozen=True)
class ReplayResult:
    final_state: dict
    beliefs: tuple
    steps: int


def _kinematic_beliefs(state: dict) -> dict:
    return {ent: Belief(attrs["pose"], 1_000_000) for ent, attrs in state.items() if "pose" in attrs}


def _perception_ends(e: Episode) -> set:
    return {a.end for a in e.annotations if a.event_type == "perceive"}


def replay(e: Episode) -> ReplayResult:
    """Rebuild the world-state and belief timelines from the trace.

    Transitions are applied in timestamp order, ties broken by record index.
    Beliefs at action boundaries are recomputed from the reconstructed state
    (kinematic belief: true pose, full confidence); snapshots closing a
    ``perceive`` block carry observation data and are passed through.
    Raises :class:`InconsistentTransition` when a transition's old value
    disagrees with the reconstructed state.
    """
    problems = validate_episode(e)
    if problems:
        raise InvalidEpisode(problems)
    state = {d.id: dict(d.attrs) for d in e.scene}
    order = sorted(range(len(e.transitions)), key=lambda i: (e.transitions[i].t, i))
    snaps = sorted(e.beliefs, key=lambda s: s.t)
    observed = _perception_ends(e)
    beliefs = []
    k = 0
    for snap in snaps:
        while k < len(order) and e.transitions[order[k]].t <= snap.t:
            _apply(state, order[k], e.transitions[order[k]])
            k += 1
        if snap.t in observed:
            beliefs.append(snap)
        else:
            beliefs.append(BeliefSnapshot(snap.t, _kinematic_beliefs(state)))
    for i in order[k:]:
        _apply(state, i, e.transitions[i])
    return ReplayResult(final_state=state, beliefs=tuple(beliefs), steps=len(order))


def _apply(state, index, tr):
    current = state[tr.entity].get(tr.attribute, _MISSING)
    if current is _MISSING:
        raise InconsistentTransition(index, f"{tr.entity}.{tr.attribute} is not part of the state")
    if current != tr.old:
        raise InconsistentTransition(
            index, f"{tr.entity}.{tr.attribute} old value {tr.old!r} != replayed {current!r}"
        )
    state[tr.entity][tr.attribute] = tr.new


_MISSING = object()


@dataclass(frozen=True)
class DiffReport:
    status: str  # identical-bytes | semantic-match | mismatch
    first_difference: str | None = None
    rerun_hash: str | None = None


LAYERS = ("annotations", "transitions", "frames", "beliefs", "scene", "meta")


def first_difference(a: Episode, b: Episode) -> str | None:
    da, db = episode_doc(a), episode_doc(b)
    for layer in LAYERS:
        la, lb = da[layer], db[layer]
        if layer == "meta":
            for key in sorted(la):
                if la[key] != lb[key]:
                    return f"meta.{key}"
            continue
        for i, (x, y) in enumerate(zip(la, lb)):
            if x != y:
                return f"{layer}[{i}]"
        if len(la) != len(lb):
            return f"{layer}[{min(len(la), len(lb))}]"
    return None


def re_execute_and_diff(e: Episode, store, *, plan=None, seed=None) -> DiffReport:
    """Re-run the recorded (scene, plan, seed, tick, faults) and classify the result.

    ``plan`` and ``seed`` override the recorded ones for diagnostic what-if
    runs.
    """
    from . import simworld

    if plan is None:
        plan = simworld.decode_plan(store.get(e.meta.plan_hash))
    scene = simworld.scene_from_manifest(e.scene)
    rerun = simworld.run_plan(
        scene,
        plan,
        e.meta.seed if seed is None else seed,
        e.meta.tick_us,
        e.meta.faults,
        nominal=e.meta.nominal,
    )
    original, fresh = canonical_encode(e), canonical_encode(rerun)
    if original == fresh:
        return DiffReport("identical-bytes", None, content_hash(fresh))
    from .verify import is_isomorphic

    if is_isomorphic(extract_task_tree(e), extract_task_tree(rerun)):
        return DiffReport("semantic-match", first_difference(e, rerun), content_hash(fresh))
    return DiffReport("mismatch", first_difference(e, rerun), content_hash(fresh))
