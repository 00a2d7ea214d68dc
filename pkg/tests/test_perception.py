from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import six_step, tabletop
from neemtrace.errors import MalformedObject, MalformedTree
from neemtrace.model import pose, validate_episode
from neemtrace.perception import (
    Annotator,
    Fallback,
    Observation,
    ObservedEntity,
    Sequence,
    attach_to_episode,
    decode_pipeline,
    encode_pipeline,
    execute_pipeline,
    observe,
)
from neemtrace.prng import SplitMix64
from neemtrace.replay import replay
from neemtrace.simworld import run_plan, scene_manifest

BOTTLE = ObservedEntity("bottle", "bottle", (1, 2, 3), True)
CUP = ObservedEntity("cup", "cup", (4, 5, 6), False)
DETECT = Fallback((Annotator("PrimitiveDetector"), Annotator("TransparentObjectDetector")), 600_000)


def test_transparent_falls_back():
    _, trace = execute_pipeline(DETECT, Observation((BOTTLE,)))
    assert [(t.annotator, t.outcome) for t in trace] == [
        ("PrimitiveDetector", "low_confidence"),
        ("TransparentObjectDetector", "success"),
    ]
    assert trace[0].justification == "confidence 400000 below threshold 600000 → fallback"
    assert trace[1].justification == "confidence 850000 meets threshold 600000 → accept"


def test_opaque_skips_second():
    _, trace = execute_pipeline(DETECT, Observation((CUP,)))
    assert [(t.annotator, t.outcome) for t in trace] == [("PrimitiveDetector", "success"), ("TransparentObjectDetector", "skipped")]


def test_single_pose_estimator():
    cas, trace = execute_pipeline(Sequence((Annotator("PoseEstimator"),)), Observation((CUP,)))
    assert len(cas.hypotheses) == 1 and len(trace) == 1
    assert cas.hypotheses[0].pose == CUP.pose and cas.hypotheses[0].confidence_ppm == 800_000


def test_sequence_aborts():
    tree = Sequence((Annotator("TransparentObjectDetector"), Annotator("PoseEstimator")))
    tree = Fallback((tree,), 500_000)
    _, trace = execute_pipeline(tree, Observation((CUP,)))
    assert [t.outcome for t in trace] == ["low_confidence", "skipped"]
    assert trace[1].justification == "skipped: sequence aborted"


trees = st.recursive(
    st.sampled_from(["PrimitiveDetector", "TransparentObjectDetector", "PoseEstimator"]).map(Annotator),
    lambda kids: st.one_of(
        st.lists(kids, min_size=1, max_size=3).map(lambda c: Sequence(tuple(c))),
        st.builds(lambda c, t: Fallback(tuple(c), t), st.lists(kids, min_size=1, max_size=3), st.integers(0, 1_000_000)),
    ),
    max_leaves=8,
)


def leaf_count(node):
    return 1 if isinstance(node, Annotator) else sum(leaf_count(c) for c in node.children)


@settings(max_examples=200, deadline=None)
@given(trees, st.booleans())
def test_trace_properties(tree, transparent):
    obs = Observation((replace(BOTTLE, transparent=transparent),))
    cas, trace = execute_pipeline(tree, obs)
    assert execute_pipeline(tree, obs) == (cas, trace)
    assert len(trace) == leaf_count(tree)  # every annotator appears exactly once
    assert len(cas.hypotheses) == sum(t.outcome != "skipped" for t in trace)
    assert decode_pipeline(encode_pipeline(tree)) == tree


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from(["PrimitiveDetector", "TransparentObjectDetector", "PoseEstimator"]), min_size=1, max_size=5),
    st.integers(0, 1_000_000),
    st.booleans(),
)
def test_fallback_contract(names, threshold, transparent):
    tree = Fallback(tuple(Annotator(n) for n in names), threshold)
    _, trace = execute_pipeline(tree, Observation((replace(BOTTLE, transparent=transparent),)))
    run = [t for t in trace if t.outcome != "skipped"]
    won = [t for t in run if t.outcome == "success"]
    assert len(won) <= 1
    before = run[:-1] if won else run
    assert all(t.confidence_ppm < threshold for t in before)
    if won:
        assert run[-1] is won[0] and won[0].confidence_ppm >= threshold
        assert all(t.outcome == "skipped" for t in trace[len(run):])


def test_malformed_trees():
    for bad in (Sequence(()), Fallback((Annotator("PoseEstimator"),), 2_000_000), Annotator("Oracle"), "x"):
        with pytest.raises(MalformedTree):
            execute_pipeline(bad, Observation(()))
    with pytest.raises(MalformedObject):
        decode_pipeline(b'{"sequence":[]}')
    with pytest.raises(MalformedObject):
        decode_pipeline(b'{"annotator":"PoseEstimator","extra":1}')


def test_observe_noise():
    manifest = scene_manifest(tabletop())
    truth = observe(manifest)
    assert [o.pose for o in truth.entities] == [(400_000, 0, 100_000), (300_000, -250_000, 100_000), (400_000, 200_000, 80_000)]
    assert truth.entities[0].transparent and not truth.entities[1].transparent
    for seed in range(50):
        noisy = observe(manifest, noise=SplitMix64(seed))
        assert noisy == observe(manifest, noise=SplitMix64(seed))
        for a, b in zip(noisy.entities, truth.entities):
            assert all(abs(x - y) <= 500 for x, y in zip(a.pose, b.pose))


def test_attach_to_episode():
    e = run_plan(tabletop(), six_step(), 1)
    obs = observe(e.scene)
    cas, trace = execute_pipeline(DETECT, obs)
    out = attach_to_episode(cas, trace, e)
    assert validate_episode(out) == []
    perceive = next(a for a in out.annotations if a.event_type == "perceive")
    kids = [a for a in out.annotations if a.parent == perceive.id]
    assert len(kids) == len(trace)
    last = out.beliefs[-1].beliefs
    best = {}
    for h in cas.hypotheses:
        best[h.entity] = max(best.get(h.entity, 0), h.confidence_ppm)
    assert {k: last[k].confidence_ppm for k in best} == best
    assert replay(out).beliefs == out.beliefs


def test_attach_empty_trace():
    e = run_plan(tabletop(), six_step(), 1)
    out = attach_to_episode(execute_pipeline(DETECT, Observation(()))[0], (), e)
    assert [a.event_type for a in out.annotations].count("perceive") == 1
    assert out.beliefs == e.beliefs


def test_plan_with_pipeline_is_seeded():
    plan = replace(six_step(), perception=DETECT)
    a, b = run_plan(tabletop(), plan, 4), run_plan(tabletop(), plan, 4)
    assert a == b
    poses = {k: v.pose for k, v in a.beliefs[-1].beliefs.items() if k == "bottle"}
    assert poses != {"bottle": pose(400_000, 200_000, 180_000)}  # perturbed by noise
