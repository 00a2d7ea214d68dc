import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import six_step, tabletop
from oracles import all_trees, check_partition, synthesize_oracle
from neemtrace.errors import EmptyInput, MissingReference
from neemtrace.model import FaultSpec, TaskNode, canonical_encode, extract_task_tree
from neemtrace.simworld import Grasp, MoveTo, Plan, encode_plan, run_plan
from neemtrace.verify import (
    Quadruplet,
    VerificationContext,
    VerifierSpec,
    audit,
    canonical_code,
    decode_audit_trail,
    encode_audit_trail,
    is_isomorphic,
    plan_verification,
    run_verifier,
    synthesize,
)
from neemtrace.rules import parse_rules

GRASP_RULE = "rule grasp_force on grasp: require max(force_torque.fz) >= 2.0 N\n"


def stored(store, scene, plan, seed=0, faults=FaultSpec()):
    e = run_plan(scene, plan, seed, faults=faults)
    store.put(encode_plan(plan), "plan")
    return e, store.put(canonical_encode(e), "episode")


def spec(name, kind, competence=()):
    return VerifierSpec(name, frozenset(competence), kind)


def test_quadruplet_invariant():
    with pytest.raises(ValueError):
        Quadruplet(True, 1, "x", (Grasp("b"),))
    with pytest.raises(ValueError):
        Quadruplet(False, 1_000_001, "x")


def test_synthesize_examples():
    out = synthesize([Quadruplet(True, 900_000, "a"), Quadruplet(True, 1_000_000, "b")])
    assert (out.decision, out.confidence_ppm, out.recovery) == (True, 900_000, None)
    r = (Grasp("x"),)
    out = synthesize([Quadruplet(True, 900_000, "ok"), Quadruplet(False, 600_000, "e", r)])
    assert out == Quadruplet(False, 600_000, "e", r)
    with pytest.raises(EmptyInput):
        synthesize([])


def test_synthesize_tie_by_name():
    r1, r2 = (Grasp("one"),), (Grasp("two"),)
    out = synthesize({"zeta": Quadruplet(False, 5, "z", r1), "alpha": Quadruplet(False, 5, "a", r2)})
    assert out.recovery == r2 and out.explanation == "a; z"


def test_synthesize_all_decision_vectors_fixed_confidences():
    confs = [700_000, 900_000, 900_000, 400_000]
    for mask in range(16):
        named = [
            (f"v{i}", Quadruplet(bool(mask >> i & 1), c, f"e{i}", None if mask >> i & 1 else (Grasp(f"o{i}"),)))
            for i, c in enumerate(confs)
        ]
        got = synthesize(dict(named))
        want = synthesize_oracle(named)
        assert (got.decision, got.confidence_ppm, got.recovery) == want[:3]
        if not got.decision:
            assert got.explanation == want[3]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 1_000_000)), min_size=1, max_size=6), st.randoms())
def test_synthesis_order_independent(vec, rnd):
    named = [(f"v{i}", Quadruplet(d, c, f"e{i}", None if d else (Grasp(f"o{i}"),))) for i, (d, c) in enumerate(vec)]
    shuffled = named[:]
    rnd.shuffle(shuffled)
    assert synthesize(named) == synthesize(shuffled) == synthesize(dict(shuffled))
    assert synthesize(named).decision == all(d for d, _ in vec)


def test_isomorphism_examples():
    a = TaskNode(("grasp",))
    assert is_isomorphic(a, TaskNode(("grasp",)))
    g, m = TaskNode(("grasp",)), TaskNode(("move_to",))
    assert is_isomorphic(TaskNode(("t",), (g, m)), TaskNode(("t",), (m, g)))
    assert not is_isomorphic(TaskNode(("t",), (g, m)), TaskNode(("t",), (g, g)))
    assert not is_isomorphic(TaskNode(("t",), (g,)), TaskNode(("t",), (TaskNode(("x",), (g,)),)))


def test_isomorphism_small_exhaustive():
    problems, classes = check_partition(list(all_trees(5)), canonical_code)
    assert problems == [] and classes > 100


def test_oracle_catches_broken_classifiers():
    def ordered(t):
        return (t.label, tuple(ordered(c) for c in t.children))

    def labels_only(t):
        return tuple(sorted(t.labels()))

    trees = list(all_trees(4))
    assert any(p[0] == "isomorphic, different classes" for p in check_partition(trees, ordered)[0])
    assert any(p[0] == "same class, not isomorphic" for p in check_partition(trees, labels_only)[0])


def random_tree(rnd, n):
    parents = [[]]
    for i in range(1, n):
        parents[rnd.randrange(i)].append(i)
        parents.append([])
    labels = [rnd.choice("ab") for _ in range(n)]

    def build(i):
        kids = parents[i][:]
        rnd.shuffle(kids)
        return TaskNode(labels[i], tuple(build(k) for k in kids))

    return build(0)


@settings(max_examples=300, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 12))
def test_isomorphism_is_an_equivalence(rnd, n):
    seed = rnd.random()
    a = random_tree(random.Random(seed), n)
    b = random_tree(random.Random(seed), n)  # same tree, fresh shuffles below
    c = random_tree(rnd, n)

    def shuffle(t):
        kids = [shuffle(k) for k in t.children]
        rnd.shuffle(kids)
        return TaskNode(t.label, tuple(kids))

    b = shuffle(b)
    assert is_isomorphic(a, a)
    assert is_isomorphic(a, b) and is_isomorphic(b, a)
    assert is_isomorphic(a, c) == is_isomorphic(c, a)
    if is_isomorphic(a, c):
        assert is_isomorphic(b, c)


def test_plan_verification():
    e = run_plan(tabletop(), Plan((MoveTo((0, 0, 400_000)),)), 0)
    avail = [spec("grasp_only", "rule", {"grasp"}), spec("hash_integrity", "hash_integrity"), spec("replay_determinism", "replay_determinism")]
    assert [v.name for v in plan_verification(e, avail)] == ["hash_integrity", "replay_determinism"]
    pour = run_plan(tabletop(), six_step(), 0)
    avail.append(spec("disc", "discrepancy", {"pour"}))
    chosen = plan_verification(pour, avail)
    assert [v.name for v in chosen] == ["disc", "grasp_only", "hash_integrity", "replay_determinism"]
    assert plan_verification(pour, avail) == chosen
    with pytest.raises(ValueError):
        plan_verification(pour, avail + [spec("disc", "rule", {"pour"})])


def test_verifier_examples(store):
    e, h = stored(store, tabletop(bottle_g=100), six_step())
    ctx = VerificationContext(store, h, tuple(parse_rules(GRASP_RULE)))
    assert run_verifier(spec("h", "hash_integrity"), e, ctx) == Quadruplet(True, 1_000_000, "hash verified")
    q = run_verifier(spec("r", "rule", {"grasp"}), e, ctx)
    assert (q.decision, q.confidence_ppm, q.recovery) == (False, 900_000, (Grasp("bottle"),))
    assert "grasp_force" in q.explanation
    q = run_verifier(spec("d", "replay_determinism"), e, ctx)
    assert q.decision and q.confidence_ppm == 1_000_000
    with pytest.raises(MissingReference):
        run_verifier(spec("t", "tree_isomorphism"), e, ctx)
    assert run_verifier(spec("x", "discrepancy", {"pour"}), e, ctx).decision


def test_discrepancy_verifier_on_slip(store):
    e, h = stored(store, tabletop(), six_step(), faults=FaultSpec(grasp_slip_ppm=1_000_000))
    q = run_verifier(spec("x", "discrepancy", {"grasp"}), e, VerificationContext(store, h))
    assert not q.decision and "grasp slip fault" in q.explanation
    assert q.recovery and q.recovery[0] == Grasp("bottle")


def test_tree_verifier(store):
    ref, rh = stored(store, tabletop(), six_step(), seed=1)
    ok, _ = stored(store, tabletop(), six_step(), seed=2)
    bad, _ = stored(store, tabletop(), six_step(), seed=2, faults=FaultSpec(grasp_slip_ppm=1_000_000))
    ctx = VerificationContext(store, None, (), ref, rh)
    assert run_verifier(spec("t", "tree_isomorphism"), ok, ctx).decision
    q = run_verifier(spec("t", "tree_isomorphism"), bad, ctx)
    assert not q.decision and q.recovery is None


def test_hash_integrity_detects_corruption(store):
    e, h = stored(store, tabletop(), six_step())
    path = store.path_for(h)
    path.chmod(0o644)
    path.write_bytes(path.read_bytes().replace(b'"seed":0', b'"seed":1'))
    q = run_verifier(spec("h", "hash_integrity"), e, VerificationContext(store, h))
    assert not q.decision


def test_audit_clean_and_weak(store):
    _, clean = stored(store, tabletop(), six_step())
    _, weak = stored(store, tabletop(bottle_g=100), six_step())
    t = audit(store, clean, GRASP_RULE)
    assert t.final.decision and t.final.recovery is None
    t2 = audit(store, weak, GRASP_RULE)
    assert not t2.final.decision and t2.final.recovery == (Grasp("bottle"),)
    assert t2.violations and t2.violations[0].observed == 1_000_000
    assert decode_audit_trail(store.get(t2.hash)) == t2
    assert audit(store, weak, GRASP_RULE).hash == t2.hash
    assert audit(store, weak, GRASP_RULE, created="2030-01-01").hash == t2.hash
    assert [s for _, s in store.verify_all()] == ["ok"] * len(store.list())


def test_audit_with_reference(store):
    _, ref = stored(store, tabletop(), six_step(), seed=1)
    _, other = stored(store, tabletop(), six_step(), seed=9)
    t = audit(store, other, "", ref)
    assert "task_tree" in t.pipeline and t.final.decision
    doc = json.loads(encode_audit_trail(t))
    assert doc["reference"] == ref and doc["kind"] == "audit_trail"


def test_trail_is_canonical(store):
    _, h = stored(store, tabletop(bottle_g=100), six_step())
    t = audit(store, h, GRASP_RULE)
    data = store.get(t.hash)
    assert data == json.dumps(json.loads(data), sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()


def test_seed_invariance_of_trees():
    trees = {canonical_code(extract_task_tree(run_plan(tabletop(), six_step(), s)).root) for s in range(10)}
    assert len(trees) == 1
