from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from conftest import six_step, tabletop
from strategies import comparisons, exprs, rules, token_soup
from neemtrace.errors import ParseError, UnitMismatch, UnknownField, UnknownUnit
from neemtrace.model import Quantity, RawFrame, Unit
from neemtrace.rules import (
    And,
    Comparison,
    Not,
    Or,
    Rule,
    evaluate,
    format_rule,
    parse_rule,
    parse_rules,
)
from neemtrace.simworld import Grasp, Plan, run_plan

GRASP_FORCE = "rule grasp_force on grasp: require max(force_torque.fz) >= 2.0 N"


def grasp_episode(grams):
    return run_plan(tabletop(bottle_g=grams), Plan((Grasp("bottle"),)), 0)


def test_grasp_force_rule():
    r = parse_rule(GRASP_FORCE)
    assert r == Rule("grasp_force", "grasp", Comparison("force_torque.fz", ">=", 2_000_000, "N", "max"))


def test_clearance_rule():
    r = parse_rule("rule clearance on move_to: require min(proximity.nearest) >= 50 mm")
    assert r.condition.value == 50_000 and r.condition.aggregate == "min"


def test_empty_aggregate_is_positioned():
    with pytest.raises(ParseError) as exc:
        parse_rule("rule bad on grasp: require max() > 1")
    assert (exc.value.line, exc.value.column) == (1, 32)


def test_unknown_unit():
    with pytest.raises(UnknownUnit) as exc:
        parse_rule("rule r on grasp: require max(force_torque.fz) > 2 furlong")
    assert exc.value.column == 51


def test_exact_decimal_scaling():
    assert parse_rule("rule r on g: require max(a.b) > 0.000001 N").condition.value == 1
    assert parse_rule("rule r on g: require max(a.b) > 1.1 mm").condition.value == 1_100
    with pytest.raises(ParseError):
        parse_rule("rule r on g: require max(a.b) > 0.0000001 N")


def test_precedence():
    r = parse_rule("rule r on g: require not max(a.b) > 1 and max(a.b) > 2 or max(a.b) > 3")
    c = lambda v: Comparison("a.b", ">", v, None, "max")
    assert r.condition == Or(And(Not(c(1)), c(2)), c(3))


def test_format_normalizes_whitespace():
    a = parse_rule("rule   grasp_force  on grasp :require max( force_torque . fz )>=2.0 N")
    assert format_rule(a) == "rule grasp_force on grasp severity error: require max(force_torque.fz) >= 2 N"
    assert parse_rule(format_rule(a)) == a == parse_rule(GRASP_FORCE)


def test_rules_file():
    text = "# comment\n\nrule a on grasp: require max(force_torque.fz) > 1 N  # trailing\nrule b on pour severity warning: require last(source.fill_level) >= 0 mL\n"
    assert [r.name for r in parse_rules(text)] == ["a", "b"]
    with pytest.raises(ParseError) as exc:
        parse_rules("rule a on g: require max(a.b) > 1\nrule b on g: require max(a.b) >\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        parse_rules("rule a on g: require max(a.b) > 1\nrule a on g: require max(a.b) > 2\n")


@pytest.mark.parametrize("grams,expected", [(100, [1_000_000]), (300, [])])
def test_grasp_force_evaluation(grams, expected):
    vs = evaluate(parse_rule(GRASP_FORCE), grasp_episode(grams))
    assert [v.observed for v in vs] == expected
    if vs:
        assert vs[0].threshold == 2_000_000 and vs[0].annotation == "a0001"
        assert vs[0].message == "grasp_force on a0001: max(force_torque.fz) = 1000000 µN, required >= 2000000 µN"


def test_vacuous_scope():
    assert evaluate(parse_rule("rule r on juggle: require max(force_torque.fz) > 1 N"), grasp_episode(100)) == []


def test_no_data_is_a_violation():
    e = run_plan(tabletop(), six_step(), 0)
    vs = evaluate(parse_rule("rule clearance on move_to: require min(proximity.nearest) >= 50 mm"), e)
    assert len(vs) == 1 and "no data for field" in vs[0].message and vs[0].observed is None


def test_clearance_with_obstacle():
    e = run_plan(tabletop(obstacle=True), six_step(), 0)
    assert evaluate(parse_rule("rule clearance on move_to: require min(proximity.nearest) >= 1 mm"), e) == []
    assert len(evaluate(parse_rule("rule clearance on move_to: require min(proximity.nearest) >= 5000 mm"), e)) == 1


def test_unknown_field_and_unit_mismatch():
    e = grasp_episode(100)
    with pytest.raises(UnknownField):
        evaluate(parse_rule("rule r on grasp: require max(sonar.range) > 1 mm"), e)
    with pytest.raises(UnknownField):
        evaluate(parse_rule("rule r on grasp: require max(patient.colour) > 1"), e)
    with pytest.raises(UnknownField):
        evaluate(parse_rule("rule r on grasp: require max(patient.pose) > 1"), e)
    with pytest.raises(UnitMismatch):
        evaluate(parse_rule("rule r on grasp: require max(force_torque.fz) > 1 mm"), e)


def test_avg_floors():
    e = grasp_episode(100)
    frames = tuple(f for f in e.frames if f.stream != "force_torque") + (
        RawFrame(100, "force_torque", (("fz", Quantity(-3, Unit.UN)),)),
        RawFrame(200, "force_torque", (("fz", Quantity(0, Unit.UN)),)),
    )
    e = replace(e, frames=tuple(sorted(frames, key=lambda f: (f.t, f.stream))))
    assert evaluate(parse_rule("rule r on grasp: require avg(force_torque.fz) == -2 µN"), e) == []


@settings(max_examples=500, deadline=None)
@given(rules)
def test_round_trip(rule):
    text = format_rule(rule)
    parsed = parse_rule(text)
    assert parsed == rule
    assert format_rule(parsed) == text


@settings(max_examples=1000, deadline=None)
@given(st.one_of(st.binary(max_size=200), token_soup.map(str.encode), token_soup))
def test_parser_totality(data):
    try:
        parse_rule(data)
    except ParseError as exc:
        assert exc.line >= 1 and exc.column >= 1


# ---------------------------------------------------------------------------
# brute-force oracle: materialize every (annotation, record) pair


def brute_samples(field, ann, e):
    head, name = field.split(".")
    pairs = [(ann, f) for f in e.frames] + [(ann, t) for t in e.transitions]
    out = []
    for a, rec in pairs:
        if not a.begin <= rec.t <= a.end:
            continue
        if isinstance(rec, RawFrame):
            if rec.stream == head:
                out += [q.value for k, q in rec.payload if k == name]
        elif rec.entity == a.participants.get(head) and rec.attribute == name:
            out.append(rec.new.value)
    return out


def brute_eval(rule, e):
    def agg(kind, xs):
        return {"max": max, "min": min, "last": lambda v: v[-1], "avg": lambda v: sum(v) // len(v)}[kind](xs)

    def holds(x, values):
        if isinstance(x, Comparison):
            v = agg(x.aggregate, values[x])
            return {">=": v >= x.value, "<=": v <= x.value, ">": v > x.value, "<": v < x.value, "==": v == x.value, "!=": v != x.value}[x.op]
        if isinstance(x, Not):
            return not holds(x.operand, values)
        if isinstance(x, And):
            return holds(x.left, values) and holds(x.right, values)
        return holds(x.left, values) or holds(x.right, values)

    def leaves(x):
        if isinstance(x, Comparison):
            return [x]
        if isinstance(x, Not):
            return leaves(x.operand)
        return leaves(x.left) + leaves(x.right)

    flagged = []
    for ann in e.annotations:
        if ann.event_type != rule.scope:
            continue
        values = {c: brute_samples(c.field, ann, e) for c in leaves(rule.condition)}
        if any(not v for v in values.values()):
            flagged.append((ann.id, "missing"))
        elif not holds(rule.condition, values):
            flagged.append((ann.id, "false"))
    return sorted(flagged)


fields_with_units = ["force_torque.fz", "joints.x", "joints.z", "source.fill_level", "destination.fill_level"]
unitless = comparisons(fields_with_units).map(lambda c: replace(c, unit=None))


@settings(max_examples=300, deadline=None)
@given(
    exprs(unitless),
    st.sampled_from(["grasp", "move_to", "pour", "release", "pour_water"]),
    st.integers(0, 50),
    st.integers(50, 400),
)
def test_evaluate_matches_brute_force(cond, scope, seed, grams):
    e = run_plan(tabletop(bottle_g=grams, obstacle=seed % 2 == 0), six_step(), seed, tick_us=400_000)
    assert len(e.frames) <= 50
    rule = Rule("r", scope, cond)
    got = sorted((v.annotation, "missing" if v.observed is None else "false") for v in evaluate(rule, e))
    assert got == brute_eval(rule, e)
