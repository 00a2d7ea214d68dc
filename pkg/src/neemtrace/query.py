"""Query language over the episode store.

::

    query   := "episodes" ["where" expr]
             | "events" "in" (HASH | "all") ["where" expr] ["select" field ("," field)*]

Event-scope comparisons are rule-style aggregates over the annotation's
interval, numeric tests on ``begin``/``end``, or string (in)equality on
``event_type``, ``outcome``, ``failure_reason``, ``id``, ``parent`` and
``participants.<role>``. Episode scope allows plain tests on ``meta.*``
fields only; aggregates there are a syntax error.

An aggregate with no samples in the interval makes its comparison false.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import NotFound
from .model import ROLES, decode_episode
from .rules import (
    AGGREGATES,
    Comparison,
    Parser,
    _decode,
    aggregate,
    attribute_vocabulary,
    compare,
    field_samples,
    field_vocabulary,
    format_expr,
    tokenize,
    truth,
    _check_units,
)

EVENT_STRING_FIELDS = ("event_type", "outcome", "failure_reason", "id", "parent") + tuple(
    f"participants.{r}" for r in ROLES
)
EVENT_NUMERIC_FIELDS = ("begin", "end")
EPISODE_STRING_FIELDS = ("meta.plan_hash",)
EPISODE_NUMERIC_FIELDS = (
    "meta.seed",
    "meta.tick_us",
    "meta.schema_version",
    "meta.faults.grasp_slip_ppm",
    "meta.faults.pour_spill_ppm",
)
DEFAULT_SELECT = ("event_type", "outcome")
SELECTABLE = EVENT_STRING_FIELDS + EVENT_NUMERIC_FIELDS


@dataclass(frozen=True)
class EpisodesQuery:
    where: object = None


@dataclass(frozen=True)
class EventsQuery:
    target: str  # "all" or a content hash
    where: object = None
    select: tuple = DEFAULT_SELECT


class _QueryParser(Parser):
    def plain_comparison(self, string_fields, numeric_fields) -> Comparison:
        start = self.tok
        field = self.field_path()
        op = self.operator()
        if field in string_fields:
            if op not in ("==", "!="):
                raise self.error("string fields support only == and !=", start)
            if self.tok.kind != "string":
                raise self.error(f"expected string literal{self._found()}")
            return Comparison(field, op, self.advance().text)
        if field in numeric_fields:
            value, unit = self.number_with_unit()
            return Comparison(field, op, value, unit)
        raise self.error(f"unknown field '{field}'", start)

    def event_comparison(self) -> Comparison:
        if self.tok.kind == "ident" and self.tok.text in AGGREGATES and self.peek().text == "(":
            return self.aggregate_comparison()
        return self.plain_comparison(EVENT_STRING_FIELDS, EVENT_NUMERIC_FIELDS)

    def episode_comparison(self) -> Comparison:
        if self.tok.kind == "ident" and self.tok.text in AGGREGATES and self.peek().text == "(":
            raise self.error("aggregates are not valid at episode scope")
        return self.plain_comparison(EPISODE_STRING_FIELDS, EPISODE_NUMERIC_FIELDS)

    def query(self):
        if self.is_word("episodes"):
            self.advance()
            self.atom = self.episode_comparison
            where = None
            if self.is_word("where"):
                self.advance()
                where = self.expr()
            self.expect_eof()
            return EpisodesQuery(where)
        self.expect_word("events")
        self.expect_word("in")
        if self.tok.kind == "hash":
            target = self.advance().text
        elif self.is_word("all"):
            target = self.advance().text
        else:
            raise self.error(f"expected episode hash or 'all'{self._found()}")
        self.atom = self.event_comparison
        where = None
        if self.is_word("where"):
            self.advance()
            where = self.expr()
        select = DEFAULT_SELECT
        if self.is_word("select"):
            self.advance()
            fields = [self._select_field()]
            while self.is_op(","):
                self.advance()
                fields.append(self._select_field())
            select = tuple(fields)
        self.expect_eof()
        return EventsQuery(target, where, select)

    def _select_field(self) -> str:
        start = self.tok
        field = self.field_path()
        if field not in SELECTABLE:
            raise self.error(f"cannot select '{field}'", start)
        return field


def parse_query(text):
    return _QueryParser(tokenize(_decode(text))).query()


def format_query(q) -> str:
    if isinstance(q, EpisodesQuery):
        return "episodes" + (f" where {format_expr(q.where)}" if q.where is not None else "")
    out = f"events in {q.target}"
    if q.where is not None:
        out += f" where {format_expr(q.where)}"
    return out + " select " + ", ".join(q.select)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class ResultTable:
    columns: tuple
    rows: tuple

    def to_canonical(self) -> bytes:
        from .model import canonical_bytes

        return canonical_bytes({"columns": list(self.columns), "rows": [list(r) for r in self.rows]})

    def to_tsv(self) -> str:
        def cell(v):
            return "" if v is None else str(v).replace("\t", " ").replace("\n", " ")

        lines = ["\t".join(self.columns)]
        lines += ["\t".join(cell(v) for v in r) for r in self.rows]
        return "\n".join(lines) + "\n"


def event_field(ann, field: str):
    if field.startswith("participants."):
        return ann.participants.get(field.split(".", 1)[1], "")
    return getattr(ann, field)


def episode_field(e, field: str):
    m = e.meta
    return {
        "meta.plan_hash": m.plan_hash,
        "meta.seed": m.seed,
        "meta.tick_us": m.tick_us,
        "meta.schema_version": m.schema_version,
        "meta.faults.grasp_slip_ppm": m.faults.grasp_slip_ppm,
        "meta.faults.pour_spill_ppm": m.faults.pour_spill_ppm,
    }[field]


def _plain(c: Comparison, actual) -> bool:
    if isinstance(c.value, str):
        actual = "" if actual is None else actual
        return (actual == c.value) if c.op == "==" else (actual != c.value)
    return compare(actual, c.op, c.value)


def match_event(expr, ann, episode, vocab=None, attrs=None) -> bool:
    if expr is None:
        return True
    vocab = field_vocabulary(episode) if vocab is None else vocab
    attrs = attribute_vocabulary(episode) if attrs is None else attrs

    def leaf(c: Comparison) -> bool:
        if c.aggregate is None:
            return _plain(c, event_field(ann, c.field))
        samples = field_samples(c.field, ann, episode, vocab, attrs)
        _check_units(c, samples)
        return bool(samples) and compare(aggregate(c.aggregate, samples), c.op, c.value)

    return truth(expr, leaf)


def match_episode(expr, episode) -> bool:
    if expr is None:
        return True
    return truth(expr, lambda c: _plain(c, episode_field(episode, c.field)))


def _load(store, h):
    return decode_episode(store.get(h))


def run_query(q, store) -> ResultTable:
    """Evaluate ``q``; rows ordered by episode hash, annotation begin, annotation id."""
    if isinstance(q, EpisodesQuery):
        rows = [(h,) for h in store.list("episode") if match_episode(q.where, _load(store, h))]
        return ResultTable(("episode",), tuple(rows))
    if q.target == "all":
        hashes = store.list("episode")
    else:
        if q.target not in store:
            raise NotFound(f"episode {q.target} not found")
        if store.kind_of(q.target) != "episode":
            raise NotFound(f"object {q.target} is not an episode")
        hashes = [q.target]
    rows = []
    for h in hashes:
        e = _load(store, h)
        vocab, attrs = field_vocabulary(e), attribute_vocabulary(e)
        for ann in sorted(e.annotations, key=lambda a: (a.begin, a.id)):
            if match_event(q.where, ann, e, vocab, attrs):
                rows.append((h, ann.id, *(event_field(ann, f) for f in q.select)))
    return ResultTable(("episode", "annotation", *q.select), tuple(rows))

