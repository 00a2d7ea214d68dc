"""SWRL-lite: validity rules over episodes.

Grammar (one rule per line in ``.rules`` files, ``#`` starts a comment)::

    rule     := "rule" IDENT "on" IDENT ["severity" ("error" | "warning")] ":" "require" expr
    expr     := and_expr ("or" and_expr)*
    and_expr := not_expr ("and" not_expr)*
    not_expr := "not" not_expr | "(" expr ")" | compare
    compare  := AGG "(" field ")" OP NUMBER [UNIT]
    AGG      := max | min | avg | last
    OP       := >= | <= | > | < | == | !=

Thresholds are scaled to micro-units at parse time with exact decimal
arithmetic. ``avg`` floors. Missing data is a violation.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Union

from .errors import ParseError, UnitMismatch, UnknownField, UnknownUnit
from .model import ROLES, Quantity, Unit

AGGREGATES = ("max", "min", "avg", "last")
OPS = (">=", "<=", "==", "!=", ">", "<")
SEVERITIES = ("error", "warning")
KEYWORDS = {"and", "or", "not", "where", "select"}

# unit token -> (scale to micro-units, stored unit)
UNITS = {
    "N": (1_000_000, Unit.UN),
    "mN": (1_000, Unit.UN),
    "µN": (1, Unit.UN),
    "uN": (1, Unit.UN),
    "mm": (1_000, Unit.UM),
    "µm": (1, Unit.UM),
    "um": (1, Unit.UM),
    "mL": (1_000, Unit.UL),
    "µL": (1, Unit.UL),
    "uL": (1, Unit.UL),
    "s": (1_000_000, Unit.US),
    "ms": (1_000, Unit.US),
}

# frame streams the world can emit, with their payload fields
STREAM_FIELDS = {
    "joints": ("x", "y", "z"),
    "force_torque": ("fx", "fy", "fz"),
    "proximity": ("nearest",),
    "camera_meta": (),
}

MAX_INPUT = 10_000


# ---------------------------------------------------------------------------
# lexer


@dataclass(frozen=True)
class Token:
    kind: str  # ident | number | string | hash | op | eof
    text: str
    line: int
    column: int


def _ident_start(c: str) -> bool:
    return c.isascii() and (c.isalpha() or c == "_") or c in "µμ"


def _ident_char(c: str) -> bool:
    return _ident_start(c) or (c.isascii() and c.isdigit())


def _decode(text, line: int = 1) -> str:
    if isinstance(text, (bytes, bytearray)):
        try:
            return bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raw = bytes(text)[: exc.start]
            ln = line + raw.count(b"\n")
            col = exc.start - (raw.rfind(b"\n") + 1) + 1
            raise ParseError("invalid UTF-8 byte", ln, col) from None
    return text


def tokenize(text: str, line: int = 1) -> list[Token]:
    if len(text) > MAX_INPUT:
        raise ParseError(f"input longer than {MAX_INPUT} characters", line, 1)
    toks = []
    i, col = 0, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c == "\n":
            i, line, col = i + 1, line + 1, 1
            continue
        if c in " \t\r":
            i, col = i + 1, col + 1
            continue
        if c == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if len(text) - i >= 64 and all(ch in "0123456789abcdef" for ch in text[i : i + 64]) and (
            i + 64 == n or not _ident_char(text[i + 64])
        ):
            toks.append(Token("hash", text[i : i + 64], line, start_col))
            i, col = i + 64, col + 64
            continue
        if c.isascii() and c.isdigit() or (c == "-" and i + 1 < n and text[i + 1].isascii() and text[i + 1].isdigit()):
            j = i + 1
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isascii() and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isascii() and text[j].isdigit():
                    j += 1
            toks.append(Token("number", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if _ident_start(c):
            j = i + 1
            while j < n and _ident_char(text[j]):
                j += 1
            toks.append(Token("ident", text[i:j], line, start_col))
            col += j - i
            i = j
            continue
        if c == '"':
            j = i + 1
            buf = []
            while True:
                if j >= n or text[j] == "\n":
                    raise ParseError("unterminated string", line, start_col)
                ch = text[j]
                if ch == "\\":
                    if j + 1 >= n or text[j + 1] not in '"\\':
                        raise ParseError("invalid escape in string", line, col + j - i)
                    buf.append(text[j + 1])
                    j += 2
                    continue
                if ch == '"':
                    break
                buf.append(ch)
                j += 1
            toks.append(Token("string", "".join(buf), line, start_col))
            col += j + 1 - i
            i = j + 1
            continue
        two = text[i : i + 2]
        if two in (">=", "<=", "==", "!="):
            toks.append(Token("op", two, line, start_col))
            i, col = i + 2, col + 2
            continue
        if c in "<>():.,":
            toks.append(Token("op", c, line, start_col))
            i, col = i + 1, col + 1
            continue
        raise ParseError(f"unexpected character {c!r}", line, start_col)
    toks.append(Token("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# syntax tree


@dataclass(frozen=True)
class Comparison:
    field: str
    op: str
    value: Union[int, str]  # micro-units, or a string literal
    unit: str | None = None  # unit token as written; None when unitless
    aggregate: str | None = None


@dataclass(frozen=True)
class And:
    left: object
    right: object


@dataclass(frozen=True)
class Or:
    left: object
    right: object


@dataclass(frozen=True)
class Not:
    operand: object


Expr = Union[Comparison, And, Or, Not]


@dataclass(frozen=True)
class Rule:
    name: str
    scope: str
    condition: Expr
    severity: str = "error"


def comparisons(e: Expr):
    if isinstance(e, Comparison):
        yield e
    elif isinstance(e, Not):
        yield from comparisons(e.operand)
    else:
        yield from comparisons(e.left)
        yield from comparisons(e.right)


# ---------------------------------------------------------------------------
# parser


class Parser:
    """Recursive-descent parser over a token list.

    ``atom`` is the comparison parser for the current context (rule bodies,
    event queries, episode queries); boolean structure is shared.
    """

    def __init__(self, tokens, atom=None):
        self.toks = tokens
        self.i = 0
        self.atom = atom or self.rule_comparison

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k=1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg, tok=None, cls=ParseError):
        tok = tok or self.tok
        return cls(msg, tok.line, tok.column)

    def advance(self) -> Token:
        t = self.tok
        if t.kind != "eof":
            self.i += 1
        return t

    def is_word(self, word) -> bool:
        return self.tok.kind == "ident" and self.tok.text == word

    def is_op(self, op) -> bool:
        return self.tok.kind == "op" and self.tok.text == op

    def expect_word(self, word) -> Token:
        if not self.is_word(word):
            raise self.error(f"expected '{word}'{self._found()}")
        return self.advance()

    def expect_op(self, op) -> Token:
        if not self.is_op(op):
            raise self.error(f"expected '{op}'{self._found()}")
        return self.advance()

    def expect_ident(self, what="identifier") -> Token:
        if self.tok.kind != "ident":
            raise self.error(f"expected {what}{self._found()}")
        return self.advance()

    def expect_eof(self):
        if self.tok.kind != "eof":
            raise self.error(f"unexpected trailing input{self._found()}")

    def _found(self) -> str:
        t = self.tok
        return ", found end of input" if t.kind == "eof" else f", found {t.text!r}"

    # boolean structure
    def expr(self, depth=0):
        if depth > 100:
            raise self.error("expression nested too deeply")
        left = self.and_expr(depth)
        while self.is_word("or"):
            self.advance()
            left = Or(left, self.and_expr(depth))
        return left

    def and_expr(self, depth):
        left = self.not_expr(depth)
        while self.is_word("and"):
            self.advance()
            left = And(left, self.not_expr(depth))
        return left

    def not_expr(self, depth):
        if depth > 100:
            raise self.error("expression nested too deeply")
        if self.is_word("not"):
            self.advance()
            return Not(self.not_expr(depth + 1))
        if self.is_op("("):
            self.advance()
            e = self.expr(depth + 1)
            self.expect_op(")")
            return e
        return self.atom()

    # pieces of comparisons
    def field_path(self) -> str:
        parts = [self.expect_ident("field name").text]
        while self.is_op("."):
            self.advance()
            parts.append(self.expect_ident("field name").text)
        return ".".join(parts)

    def operator(self) -> str:
        if self.tok.kind != "op" or self.tok.text not in OPS:
            raise self.error(f"expected comparison operator{self._found()}")
        return self.advance().text

    def number_with_unit(self) -> tuple[int, str | None]:
        if self.tok.kind != "number":
            raise self.error(f"expected number{self._found()}")
        num = self.advance()
        unit = None
        if self.tok.kind == "ident" and self.tok.text not in KEYWORDS:
            unit_tok = self.advance()
            if unit_tok.text not in UNITS:
                raise self.error(f"unknown unit '{unit_tok.text}'", unit_tok, UnknownUnit)
            unit = unit_tok.text
        scale = UNITS[unit][0] if unit else 1
        try:
            scaled = Decimal(num.text) * scale
        except InvalidOperation:
            raise self.error("malformed number", num) from None
        if scaled != scaled.to_integral_value():
            raise self.error(f"{num.text} {unit or ''} is not a whole number of micro-units".replace("  ", " "), num)
        return int(scaled), unit

    def aggregate_comparison(self) -> Comparison:
        agg = self.advance().text
        self.expect_op("(")
        field = self.field_path()
        self.expect_op(")")
        op = self.operator()
        value, unit = self.number_with_unit()
        return Comparison(field, op, value, unit, agg)

    def rule_comparison(self) -> Comparison:
        if self.tok.kind == "ident" and self.tok.text in AGGREGATES:
            return self.aggregate_comparison()
        raise self.error(f"expected aggregate (max, min, avg, last){self._found()}")

    def rule(self) -> Rule:
        self.expect_word("rule")
        name = self.expect_ident("rule name").text
        self.expect_word("on")
        scope = self.expect_ident("event type").text
        severity = "error"
        if self.is_word("severity"):
            self.advance()
            tok = self.expect_ident("severity")
            if tok.text not in SEVERITIES:
                raise self.error("severity must be 'error' or 'warning'", tok)
            severity = tok.text
        self.expect_op(":")
        self.expect_word("require")
        cond = self.expr()
        self.expect_eof()
        return Rule(name, scope, cond, severity)


def parse_rule(text, line: int = 1) -> Rule:
    """Parse one rule; raise a positioned ParseError (or UnknownUnit) otherwise."""
    return Parser(tokenize(_decode(text, line), line)).rule()


def parse_rules(text) -> list[Rule]:
    """Parse a ``.rules`` file: one rule per line, ``#`` comments, blank lines ignored."""
    text = _decode(text)
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        if raw.split("#", 1)[0].strip():
            out.append(parse_rule(raw, n))
    names = [r.name for r in out]
    if len(set(names)) != len(names):
        raise ParseError("duplicate rule name", 1, 1)
    return out


# ---------------------------------------------------------------------------
# formatting

_PREC = {Or: 1, And: 2, Not: 3, Comparison: 4}


def format_number(value: int, unit: str | None) -> str:
    scale = UNITS[unit][0] if unit else 1
    sign = "-" if value < 0 else ""
    whole, frac = divmod(abs(value), scale)
    if frac == 0:
        text = str(whole)
    else:
        digits = len(str(scale)) - 1
        text = f"{whole}.{str(frac).rjust(digits, '0').rstrip('0')}"
    return sign + text + (f" {unit}" if unit else "")


def format_string(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def format_expr(e: Expr, need: int = 0) -> str:
    if isinstance(e, Comparison):
        lhs = f"{e.aggregate}({e.field})" if e.aggregate else e.field
        rhs = format_string(e.value) if isinstance(e.value, str) else format_number(e.value, e.unit)
        text = f"{lhs} {e.op} {rhs}"
    elif isinstance(e, Not):
        text = "not " + format_expr(e.operand, 3)
    elif isinstance(e, And):
        text = f"{format_expr(e.left, 2)} and {format_expr(e.right, 3)}"
    else:
        text = f"{format_expr(e.left, 1)} or {format_expr(e.right, 2)}"
    return f"({text})" if _PREC[type(e)] < need else text


def format_rule(rule: Rule) -> str:
    return f"rule {rule.name} on {rule.scope} severity {rule.severity}: require {format_expr(rule.condition)}"


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Violation:
    rule: str
    annotation: str
    observed: int | None
    threshold: int
    message: str
    severity: str = "error"


def field_vocabulary(episode) -> dict:
    vocab = {s: set(fs) for s, fs in STREAM_FIELDS.items()}
    for f in episode.frames:
        vocab.setdefault(f.stream, set()).update(k for k, _ in f.payload)
    return vocab


def attribute_vocabulary(episode) -> dict:
    """Attribute name -> whether every initial value of it is numeric."""
    attrs: dict[str, bool] = {}
    for d in episode.scene:
        for name, v in d.attrs.items():
            numeric = isinstance(v, (bool, Quantity))
            attrs[name] = attrs.get(name, True) and numeric
    return attrs


def field_samples(field: str, annotation, episode, vocab=None, attrs=None) -> list[Quantity]:
    """Numeric samples of ``field`` inside the annotation's closed interval.

    ``stream.name`` reads raw frames; ``role.attribute`` reads the new values
    of symbolic transitions of the participant filling ``role``.
    """
    head, _, name = field.partition(".")
    if not name or "." in name:
        raise UnknownField(f"field '{field}' must be stream.field or role.attribute")
    lo, hi = annotation.begin, annotation.end
    if head in ROLES:
        attrs = attribute_vocabulary(episode) if attrs is None else attrs
        if name not in attrs:
            raise UnknownField(f"unknown attribute '{name}' in '{field}'")
        if not attrs[name]:
            raise UnknownField(f"'{field}' is not numeric")
        ent = annotation.participants.get(head)
        out = []
        for tr in episode.transitions:
            if tr.entity == ent and tr.attribute == name and lo <= tr.t <= hi:
                v = tr.new
                if isinstance(v, bool):
                    out.append(Quantity(int(v), Unit.PPM))
                elif isinstance(v, Quantity):
                    out.append(v)
                else:
                    raise UnknownField(f"'{field}' is not numeric")
        return out
    vocab = field_vocabulary(episode) if vocab is None else vocab
    if head not in vocab or name not in vocab[head]:
        raise UnknownField(f"unknown field '{field}'")
    out = []
    for f in episode.frames:
        if f.stream == head and lo <= f.t <= hi:
            q = f.get(name)
            if q is not None:
                out.append(q)
    return out


def aggregate(agg: str, samples: list[Quantity]) -> int:
    values = [q.value for q in samples]
    if agg == "max":
        return max(values)
    if agg == "min":
        return min(values)
    if agg == "avg":
        return sum(values) // len(values)
    return values[-1]


def compare(observed, op: str, threshold) -> bool:
    return {
        ">=": observed >= threshold,
        "<=": observed <= threshold,
        ">": observed > threshold,
        "<": observed < threshold,
        "==": observed == threshold,
        "!=": observed != threshold,
    }[op]


def _check_units(c: Comparison, samples):
    if c.unit is None or not samples:
        return
    want = UNITS[c.unit][1]
    for q in samples:
        if q.unit is not want:
            raise UnitMismatch(f"{c.field} is measured in {q.unit.value}, rule uses {c.unit}")


def truth(e: Expr, leaf) -> bool:
    if isinstance(e, Comparison):
        return leaf(e)
    if isinstance(e, Not):
        return not truth(e.operand, leaf)
    if isinstance(e, And):
        return truth(e.left, leaf) and truth(e.right, leaf)
    return truth(e.left, leaf) or truth(e.right, leaf)


def _sorted_scope(episode, scope):
    return sorted((a for a in episode.annotations if a.event_type == scope), key=lambda a: (a.begin, a.id))


def evaluate(rule: Rule, episode) -> list[Violation]:
    vocab = field_vocabulary(episode)
    attrs = attribute_vocabulary(episode)
    out = []
    for ann in _sorted_scope(episode, rule.scope):
        observed = {}
        missing = None
        for c in comparisons(rule.condition):
            samples = field_samples(c.field, ann, episode, vocab, attrs)
            _check_units(c, samples)
            if not samples:
                missing = missing or c
                continue
            observed[c] = aggregate(c.aggregate, samples)
        if missing is not None:
            msg = f"{rule.name} on {ann.id}: no data for field {missing.field}"
            out.append(Violation(rule.name, ann.id, None, missing.value, msg, rule.severity))
            continue
        if truth(rule.condition, lambda c: compare(observed[c], c.op, c.value)):
            continue
        culprit = next(
            (c for c in comparisons(rule.condition) if not compare(observed[c], c.op, c.value)),
            next(comparisons(rule.condition)),
        )
        unit = UNITS[culprit.unit][1].value if culprit.unit else ""
        shown = f" {unit}" if unit else ""
        msg = (
            f"{rule.name} on {ann.id}: {culprit.aggregate}({culprit.field}) = "
            f"{observed[culprit]}{shown}, required {culprit.op} {culprit.value}{shown}"
        )
        out.append(Violation(rule.name, ann.id, observed[culprit], culprit.value, msg, rule.severity))
    return out
