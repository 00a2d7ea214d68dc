"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class TraceError(Exception):
    """Base class for every error raised by neemtrace."""


class InvalidEpisode(TraceError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid episode: " + "; ".join(self.violations))


class MultipleRoots(InvalidEpisode):
    pass


class CycleDetected(InvalidEpisode):
    pass


class InvalidScene(TraceError):
    pass


class InvalidPlan(TraceError):
    pass


class MalformedObject(TraceError):
    pass


class NotFound(TraceError):
    pass


class IntegrityViolation(TraceError):
    pass


class StoreLocked(TraceError):
    pass


class PlanMismatch(TraceError):
    pass


class InconsistentTransition(TraceError):
    def __init__(self, index, message):
        self.index = index
        super().__init__(f"transition {index}: {message}")


class MissingReference(TraceError):
    pass


class EmptyInput(TraceError):
    pass


class MalformedTree(TraceError):
    pass


class ParseError(TraceError):
    """Syntax error with a 1-based line/column position."""

    def __init__(self, message, line, column):
        self.message = message
        self.line = line
        self.column = column
        super().__init__(f"{line}:{column}: {message}")


class UnknownUnit(ParseError):
    pass


class UnknownField(TraceError):
    pass


class UnitMismatch(TraceError):
    pass
