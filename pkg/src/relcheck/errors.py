"""Exception hierarchy shared by every relcheck subsystem."""

from __future__ import annotations


class RelcheckError(Exception):
    """Base class; ``code`` is the short name used in protocol responses."""

    code = "Error"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message


# -- lang ------------------------------------------------------------------


class SyntaxIssue:
    __slots__ = ("line", "col", "message")

    def __init__(self, line: int, col: int, message: str):
        self.line = line
        self.col = col
        self.message = message

    def __repr__(self):
        return f"{self.line}:{self.col}: {self.message}"


class ParseError(RelcheckError):
    """Raised by :func:`relcheck.lang.parse`; carries every issue found."""

    code = "SyntaxError"

    def __init__(self, errors: list[SyntaxIssue]):
        self.errors = list(errors)
        super().__init__("; ".join(map(repr, self.errors)))

    @property
    def line(self):
        return self.errors[0].line

    @property
    def col(self):
        return self.errors[0].col


class TypeCheckError(RelcheckError):
    code = "TypeError"

    def __init__(self, message: str, routine: str | None = None, line: int | None = None):
        where = f"{routine}" if routine else ""
        if line:
            where += f" line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.routine = routine
        self.line = line


class UndeclaredName(TypeCheckError):
    code = "UndeclaredName"


class RankMismatch(TypeCheckError):
    code = "RankMismatch"


class CommInSerialProgram(TypeCheckError):
    code = "CommInSerialProgram"


# -- depan / partition -----------------------------------------------------


class UnknownArray(RelcheckError):
    code = "UnknownArray"


class InvalidRank(RelcheckError):
    code = "InvalidRank"


class EmptyRange(RelcheckError):
    code = "EmptyRange"


class NotParallelizable(RelcheckError):
    code = "NotParallelizable"

    def __init__(self, message: str, loop=None, edge=None):
        super().__init__(message)
        self.loop = loop
        self.edge = edge


class UnknownEdgeId(RelcheckError):
    code = "UnknownEdgeId"


class MalformedDatabase(RelcheckError):
    code = "MalformedDatabase"


# -- runtime ---------------------------------------------------------------


class RuntimeFault(RelcheckError):
    code = "RuntimeFault"

    def __init__(self, message: str, routine: str | None = None, stmt: int | None = None,
                 rank: int | None = None):
        loc = []
        if rank is not None:
            loc.append(f"rank {rank}")
        if routine:
            loc.append(routine if stmt is None else f"{routine} stmt {stmt}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.routine = routine
        self.stmt = stmt
        self.rank = rank


class Deadlock(RelcheckError):
    code = "Deadlock"

    def __init__(self, blocked: dict):
        self.blocked = dict(blocked)
        lines = [f"{who}: blocked in {where}" for who, where in sorted(self.blocked.items())]
        super().__init__("deadlock: " + "; ".join(lines))


class ResidualMessages(RelcheckError):
    code = "ResidualMessages"


class SpawnFailure(RelcheckError):
    code = "SpawnFailure"


class NoSuchPid(RelcheckError):
    code = "NoSuchPid"


class AlreadyAttached(RelcheckError):
    code = "AlreadyAttached"


class NotAttached(RelcheckError):
    code = "NotAttached"


class NotStopped(RelcheckError):
    code = "NotStopped"


class UnknownVariable(RelcheckError):
    code = "UnknownVariable"


# -- probe / compare -------------------------------------------------------


class UnknownRoutine(RelcheckError):
    code = "UnknownRoutine"


class BadArgPosition(RelcheckError):
    code = "BadArgPosition"


class BadCommand(RelcheckError):
    code = "BadCommand"


class LinkFailure(RelcheckError):
    code = "LinkFailure"


class SequenceMismatch(RelcheckError):
    code = "SequenceMismatch"


class MissingRank(RelcheckError):
    code = "MissingRank"


class BoundsMismatch(RelcheckError):
    code = "BoundsMismatch"


class OverlapDetected(RelcheckError):
    code = "OverlapDetected"


class ConfigError(RelcheckError):
    code = "ConfigError"


class IoError(RelcheckError):
    code = "IoError"
