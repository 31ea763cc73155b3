"""Abstract syntax for the mini array language.

Nodes are frozen dataclasses so that structural equality is plain ``==``.
Source positions are carried for diagnostics but excluded from comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

# -- expressions -------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: Union[int, float]

    @property
    def is_real(self) -> bool:
        return isinstance(self.value, float)


@dataclass(frozen=True)
class Name:
    id: str


@dataclass(frozen=True)
class ArrayRef:
    name: str
    subs: tuple


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class Intrinsic:
    fn: str  # "max" | "min"
    args: tuple


Expr = Union[Num, Name, ArrayRef, BinOp, Neg, Intrinsic]

# -- statements --------------------------------------------------------------


@dataclass(frozen=True)
class Assign:
    target: Union[Name, ArrayRef]
    value: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Do:
    var: str
    lo: Expr
    hi: Expr
    step: Optional[Expr]
    body: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Return:
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Send:
    buf: ArrayRef
    count: Expr
    dest: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Receive:
    buf: ArrayRef
    count: Expr
    source: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Exchange:
    """Halo exchange along ``dim``.

    ``right`` fills the right halo: ``send`` goes to the left neighbour and
    ``recv`` is filled from the right neighbour. ``left`` is the mirror image.
    """

    recv: ArrayRef
    send: ArrayRef
    count: Expr
    direction: str
    dim: int = 1
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SetupPart:
    lo: Expr
    hi: Expr
    lower: str
    upper: str
    line: int = field(default=0, compare=False)


Stmt = Union[Assign, Do, Call, Return, Send, Receive, Exchange, SetupPart]
COMM_STMTS = (Send, Receive, Exchange, SetupPart)

# -- declarations / program --------------------------------------------------


@dataclass(frozen=True)
class Decl:
    type: str  # "real" | "integer"
    name: str
    dims: tuple = ()  # ((lo, hi), ...) resolved to ints

    @property
    def rank(self) -> int:
        return len(self.dims)


@dataclass(frozen=True)
class Param:
    name: str
    value: int


@dataclass(frozen=True)
class Routine:
    name: str
    params: tuple
    decls: tuple
    body: tuple
    is_main: bool = False
    line: int = field(default=0, compare=False)

    def decl(self, name: str) -> Optional[Decl]:
        for d in self.decls:
            if isinstance(d, Decl) and d.name == name:
                return d
        return None

    @property
    def constants(self) -> dict:
        return {d.name: d.value for d in self.decls if isinstance(d, Param)}


@dataclass(frozen=True)
class Program:
    main: Routine
    routines: tuple
    parallel: bool = False
    params: tuple = ()  # global Param constants

    @property
    def all_routines(self) -> tuple:
        return (self.main,) + tuple(self.routines)

    def routine(self, name: str) -> Optional[Routine]:
        for r in self.all_routines:
            if r.name == name:
                return r
        return None

    @property
    def constants(self) -> dict:
        return {p.name: p.value for p in self.params}


# -- traversal helpers -------------------------------------------------------


def walk_stmts(body, parents=()) -> Iterator[tuple]:
    """Yield ``(stmt, enclosing_loops)`` in preorder."""
    for s in body:
        yield s, parents
        if isinstance(s, Do):
            yield from walk_stmts(s.body, parents + (s,))


def walk_expr(e) -> Iterator:
    yield e
    if isinstance(e, ArrayRef):
        for s in e.subs:
            yield from walk_expr(s)
    elif isinstance(e, BinOp):
        yield from walk_expr(e.left)
        yield from walk_expr(e.right)
    elif isinstance(e, Neg):
        yield from walk_expr(e.operand)
    elif isinstance(e, Intrinsic):
        for a in e.args:
            yield from walk_expr(a)


def stmt_exprs(s) -> list:
    """Expressions read by a statement (the assignment target's subscripts included)."""
    if isinstance(s, Assign):
        out = [s.value]
        if isinstance(s.target, ArrayRef):
            out.extend(s.target.subs)
        return out
    if isinstance(s, Do):
        return [s.lo, s.hi] + ([s.step] if s.step is not None else [])
    if isinstance(s, Call):
        return list(s.args)
    if isinstance(s, (Send, Receive)):
        return [s.buf, s.count, s.dest if isinstance(s, Send) else s.source]
    if isinstance(s, Exchange):
        return [s.recv, s.send, s.count]
    if isinstance(s, SetupPart):
        return [s.lo, s.hi]
    return []


def affine(e) -> Optional[tuple]:
    """Return ``(var_or_None, offset)`` for ``v``, ``v +/- c`` or ``c``; else None."""
    if isinstance(e, Num) and not e.is_real:
        return None, e.value
    if isinstance(e, Name):
        return e.id, 0
    if isinstance(e, BinOp) and e.op in "+-" and isinstance(e.left, Name) \
            and isinstance(e.right, Num) and not e.right.is_real:
        return e.left.id, e.right.value if e.op == "+" else -e.right.value
    if isinstance(e, Neg) and isinstance(e.operand, Num) and not e.operand.is_real:
        return None, -e.operand.value
    return None


def make_affine(var: Optional[str], offset: int):
    if var is None:
        return Num(offset) if offset >= 0 else Neg(Num(-offset))
    if offset == 0:
        return Name(var)
    if offset > 0:
        return BinOp("+", Name(var), Num(offset))
    return BinOp("-", Name(var), Num(-offset))
