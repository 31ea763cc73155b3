"""Name resolution and static checks."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import CommInSerialProgram, RankMismatch, TypeCheckError, UndeclaredName
from .ast import (COMM_STMTS, ArrayRef, Assign, BinOp, Call, Decl, Do, Exchange, Intrinsic,
                  Name, Neg, Num, Param, Receive, Send, SetupPart, affine, walk_stmts)

RANK_NAMES = ("myrank", "nranks")  # read-only integers in parallel programs


@dataclass(frozen=True)
class Symbol:
    name: str
    kind: str  # "array" | "scalar" | "const"
    type: str  # "real" | "integer"
    dims: tuple = ()
    formal: int = 0  # 1-based position among formals, 0 if not a formal
    value: int | None = None

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def shape(self) -> tuple:
        return tuple(hi - lo + 1 for lo, hi in self.dims)

    def __str__(self):
        if self.kind == "array":
            return f"{self.name}: {self.type}({','.join(map(str, self.shape))})"
        return f"{self.name}: {self.type}"


@dataclass
class SymbolTable:
    routines: dict = field(default_factory=dict)  # routine -> {name: Symbol}
    parallel: bool = False

    def scope(self, routine: str) -> dict:
        return self.routines[routine]

    def lookup(self, routine: str, name: str) -> Symbol | None:
        return self.routines.get(routine, {}).get(name)

    def arrays(self, routine: str) -> list:
        return [s for s in self.routines[routine].values() if s.kind == "array"]


class _Checker:
    def __init__(self, program, residents):
        self.p = program
        self.residents = set(residents)
        self.table = SymbolTable(parallel=program.parallel)

    def err(self, cls, msg, routine, node=None):
        raise cls(msg, routine, getattr(node, "line", None) or None)

    def run(self):
        p = self.p
        names = [r.name for r in p.all_routines]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise TypeCheckError(f"duplicate routine name(s): {', '.join(sorted(dup))}")
        gconsts = p.constants
        for r in sorted(p.all_routines, key=lambda r: r.name):
            self.table.routines[r.name] = self.declare(r, gconsts)
        for r in sorted(p.all_routines, key=lambda r: r.name):
            self.check_body(r)
        self.check_acyclic()
        return self.table

    def declare(self, r, gconsts):
        scope = {n: Symbol(n, "const", "integer", value=v) for n, v in gconsts.items()}
        if self.p.parallel:
            for n in RANK_NAMES:
                scope[n] = Symbol(n, "const", "integer")
        if r.is_main and r.params:
            self.err(TypeCheckError, "the main program takes no parameters", r.name, r)
        local = set()
        for d in r.decls:
            if d.name in local:
                self.err(TypeCheckError, f"{d.name!r} declared twice", r.name, r)
            local.add(d.name)
            if isinstance(d, Param):
                scope[d.name] = Symbol(d.name, "const", "integer", value=d.value)
                continue
            if d.dims:
                if d.type != "real":
                    self.err(TypeCheckError, f"array {d.name!r} must be real", r.name, r)
                if len(d.dims) > 2:
                    self.err(RankMismatch, f"array {d.name!r} has rank {len(d.dims)} (max 2)",
                             r.name, r)
                for lo, hi in d.dims:
                    if hi < lo:
                        self.err(TypeCheckError, f"array {d.name!r} has empty bounds", r.name, r)
            pos = r.params.index(d.name) + 1 if d.name in r.params else 0
            scope[d.name] = Symbol(d.name, "array" if d.dims else "scalar", d.type,
                                   tuple(d.dims), pos)
        for prm in r.params:
            if prm not in scope or scope[prm].formal == 0:
                self.err(UndeclaredName, f"formal parameter {prm!r} is not declared", r.name, r)
        if len(set(r.params)) != len(r.params):
            self.err(TypeCheckError, "repeated formal parameter", r.name, r)
        return scope

    # -- expressions ---------------------------------------------------------

    def sym(self, r, name, node):
        s = self.table.routines[r.name].get(name)
        if s is None:
            self.err(UndeclaredName, f"undeclared name {name!r}", r.name, node)
        return s

    def expr_type(self, r, e, node) -> str:
        if isinstance(e, Num):
            return "real" if e.is_real else "integer"
        if isinstance(e, Name):
            s = self.sym(r, e.id, node)
            if s.kind == "array":
                self.err(RankMismatch, f"array {e.id!r} used without subscripts", r.name, node)
            return s.type
        if isinstance(e, ArrayRef):
            self.array_ref(r, e, node)
            return "real"
        if isinstance(e, Neg):
            return self.expr_type(r, e.operand, node)
        if isinstance(e, BinOp):
            a = self.expr_type(r, e.left, node)
            b = self.expr_type(r, e.right, node)
            return "real" if "real" in (a, b) else "integer"
        if isinstance(e, Intrinsic):
            ts = [self.expr_type(r, a, node) for a in e.args]
            return "real" if "real" in ts else "integer"
        self.err(TypeCheckError, f"bad expression {e!r}", r.name, node)

    def array_ref(self, r, e, node):
        s = self.sym(r, e.name, node)
        if s.kind != "array":
            self.err(RankMismatch, f"{e.name!r} is not an array", r.name, node)
        if len(e.subs) != s.rank:
            self.err(RankMismatch, f"{e.name!r} has rank {s.rank}, referenced with "
                                   f"{len(e.subs)} subscript(s)", r.name, node)
        for sub in e.subs:
            a = affine(sub)
            if a is None:
                self.err(TypeCheckError, f"subscript of {e.name!r} must be 'index', "
                                         f"'index +/- constant' or a constant", r.name, node)
            var = a[0]
            if var is not None:
                vs = self.sym(r, var, node)
                if vs.kind == "array" or vs.type != "integer":
                    self.err(TypeCheckError, f"subscript variable {var!r} must be an integer "
                                             f"scalar", r.name, node)

    def int_expr(self, r, e, node, what):
        if self.expr_type(r, e, node) != "integer":
            self.err(TypeCheckError, f"{what} must be an integer expression", r.name, node)

    # -- statements ----------------------------------------------------------

    def check_body(self, r):

        for s, loops in walk_stmts(r.body):
            active = {lp.var for lp in loops}
            if isinstance(s, COMM_STMTS) and not self.p.parallel:
                self.err(CommInSerialProgram, f"{type(s).__name__.lower()} is only legal in a "
                                              f"parallel program", r.name, s)
            if isinstance(s, Assign):
                t = s.target
                if isinstance(t, Name):
                    sym = self.sym(r, t.id, s)
                    if sym.kind == "const":
                        self.err(TypeCheckError, f"cannot assign to constant {t.id!r}", r.name, s)
                    if sym.kind == "array":
                        self.err(RankMismatch, f"array {t.id!r} assigned without subscripts",
                                 r.name, s)
                    if t.id in active:
                        self.err(TypeCheckError, f"loop index {t.id!r} assigned inside its loop",
                                 r.name, s)
                else:
                    self.array_ref(r, t, s)
                self.expr_type(r, s.value, s)
            elif isinstance(s, Do):
                v = self.sym(r, s.var, s)
                if v.kind != "scalar" or v.type != "integer":
                    self.err(TypeCheckError, f"loop index {s.var!r} must be an integer scalar",
                             r.name, s)
                if s.var in active:
                    self.err(TypeCheckError, f"loop index {s.var!r} reused by a nested loop",
                             r.name, s)
                for e in (s.lo, s.hi) + ((s.step,) if s.step is not None else ()):
                    self.int_expr(r, e, s, "loop bound")
                if isinstance(s.step, Num) and s.step.value == 0:
                    self.err(TypeCheckError, "loop step is zero", r.name, s)
            elif isinstance(s, Call):
                self.call(r, s, active)
            elif isinstance(s, (Send, Receive)):
                self.array_ref(r, s.buf, s)
                self.int_expr(r, s.count, s, "count")
                self.int_expr(r, s.dest if isinstance(s, Send) else s.source, s, "peer rank")
            elif isinstance(s, Exchange):
                self.array_ref(r, s.recv, s)
                self.array_ref(r, s.send, s)
                if s.recv.name != s.send.name:
                    self.err(TypeCheckError, "exchange buffers must name the same array", r.name, s)
                if not 1 <= s.dim <= len(s.recv.subs):
                    self.err(RankMismatch, f"exchange dimension {s.dim} out of range", r.name, s)
                self.int_expr(r, s.count, s, "count")
            elif isinstance(s, SetupPart):
                self.int_expr(r, s.lo, s, "partition bound")
                self.int_expr(r, s.hi, s, "partition bound")
                for n in (s.lower, s.upper):
                    sym = self.sym(r, n, s)
                    if sym.kind != "scalar" or sym.type != "integer":
                        self.err(TypeCheckError, f"{n!r} must be an integer scalar", r.name, s)


    def call(self, r, s, active):
        callee = self.p.routine(s.name)
        if callee is None:
            if s.name in self.residents:
                for a in s.args:
                    if not (isinstance(a, Name) and self.sym(r, a.id, s).kind == "array"):
                        self.expr_type(r, a, s)
                return
            self.err(TypeCheckError, f"call to unknown routine {s.name!r}", r.name, s)
        if callee.is_main:
            self.err(TypeCheckError, "the main program cannot be called", r.name, s)
        if len(s.args) != len(callee.params):
            self.err(TypeCheckError, f"{s.name!r} expects {len(callee.params)} argument(s), "
                                     f"got {len(s.args)}", r.name, s)
        cscope = self.table.routines[callee.name]
        for a, formal in zip(s.args, callee.params):
            fs = cscope[formal]
            if fs.kind == "array":
                if not isinstance(a, Name):
                    self.err(RankMismatch, f"argument for array {formal!r} of {s.name!r} must "
                                           f"be an array name", r.name, s)
                asym = self.sym(r, a.id, s)
                if asym.kind != "array" or asym.rank != fs.rank:
                    self.err(RankMismatch, f"argument {a.id!r} does not match rank of "
                                           f"{s.name}.{formal}", r.name, s)
                if asym.dims != fs.dims:
                    self.err(TypeCheckError, f"bounds of {a.id!r} differ from {s.name}.{formal}",
                             r.name, s)
            else:
                self.expr_type(r, a, s)

    def check_acyclic(self):
        graph = {r.name: [s.name for s, _ in walk_stmts(r.body) if isinstance(s, Call)
                          and self.p.routine(s.name) is not None]
                 for r in self.p.all_routines}
        state = {}

        def visit(n, path):
            state[n] = 1
            for m in graph[n]:
                if state.get(m) == 1:
                    raise TypeCheckError(f"recursive call chain: {' -> '.join(path + [m])}")
                if m not in state:
                    visit(m, path + [m])
            state[n] = 2

        for n in sorted(graph):
            if n not in state:
                visit(n, [n])


def typecheck(program, residents=()) -> SymbolTable:
    """Resolve every name in ``program`` and return its symbol table.

    ``residents`` names routines linked into the executable by the runtime
    (callable from source without being defined there).
    """
    from .. import probe  # noqa: F401  registers the comparison residents
    from ..runtime.residents import RESIDENT_NAMES

    return _Checker(program, set(residents) | set(RESIDENT_NAMES)).run()
