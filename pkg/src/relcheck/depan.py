"""Dependence analysis and the def-use database.

Subscripts are restricted to ``index +/- constant`` so every dependence test
here is exact integer arithmetic on offsets. Interprocedural information is
context-insensitive: one summary per routine.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import UnknownArray
from .lang import typecheck
from .lang.ast import (ArrayRef, Assign, Call, Do, Exchange, Name, Receive, Send,
                       SetupPart, affine, walk_expr)
from .lang.printer import expr_str

# -- records -------------------------------------------------------------------


@dataclass(frozen=True)
class Access:
    """One array reference. ``subs`` holds ``(var, offset)`` pairs, or None when
    the element is unknown (whole-array access through a call)."""

    routine: str
    stmt: int
    array: str
    subs: Optional[tuple]
    write: bool
    loops: tuple  # ((stmt id, index var, direction), ...) outermost first
    order: int  # position in evaluation order within the routine

    def sub_text(self) -> tuple:
        if self.subs is None:
            return ("*",)
        return tuple(_affine_text(v, c) for v, c in self.subs)


def _affine_text(var, off):
    if var is None:
        return str(off)
    if off == 0:
        return var
    return f"{var}{off:+d}"


@dataclass(frozen=True)
class RefSite:
    routine: str
    stmt: int  # 0 denotes the routine entry (values supplied by callers)
    array: str
    subs: tuple  # printable subscripts, e.g. ("i+1", "j")


@dataclass(frozen=True)
class DependenceEdge:
    id: int
    kind: str  # "flow" | "anti" | "output"
    source: RefSite
    sink: RefSite
    carrier: Optional[int]  # stmt id of the carrying loop, None if loop-independent
    distance: tuple  # per array dimension: source offset - sink offset, None if unknown

    @property
    def carried(self) -> bool:
        return self.carrier is not None

    def describe(self) -> str:
        src = f"{self.source.array}({', '.join(self.source.subs)})" if self.source.stmt \
            else f"{self.source.array} at entry"
        snk = f"{self.sink.array}({', '.join(self.sink.subs)})"
        how = f"carried by loop s{self.carrier}" if self.carried else "loop-independent"
        dist = ", ".join("?" if d is None else str(d) for d in self.distance)
        return (f"e{self.id} {self.kind:<6} {self.source.routine}:s{self.source.stmt} {src} -> "
                f"{self.sink.routine}:s{self.sink.stmt} {snk}  {how}; distance ({dist})")


@dataclass(frozen=True)
class CrossRead:
    """Read of an array not written in the loop, offset along the loop index."""

    array: str
    stmt: int
    dim: int  # 1-based
    distance: int  # iterations back: a(i-1) has distance 1


@dataclass(frozen=True)
class DependenceSet:
    routine: str
    loop: int
    edges: tuple  # edges carried by this loop
    cross_reads: tuple
    serializing_scalars: tuple
    parallelizable: bool
    blocking: Optional[DependenceEdge] = None


@dataclass
class DefUseDB:
    """Def-use information for one typechecked program."""

    program: object = field(repr=False)
    symbols: object = field(repr=False)
    order: list  # routine names in program order
    stmts: dict  # routine -> {sid: stmt}
    parents: dict  # routine -> {sid: (enclosing loop sids)}
    accesses: dict  # routine -> [Access]
    may_define: dict  # (array, routine) -> sorted stmt ids
    defines: dict  # routine -> formal arrays it may define (directly or via calls)
    writes_direct: dict  # routine -> formal arrays written by its own statements
    flow: dict  # routine -> {var: set(vars its value may derive from)}
    formal_flow: dict  # routine -> {formal: set(formals)}
    bindings: list  # [{caller, stmt, callee, formal, actual}]
    edges: list
    _ids: dict = field(default_factory=dict, repr=False)

    def sid_of(self, stmt) -> tuple:
        try:
            return self._ids[id(stmt)]
        except KeyError:
            raise KeyError("statement does not belong to the analysed program") from None

    def edge(self, eid: int) -> DependenceEdge:
        for e in self.edges:
            if e.id == eid:
                return e
        raise KeyError(eid)

    def find_edges(self, array=None, kind=None, routine=None, sink_subs=None, source_stmt=None):
        out = []
        for e in self.edges:
            if array is not None and e.sink.array != array:
                continue
            if kind is not None and e.kind != kind:
                continue
            if routine is not None and e.sink.routine != routine:
                continue
            if sink_subs is not None and tuple(e.sink.subs) != tuple(sink_subs):
                continue
            if source_stmt is not None and e.source.stmt != source_stmt:
                continue
            out.append(e)
        return out

    def to_json(self) -> str:
        doc = {
            "routines": self.order,
            "may_define": [[a, r, ids] for (a, r), ids in sorted(self.may_define.items())],
            "defines": {r: sorted(v) for r, v in sorted(self.defines.items())},
            "bindings": self.bindings,
            "edges": [asdict(e) for e in self.edges],
        }
        return json.dumps(doc, sort_keys=True, indent=1)


# -- access collection -----------------------------------------------------------


def _subs(ref: ArrayRef) -> tuple:
    return tuple(affine(s) for s in ref.subs)


def _reads_in(expr) -> list:
    return [e for e in walk_expr(expr) if isinstance(e, ArrayRef)]


def _scalars_in(expr) -> list:
    return [e.id for e in walk_expr(expr) if isinstance(e, Name)]


def _loop_dir(do: Do) -> int:
    if do.step is None:
        return 1
    a = affine(do.step)
    if a is not None and a[0] is None:
        return 1 if a[1] > 0 else -1
    return 0


class _Builder:
    def __init__(self, program):
        self.p = program
        self.symbols = typecheck(program)
        self.order = [r.name for r in program.all_routines]
        self.stmts, self.parents, self.ids = {}, {}, {}
        self.accesses = {}
        self.defines, self.writes_direct, self.uses = {}, {}, {}
        self.flow, self.formal_flow = {}, {}
        self.bindings = []

    def is_array(self, routine, name):
        s = self.symbols.lookup(routine, name)
        return s is not None and s.kind == "array"

    def formals(self, routine):
        return self.p.routine(routine).params

    def number(self, r):
        stmts, parents = {}, {}
        counter = [0]

        def visit(body, loops):
            for s in body:
                counter[0] += 1
                sid = counter[0]
                stmts[sid] = s
                parents[sid] = loops
                self.ids[id(s)] = (r.name, sid)
                if isinstance(s, Do):
                    visit(s.body, loops + (sid,))

        visit(r.body, ())
        self.stmts[r.name], self.parents[r.name] = stmts, parents

    def collect(self, r):
        """Accesses in evaluation order; also the routine's value-flow graph."""
        name = r.name
        acc, order = [], [0]
        flow: dict = {}
        stmts, parents = self.stmts[name], self.parents[name]

        def loops_of(sid):
            return tuple((l, stmts[l].var, _loop_dir(stmts[l])) for l in parents[sid])

        def add(sid, arr, subs, write):
            order[0] += 1
            acc.append(Access(name, sid, arr, subs, write, loops_of(sid), order[0]))

        for sid in sorted(stmts):
            s = stmts[sid]
            if isinstance(s, Assign):
                for ref in _reads_in(s.value):
                    add(sid, ref.name, _subs(ref), False)
                srcs = {ref.name for ref in _reads_in(s.value)} | {
                    v for v in _scalars_in(s.value) if self.symbols.lookup(name, v).kind != "const"}
                tgt = s.target.name if isinstance(s.target, ArrayRef) else s.target.id
                flow.setdefault(tgt, set()).update(srcs)
                if isinstance(s.target, ArrayRef):
                    add(sid, s.target.name, _subs(s.target), True)
            elif isinstance(s, Call):
                callee = self.p.routine(s.name)
                if callee is None:  # resident routine: reads its array arguments only
                    for a in s.args:
                        if isinstance(a, Name) and self.is_array(name, a.id):
                            add(sid, a.id, None, False)
                    continue
                actuals = {}
                for a, f in zip(s.args, callee.params):
                    if isinstance(a, Name) and self.is_array(name, a.id):
                        actuals[f] = a.id
                        self.bindings.append({"caller": name, "stmt": sid, "callee": callee.name,
                                              "formal": f, "actual": a.id})
                for f, a in actuals.items():
                    if f in self.uses[callee.name]:
                        add(sid, a, None, False)
                for f, a in actuals.items():
                    if f in self.defines[callee.name]:
                        add(sid, a, None, True)
                        deps = {actuals[g] for g in self.formal_flow[callee.name].get(f, ())
                                if g in actuals}
                        flow.setdefault(a, set()).update(deps)
            elif isinstance(s, (Send, Receive)):
                add(sid, s.buf.name, None, isinstance(s, Receive))
            elif isinstance(s, Exchange):
                add(sid, s.send.name, None, False)
                add(sid, s.recv.name, None, True)
            elif isinstance(s, SetupPart):
                flow.setdefault(s.lower, set())
                flow.setdefault(s.upper, set())
        self.accesses[name] = acc
        self.flow[name] = flow
        formals = set(r.params)
        self.writes_direct[name] = sorted(
            {a.array for a in acc if a.write and a.array in formals
             and isinstance(stmts[a.stmt], Assign)})
        self.defines[name] = sorted({a.array for a in acc if a.write and a.array in formals})
        self.uses[name] = sorted({a.array for a in acc if not a.write and a.array in formals})
        closure = {}
        for f in r.params:
            if self.is_array(name, f):
                closure[f] = sorted(_closure(flow, f) & formals)
        self.formal_flow[name] = closure

    def build(self):
        for r in self.p.all_routines:
            self.number(r)
        for r in self._callees_first():
            self.collect(r)
        self.bindings.sort(key=lambda b: (self.order.index(b["caller"]), b["stmt"],
                                          self.p.routine(b["callee"]).params.index(b["formal"])))
        edges = []
        for name in self.order:
            edges.extend(self.routine_edges(name))
        edges = [DependenceEdge(i + 1, *e) for i, e in enumerate(edges)]
        may_define = {}
        for name in self.order:
            for a in self.accesses[name]:
                if a.write:
                    may_define.setdefault((a.array, name), set()).add(a.stmt)
        return DefUseDB(
            program=self.p, symbols=self.symbols, order=self.order, stmts=self.stmts,
            parents=self.parents, accesses=self.accesses,
            may_define={k: sorted(v) for k, v in may_define.items()},
            defines=self.defines, writes_direct=self.writes_direct, flow=self.flow,
            formal_flow=self.formal_flow, bindings=self.bindings, edges=edges, _ids=self.ids)

    def _callees_first(self):
        done, out = set(), []

        def visit(r):
            if r.name in done:
                return
            done.add(r.name)
            for sid in sorted(self.stmts[r.name]):
                s = self.stmts[r.name][sid]
                if isinstance(s, Call) and self.p.routine(s.name) is not None:
                    visit(self.p.routine(s.name))
            out.append(r)

        for r in self.p.all_routines:
            visit(r)
        return out

    # -- pairwise tests ----------------------------------------------------------

    def routine_edges(self, name):
        acc = self.accesses[name]
        out = []
        by_array: dict = {}
        for a in acc:
            by_array.setdefault(a.array, []).append(a)
        reached = set()
        for i, a in enumerate(acc):
            for b in acc[i:]:
                if a.array != b.array or not (a.write or b.write):
                    continue
                pairs = [(a, b)] if a is b else [(a, b), (b, a)]
                for src, snk in pairs:
                    carrier = _depends(src, snk)
                    if carrier is False:
                        continue
                    kind = ("flow" if src.write and not snk.write else
                            "anti" if snk.write and not src.write else "output")
                    if kind == "flow":
                        reached.add(snk.order)
                    out.append((src, snk, kind, carrier))
        # Stable numbering: by sink then source evaluation order.
        out.sort(key=lambda t: (t[1].order, t[0].order, t[2]))
        edges = [(k, _site(s), _site(t), c, _distance(s, t)) for s, t, k, c in out]
        formals = set(self.formals(name))
        for b in acc:
            if b.write or b.array not in formals or b.order in reached or b.subs is None:
                continue
            if any(v is not None and c != 0 for v, c in b.subs):
                src = RefSite(name, 0, b.array, ())
                dist = tuple(-c if v is not None else None for v, c in b.subs)
                edges.append(("flow", src, _site(b), None, dist))
        return edges


def _site(a: Access) -> RefSite:
    return RefSite(a.routine, a.stmt, a.array, a.sub_text())


def _distance(src: Access, snk: Access) -> tuple:
    if src.subs is None or snk.subs is None:
        n = len(src.subs or snk.subs or ())
        return (None,) * n
    out = []
    for (v1, c1), (v2, c2) in zip(src.subs, snk.subs):
        out.append(c1 - c2 if v1 == v2 else None)
    return tuple(out)


def _depends(src: Access, snk: Access):
    """Can ``src`` execute before ``snk`` on the same element?

    Returns False if not, None for a loop-independent dependence, or the stmt id
    of the outermost loop that may carry it.
    """
    common = []
    for x, y in zip(src.loops, snk.loops):
        if x[0] != y[0]:
            break
        common.append(x)
    delta = {}  # loop var -> exact iteration-value difference (sink - source)
    if src.subs is not None and snk.subs is not None:
        cvars = {v for _, v, _ in common}
        for (v1, c1), (v2, c2) in zip(src.subs, snk.subs):
            if v1 is None and v2 is None:
                if c1 != c2:
                    return False
            elif v1 == v2 and v1 in cvars:
                d = c1 - c2
                if delta.get(v1, d) != d:
                    return False
                delta[v1] = d
    for sid, var, direction in common:
        if var not in delta or direction == 0:
            return sid
        d = delta[var] * direction
        if d > 0:
            return sid
        if d < 0:
            return False
    if src is snk:
        return False
    if src.stmt == snk.stmt:
        if src.subs is None and snk.subs is None:
            return False  # both halves of one call; the callee's own edges cover it
        return None if (not src.write and snk.write) else False
    return None if src.order < snk.order else False


def _closure(flow: dict, start: str) -> set:
    seen, todo = {start}, [start]
    while todo:
        v = todo.pop()
        for w in flow.get(v, ()):
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return seen


# -- public operations -----------------------------------------------------------


def build_defuse(program) -> DefUseDB:
    """Analyse a typechecked serial program."""
    return _Builder(program).build()


def analyze_loop(loop, db: DefUseDB) -> DependenceSet:
    """Classify the dependences of one ``do`` loop of ``db.program``."""
    routine, sid = db.sid_of(loop)
    inside = {s for s, par in db.parents[routine].items() if sid in par}
    carried = tuple(e for e in db.edges if e.carrier == sid and e.sink.routine == routine)
    written = {a.array for a in db.accesses[routine] if a.write and a.stmt in inside}
    cross = []
    for a in db.accesses[routine]:
        if a.write or a.stmt not in inside or a.array in written or a.subs is None:
            continue
        for k, (v, c) in enumerate(a.subs, 1):
            if v == loop.var and c != 0:
                cross.append(CrossRead(a.array, a.stmt, k, -c))
    serializing = tuple(_serializing_scalars(loop, db.symbols.scope(routine)))
    blocking = next((e for e in carried if e.kind == "flow" and e.sink.array in written), None)
    return DependenceSet(routine, sid, carried, tuple(cross), serializing,
                         blocking is None and not serializing, blocking)


def _serializing_scalars(loop, scope) -> list:
    """Scalars assigned in the body but possibly read before being written."""
    assigned, read_first = set(), []
    written_so_far: set = set()

    def visit(body):
        for s in body:
            if isinstance(s, Assign):
                for v in _scalars_in(s.value):
                    sym = scope.get(v)
                    if sym is not None and sym.kind == "scalar" and v not in written_so_far:
                        read_first.append(v)
                if isinstance(s.target, ArrayRef):
                    for v in (x for sub in s.target.subs for x in _scalars_in(sub)):
                        if v not in written_so_far:
                            read_first.append(v)
                if isinstance(s.target, Name):
                    assigned.add(s.target.id)
                    written_so_far.add(s.target.id)
            elif isinstance(s, Do):
                for v in _scalars_in(s.lo) + _scalars_in(s.hi):
                    if v not in written_so_far:
                        read_first.append(v)
                written_so_far.add(s.var)
                visit(s.body)
            elif isinstance(s, Call):
                for a in s.args:
                    for v in _scalars_in(a):
                        if v not in written_so_far:
                            read_first.append(v)

    visit(loop.body)
    out = []
    for v in read_first:
        if v in assigned and v not in out:
            out.append(v)
    return out


def modifying_routines(db: DefUseDB, array: str, scope: str) -> list:
    """Routines whose execution may define the value of ``array`` seen in ``scope``.

    Returns ``[(routine, formal array name), ...]``: the instrumentation targets.
    Only formal parameters are listed (they are what a patched call can reach);
    each routine appears once, preferring the array that aliases the monitored
    one over arrays that merely feed into it.
    """
    p = db.program
    r = p.routine(scope)
    if r is None:
        raise UnknownArray(f"no routine {scope!r}")
    sym = db.symbols.lookup(scope, array)
    if sym is None or sym.kind != "array":
        raise UnknownArray(f"{array!r} is not an array visible in {scope!r}")

    result: list = []
    listed: set = set()

    def note(routine, direct, indirect):
        if routine in listed:
            return
        formals = p.routine(routine).params
        written = db.writes_direct[routine]
        pick = next((f for f in formals if f in direct and f in written), None)
        if pick is None:
            pick = next((f for f in formals if f in indirect and f in written), None)
        if pick is not None:
            listed.add(routine)
            result.append((routine, pick))

    def expand(routine, direct):
        alls = set()
        for v in direct:
            alls |= _closure(db.flow[routine], v)
        return alls - set(direct)

    def visit_callee(call, caller, direct, indirect):
        callee = p.routine(call.name)
        if callee is None:
            return
        d, ind = set(), set()
        for a, f in zip(call.args, callee.params):
            if isinstance(a, Name):
                if a.id in direct:
                    d.add(f)
                elif a.id in indirect:
                    ind.add(f)
        if not (d or ind):
            return
        if not (set(db.defines[callee.name]) & (d | ind)):
            return
        ind |= expand(callee.name, d | ind) - d
        note(callee.name, d, ind)
        for s in _calls_forward(callee.body):
            visit_callee(s, callee.name, d, ind)

    direct = {array}
    formals = set(r.params)
    if array not in formals:
        direct |= _closure(db.flow[scope], array) & formals
    indirect = expand(scope, direct)
    note(scope, direct, indirect)
    for s in _calls_forward(r.body):
        visit_callee(s, scope, direct, indirect)

    pending = [(scope, direct, indirect)]
    seen_scopes = set()
    while pending:
        callee_name, d_in, i_in = pending.pop(0)
        if callee_name in seen_scopes:
            continue
        seen_scopes.add(callee_name)
        callee = p.routine(callee_name)
        for caller in p.all_routines:
            for path in _call_paths(caller.body, callee_name):
                call = path[-1][0][path[-1][1]]
                d, ind = set(), set()
                for a, f in zip(call.args, callee.params):
                    if isinstance(a, Name):
                        if f in d_in:
                            d.add(a.id)
                        elif f in i_in:
                            ind.add(a.id)
                if not (d or ind):
                    continue
                ind |= expand(caller.name, d | ind) - d
                note(caller.name, d, ind)
                for s in _walk_back(path):
                    visit_callee(s, caller.name, d, ind)
                cf = set(caller.params)
                if d & cf or ind & cf:
                    pending.append((caller.name, d & cf, ind & cf))
    return result


def defs_reaching(db: DefUseDB, array: str, scope: str) -> set:
    """Set of routine names that may define the value of ``array`` in ``scope``."""
    return {r for r, _ in modifying_routines(db, array, scope)}


def _calls_forward(body):
    for s in body:
        if isinstance(s, Call):
            yield s
        elif isinstance(s, Do):
            yield from _calls_forward(s.body)


def _call_paths(body, target, prefix=()):
    """Paths ``((block, index), ...)`` to every call of ``target``."""
    for i, s in enumerate(body):
        here = prefix + ((body, i),)
        if isinstance(s, Call) and s.name == target:
            yield here
        elif isinstance(s, Do):
            yield from _call_paths(s.body, target, here)


def _walk_back(path):
    """Calls that may execute before the call at the end of ``path``.

    At each nesting level the preceding statements are visited nearest first,
    each compound statement contributing its calls in textual order; statements
    after the call inside an enclosing loop (earlier iterations) come next.
    """
    for depth in range(len(path) - 1, -1, -1):
        block, idx = path[depth]
        for s in reversed(block[:idx]):
            if isinstance(s, Call):
                yield s
            elif isinstance(s, Do):
                yield from _calls_forward(s.body)
        if depth > 0:
            for s in block[idx + 1:]:
                if isinstance(s, Call):
                    yield s
                elif isinstance(s, Do):
                    yield from _calls_forward(s.body)


def stmt_text(db: DefUseDB, routine: str, sid: int) -> str:
    s = db.stmts[routine][sid]
    if isinstance(s, Assign):
        return f"{expr_str(s.target)} = {expr_str(s.value)}"
    if isinstance(s, Do):
        return f"do {s.var} = {expr_str(s.lo)}, {expr_str(s.hi)}"
    if isinstance(s, Call):
        return f"call {s.name}({', '.join(expr_str(a) for a in s.args)})"
    return type(s).__name__.lower()


def format_edges(db: DefUseDB) -> str:
    """Text listing of every dependence edge."""
    lines = []
    for e in db.edges:
        lines.append(e.describe())
    return "\n".join(lines)

