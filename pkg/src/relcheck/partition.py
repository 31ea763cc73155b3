"""Block distribution and the serial -> SPMD transformation.

One dimension of an alignment group of arrays is block-distributed. Loops that
write a group array along that dimension get their bounds clamped to the rank's
block, and surviving flow dependences that cross a block boundary become
``exchange`` statements in front of the reading loop nest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from .depan import DefUseDB, analyze_loop, build_defuse, modifying_routines
from .errors import (EmptyRange, InvalidRank, IoError, MalformedDatabase, NotParallelizable,
                     UnknownArray, UnknownEdgeId)
from .lang.ast import (ArrayRef, Assign, Call, Decl, Do, Exchange, Intrinsic, Name,
                       Num, Program, Routine, SetupPart, affine, make_affine, stmt_exprs,
                       walk_expr)

DB_VERSION = 1


def block_bounds(lo: int, hi: int, nranks: int, rank: int) -> tuple:
    """Inclusive ``(lower, upper)`` of ``rank``'s block; low ranks take the remainder."""
    n = hi - lo + 1
    if n <= 0:
        raise EmptyRange(f"empty range {lo}..{hi}")
    if nranks < 1 or nranks > n:
        raise InvalidRank(f"cannot split {n} element(s) over {nranks} rank(s)")
    if not 0 <= rank < nranks:
        raise InvalidRank(f"rank {rank} outside 0..{nranks - 1}")
    q, rem = divmod(n, nranks)
    lower = lo + rank * q + min(rank, rem)
    size = q + (1 if rank < rem else 0)
    return lower, lower + size - 1


@dataclass(frozen=True)
class DistributionSpec:
    """Block partition of dimension ``dim`` (1-based) over ``lo..hi``.

    ``array`` and ``group`` hold qualified ``routine.name`` identifiers.
    """

    array: str
    dim: int
    lo: int
    hi: int
    nranks: int
    group: tuple = ()

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        block_bounds(self.lo, self.hi, self.nranks, 0)  # validates range and nranks

    def bounds(self, rank: int) -> tuple:
        return block_bounds(self.lo, self.hi, self.nranks, rank)

    def blocks(self) -> list:
        return [self.bounds(r) for r in range(self.nranks)]

    def owner(self, index: int) -> int:
        for r, (a, b) in enumerate(self.blocks()):
            if a <= index <= b:
                return r
        raise IndexError(f"{index} outside {self.lo}..{self.hi}")

    def with_nranks(self, nranks: int) -> "DistributionSpec":
        return replace(self, nranks=nranks)

    @property
    def local_names(self) -> dict:
        """routine -> group array names visible there."""
        out: dict = {}
        for q in self.group or (self.array,):
            r, n = q.split(".", 1)
            out.setdefault(r, []).append(n)
        return out

    def covers(self, routine: str, name: str) -> bool:
        return f"{routine}.{name}" in (self.group or (self.array,))

    def to_dict(self) -> dict:
        return {"array": self.array, "dim": self.dim, "lo": self.lo, "hi": self.hi,
                "nranks": self.nranks, "group": list(self.group)}

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSpec":
        return cls(d["array"], int(d["dim"]), int(d["lo"]), int(d["hi"]), int(d["nranks"]),
                   tuple(d.get("group", ())))


def resolve_array(program: Program, name: str) -> str:
    """Qualify ``name`` (``x`` or ``routine.x``); bare names prefer the main program."""
    if "." in name:
        r, n = name.split(".", 1)
        rt = program.routine(r)
        if rt is None or rt.decl(n) is None or not rt.decl(n).dims:
            raise UnknownArray(f"no array {n!r} in {r!r}")
        return name
    for r in program.all_routines:
        d = r.decl(name)
        if d is not None and d.dims:
            return f"{r.name}.{name}"
    raise UnknownArray(f"no array named {name!r}")


def make_distribution(program: Program, arrays, dim: int = 1, nranks: int = 1) -> DistributionSpec:
    """Distribution of ``dim`` for the named arrays, taking the range from their declarations."""
    if isinstance(arrays, str):
        arrays = [a for a in arrays.split(",") if a]
    quals = [resolve_array(program, a) for a in arrays]
    if not quals:
        raise UnknownArray("no array to distribute")
    ranges = set()
    for q in quals:
        r, n = q.split(".", 1)
        d = program.routine(r).decl(n)
        if dim > d.rank:
            raise UnknownArray(f"{q} has no dimension {dim}")
        ranges.add(d.dims[dim - 1])
    if len(ranges) != 1:
        raise NotParallelizable(f"arrays {', '.join(quals)} disagree on the bounds of "
                                f"dimension {dim}")
    lo, hi = ranges.pop()
    return DistributionSpec(quals[0], dim, lo, hi, nranks, tuple(sorted(set(quals))))


@dataclass
class ParallelizationDB:
    distributions: list = field(default_factory=list)
    targets: dict = field(default_factory=dict)  # "array@scope" -> [[routine, local], ...]
    removed_edges: list = field(default_factory=list)
    bindings: list = field(default_factory=list)
    replicated: list = field(default_factory=list)
    exchanges: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"v": DB_VERSION,
               "distributions": [d.to_dict() for d in self.distributions],
               "targets": self.targets, "removed_edges": list(self.removed_edges),
               "bindings": self.bindings, "replicated": self.replicated,
               "exchanges": self.exchanges}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParallelizationDB":
        try:
            doc = json.loads(text)
            if not isinstance(doc, dict) or doc.get("v") != DB_VERSION:
                raise ValueError("missing or unsupported schema version")
            for key in ("distributions", "targets", "removed_edges", "bindings"):
                if key not in doc:
                    raise ValueError(f"missing key {key!r}")
            targets = {str(k): [[str(r), str(a)] for r, a in v]
                       for k, v in dict(doc["targets"]).items()}
            return cls([DistributionSpec.from_dict(d) for d in doc["distributions"]], targets,
                       [int(e) for e in doc["removed_edges"]], list(doc["bindings"]),
                       list(doc.get("replicated", [])), list(doc.get("exchanges", [])))
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedDatabase(f"bad parallelization database: {exc}") from exc

    def distribution_for(self, routine: str, name: str) -> Optional[DistributionSpec]:
        for d in self.distributions:
            if d.covers(routine, name):
                return d
        return None

    def targets_for(self, array: str, scope: str) -> list:
        return [tuple(t) for t in self.targets.get(f"{array}@{scope}", [])]


def write_db(db: ParallelizationDB, path) -> None:
    try:
        Path(path).write_text(db.to_json())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_db(path) -> ParallelizationDB:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from None
    return ParallelizationDB.from_json(text)


def all_targets(db: DefUseDB) -> dict:
    out = {}
    for r in db.program.all_routines:
        for sym in db.symbols.arrays(r.name):
            out[f"{sym.name}@{r.name}"] = [list(t) for t in modifying_routines(db, sym.name, r.name)]
    return dict(sorted(out.items()))


# -- transformation ------------------------------------------------------------


class _Plan:
    """Per-routine facts gathered before rewriting."""

    def __init__(self):
        self.partitioned: set = set()  # loop sids
        self.exchanges: dict = {}  # insertion sid -> [exchange records]
        self.needs_bounds = False
        self.lname = self.hname = None


def _dist_sub(ref: ArrayRef, dim: int):
    return affine(ref.subs[dim - 1])


def _assigns(db, rname):
    for sid, s in sorted(db.stmts[rname].items()):
        if isinstance(s, Assign) and isinstance(s.target, ArrayRef):
            yield sid, s


def _loop_sid_for(db, rname, sid, var):
    for l in db.parents[rname][sid]:
        if db.stmts[rname][l].var == var:
            return l
    return None


def _grow_group(db: DefUseDB, dist: DistributionSpec) -> set:
    d = dist.dim
    group = set(dist.group or (dist.array,))

    def in_g(r, n):
        return f"{r}.{n}" in group

    changed = True
    while changed:
        changed = False
        new = set()
        for b in db.bindings:
            a, f = f"{b['caller']}.{b['actual']}", f"{b['callee']}.{b['formal']}"
            if (a in group) != (f in group):
                new |= {a, f}
        for r in db.order:
            part = set()
            for sid, s in _assigns(db, r):
                if in_g(r, s.target.name) and len(s.target.subs) >= d:
                    v, c = _dist_sub(s.target, d)
                    if v is not None and c == 0:
                        l = _loop_sid_for(db, r, sid, v)
                        if l is not None:
                            part.add(l)
            for sid, s in _assigns(db, r):
                t = s.target
                if in_g(r, t.name) or len(t.subs) < d:
                    continue
                v, c = _dist_sub(t, d)
                if v is None or c != 0:
                    continue
                l = _loop_sid_for(db, r, sid, v)
                if l is None:
                    continue
                feeds = any(isinstance(e, ArrayRef) and in_g(r, e.name)
                            and (affine(e.subs[d - 1]) or (None,))[0] == v
                            for e in walk_expr(s.value))
                if feeds or l in part:
                    new.add(f"{r}.{t.name}")
        new -= group
        if new:
            changed = True
            group |= new
    for q in group:
        r, n = q.split(".", 1)
        sym = db.symbols.lookup(r, n)
        if sym.rank < d or sym.dims[d - 1] != (dist.lo, dist.hi):
            raise NotParallelizable(f"{q} cannot be aligned with dimension {d} of {dist.array} "
                                    f"({dist.lo}:{dist.hi})")
    return group


def _plan_routine(db: DefUseDB, rname: str, dist: DistributionSpec, group: set,
                  removed: set) -> _Plan:
    d = dist.dim
    stmts, parents = db.stmts[rname], db.parents[rname]
    plan = _Plan()

    def in_g(n):
        return f"{rname}.{n}" in group

    def where(sid):
        return f"{rname} statement {sid} (line {stmts[sid].line})"

    # Loops that own a distributed write.
    for sid, s in _assigns(db, rname):
        if not in_g(s.target.name):
            continue
        v, c = _dist_sub(s.target, d)
        l = _loop_sid_for(db, rname, sid, v) if v is not None else None
        if l is None or c != 0:
            raise NotParallelizable(
                f"write to distributed {s.target.name} in {where(sid)} is not indexed by a "
                f"loop index along dimension {d}", loop=None)
        plan.partitioned.add(l)
    for l in sorted(plan.partitioned):
        loop = stmts[l]
        if any(p in plan.partitioned for p in parents[l]):
            raise NotParallelizable(f"nested distributed loops at {where(l)}", loop=l)
        if loop.step is not None and affine(loop.step) != (None, 1):
            raise NotParallelizable(f"distributed loop at {where(l)} has a non-unit step", loop=l)
        info = analyze_loop(loop, db)
        if info.serializing_scalars:
            raise NotParallelizable(
                f"loop at {where(l)} reads scalar(s) {', '.join(info.serializing_scalars)} "
                f"before writing them", loop=l)
        for e in info.edges:
            if e.kind == "flow" and e.id not in removed:
                raise NotParallelizable(f"loop at {where(l)} carries a flow dependence: "
                                        f"{e.describe()}", loop=l, edge=e)
        inside = {s for s, par in parents.items() if l in par}
        assigned = {stmts[s].target.id for s in inside
                    if isinstance(stmts[s], Assign) and isinstance(stmts[s].target, Name)}
        for s, st in stmts.items():
            if s in inside or s == l:
                continue
            used = {n.id for n in _names(st)}
            leak = assigned & used
            if leak:
                raise NotParallelizable(f"scalar {sorted(leak)[0]} set in distributed loop at "
                                        f"{where(l)} is used outside it", loop=l)

    def enclosing_part(sid):
        return next((p for p in parents[sid] if p in plan.partitioned), None)

    # Reads of group arrays; collect exchange requests.
    requests = {}
    for a in db.accesses[rname]:
        if a.write or not in_g(a.array):
            continue
        st = stmts[a.stmt]
        if a.subs is None:
            if isinstance(st, Call) and enclosing_part(a.stmt) is not None:
                raise NotParallelizable(f"distributed {a.array} passed to a call inside the "
                                        f"distributed loop at {where(a.stmt)}")
            continue
        l = enclosing_part(a.stmt)
        v, c = a.subs[d - 1]
        if l is None or v != stmts[l].var:
            raise NotParallelizable(f"read of distributed {a.array} at {where(a.stmt)} is not "
                                    f"aligned with a distributed loop")
        if c == 0:
            continue
        sub_text = a.sub_text()
        edges = [e for e in db.edges
                 if e.kind == "flow" and e.id not in removed and e.sink.routine == rname
                 and e.sink.stmt == a.stmt and e.sink.array == a.array
                 and tuple(e.sink.subs) == sub_text
                 and e.distance[d - 1] != 0]
        if not edges:
            continue
        anc = parents[a.stmt]
        lpos = anc.index(l)
        k = 0
        for e in edges:
            if e.carrier is not None:
                if e.carrier not in anc or anc.index(e.carrier) >= lpos:
                    raise NotParallelizable(f"dependence {e.describe()} crosses blocks inside "
                                            f"the distributed loop", loop=l, edge=e)
                k = max(k, anc.index(e.carrier) + 1)
            elif e.source.stmt:
                src_anc = parents[e.source.stmt]
                m = 0
                while m < len(anc) and m < len(src_anc) and anc[m] == src_anc[m]:
                    m += 1
                k = max(k, m)
        if k > lpos:
            raise NotParallelizable(f"cannot place halo exchange for {a.array} ahead of the "
                                    f"distributed loop at {where(l)}", loop=l, edge=edges[0])
        at = anc[k]
        other = tuple((i, s) for i, s in enumerate(a.subs) if i != d - 1)
        key = (at, a.array, c, other)
        req = requests.setdefault(key, {"ids": [], "sink": a.stmt})
        req["ids"].extend(e.id for e in edges)

    width = max((abs(k[2]) for k in requests), default=0)
    smallest = min(b - a_ + 1 for a_, b in dist.blocks())
    if width > smallest:
        raise NotParallelizable(f"halo width {width} exceeds the smallest block ({smallest}) "
                                f"with {dist.nranks} ranks")
    for (at, arr, c, other), req in requests.items():
        plan.exchanges.setdefault(at, []).append(
            {"array": arr, "offset": c, "other": other, "edges": sorted(set(req["ids"])),
             "sink": req["sink"]})
    for recs in plan.exchanges.values():
        recs.sort(key=lambda x: (x["offset"] < 0, x["edges"][0]))
    return plan


def _names(stmt):
    for e in stmt_exprs(stmt):
        for x in walk_expr(e):
            if isinstance(x, Name):
                yield x


def _fresh(taken: set, base: str) -> str:
    name = base
    while name in taken:
        name += "_"
    taken.add(name)
    return name


def parallelize(p: Program, dist: DistributionSpec, db: Optional[DefUseDB] = None,
                removed: Iterable[int] = ()) -> tuple:
    """Return ``(spmd_program, ParallelizationDB)``."""
    if db is None or db.program != p:
        db = build_defuse(p)
    removed = set(removed)
    known = {e.id for e in db.edges}
    for eid in sorted(removed):
        if eid not in known:
            raise UnknownEdgeId(f"no dependence edge e{eid}")
    group = _grow_group(db, dist)
    dist = replace(dist, group=tuple(sorted(group)))
    d = dist.dim

    plans = {r: _plan_routine(db, r, dist, group, removed) for r in db.order}
    # A routine needs the block bounds if it clamps, exchanges, or calls one that does.
    for r in reversed(_callee_order(db)):
        pl = plans[r]
        pl.needs_bounds = bool(pl.partitioned or pl.exchanges) or any(
            isinstance(s, Call) and s.name in plans and plans[s.name].needs_bounds
            for s in db.stmts[r].values())

    primary = dist.array.split(".", 1)[1]
    for r in db.order:
        pl = plans[r]
        if not pl.needs_bounds:
            continue
        routine = p.routine(r)
        taken = {x.name for x in routine.decls} | set(routine.params) | set(p.constants)
        mine = [n for n in list(routine.params) + [x.name for x in routine.decls]
                if f"{r}.{n}" in group]
        base = mine[0] if mine else primary
        if routine.is_main:
            pl.lname, pl.hname = _fresh(taken, f"cap_bl{base}"), _fresh(taken, f"cap_bh{base}")
        else:
            pl.lname, pl.hname = _fresh(taken, f"cap_l{base}"), _fresh(taken, f"cap_h{base}")
        pl.taken = taken

    routines = [_rewrite(db, p.routine(r), plans, dist) for r in db.order]
    spmd = Program(routines[0], tuple(routines[1:]), parallel=True, params=p.params)

    exchanges = []
    for r in db.order:
        for at, recs in sorted(plans[r].exchanges.items()):
            for x in recs:
                exchanges.append({"routine": r, "before_stmt": at, "array": x["array"],
                                  "direction": "right" if x["offset"] > 0 else "left",
                                  "count": abs(x["offset"]), "edges": x["edges"]})
    replicated = sorted(f"{r}.{s.name}" for r in db.order for s in db.symbols.arrays(r)
                        if f"{r}.{s.name}" not in group)
    pdb = ParallelizationDB([dist], all_targets(db), sorted(removed), list(db.bindings),
                            replicated, exchanges)
    return spmd, pdb


def _callee_order(db):
    seen, out = set(), []

    def visit(r):
        if r in seen:
            return
        seen.add(r)
        for s in db.stmts[r].values():
            if isinstance(s, Call) and s.name in db.stmts:
                visit(s.name)
        out.append(r)

    for r in db.order:
        visit(r)
    return list(reversed(out))  # callers before callees


def _rewrite(db, routine: Routine, plans, dist) -> Routine:
    r = routine.name
    pl = plans[r]
    stmts = db.stmts[r]
    sid_of = {id(s): sid for sid, s in stmts.items()}
    d = dist.dim
    uses_j = [False]
    jname = None
    if pl.needs_bounds:
        jname = _fresh(pl.taken, "cap_j")

    def exchange_stmts(at):
        out = []
        for x in pl.exchanges.get(at, ()):
            c = x["offset"]
            cnt = abs(c)
            arr = x["array"]
            if c > 0:
                recv_d, send_d, direction = make_affine(pl.hname, 1), Name(pl.lname), "right"
            else:
                recv_d = make_affine(pl.lname, -cnt)
                send_d = make_affine(pl.hname, -(cnt - 1)) if cnt > 1 else Name(pl.hname)
                direction = "left"
            wrap = None
            others = []
            for i, (v, e) in x["other"]:
                loop_sid = _loop_sid_for(db, r, x["sink"], v) if v else None
                if v is not None and loop_sid is not None and \
                        (loop_sid == at or at in db.parents[r][loop_sid]):
                    lp = stmts[loop_sid]
                    wrap = (lp.lo, lp.hi)
                    uses_j[0] = True
                    others.append((i, make_affine(jname, e)))
                else:
                    others.append((i, make_affine(v, e)))

            def ref(dsub):
                subs = [None] * (len(others) + 1)
                subs[d - 1] = dsub
                for i, s in others:
                    subs[i] = s
                return ArrayRef(arr, tuple(subs))

            ex = Exchange(ref(recv_d), ref(send_d), Num(cnt), direction, d)
            if wrap is not None:
                out.append(Do(jname, wrap[0], wrap[1], None, (ex,)))
            else:
                out.append(ex)
        return out

    def walk(body):
        out = []
        for s in body:
            sid = sid_of[id(s)]
            out.extend(exchange_stmts(sid))
            if isinstance(s, Do):
                new_body = walk(s.body)
                if sid in pl.partitioned:
                    s = Do(s.var, Intrinsic("max", (s.lo, Name(pl.lname))),
                           Intrinsic("min", (s.hi, Name(pl.hname))), None, new_body, line=s.line)
                else:
                    s = Do(s.var, s.lo, s.hi, s.step, new_body, line=s.line)
            elif isinstance(s, Call) and s.name in plans and plans[s.name].needs_bounds:
                s = Call(s.name, s.args + (Name(pl.lname), Name(pl.hname)), line=s.line)
            out.append(s)
        return tuple(out)

    body = walk(routine.body)
    params, decls = routine.params, list(routine.decls)
    if pl.needs_bounds:
        extra = [Decl("integer", pl.lname), Decl("integer", pl.hname)]
        if uses_j[0]:
            extra.append(Decl("integer", jname))
        decls = _append_integer_decls(decls, extra)
        if routine.is_main:
            body = (SetupPart(Num(dist.lo), Num(dist.hi), pl.lname, pl.hname),) + body
        else:
            params = params + (pl.lname, pl.hname)
    return Routine(routine.name, params, tuple(decls), body, routine.is_main, routine.line)


def _append_integer_decls(decls, extra):
    """Place new integers after the last existing integer declaration (or at the end)."""
    idx = max((i for i, x in enumerate(decls) if isinstance(x, Decl) and x.type == "integer"
               and not x.dims), default=None)
    if idx is None:
        return decls + extra
    return decls[:idx + 1] + extra + decls[idx + 1:]
