"""Translate a typechecked Program into Python generator functions.

Each routine becomes ``def r_<name>(P, <formals>)``. ``P`` is the process
context: calls and communication go through it as ``yield from`` so the
scheduler regains control there. Program variables are prefixed ``v_`` to keep
them clear of Python names. Arrays are flat column-major lists of floats.

Bounds checks on subscripts indexed by a unit-stride loop variable are hoisted
to loop entry, so a fault is reported before the offending loop starts.
"""

from __future__ import annotations

from ..lang.ast import (ArrayRef, Assign, BinOp, Call, Do, Exchange, Intrinsic, Name, Neg, Num,
                        Receive, Return, Send, SetupPart, affine)


class _Ctx:
    def __init__(self, program, table, routine):
        self.p = program
        self.table = table
        self.r = routine
        self.scope = table.scope(routine.name)
        self.lines = []
        self.tmp = 0
        self.sid = 0

    def fresh(self, base):
        self.tmp += 1
        return f"_{base}{self.tmp}"

    def emit(self, depth, text):
        self.lines.append("    " * depth + text)


def _layout(dims):
    """Strides and the constant part of the flat offset for column-major storage."""
    strides, stride, base = [], 1, 0
    for lo, hi in dims:
        strides.append(stride)
        base -= lo * stride
        stride *= hi - lo + 1
    return strides, base, stride


def _etype(c, e) -> str:
    if isinstance(e, Num):
        return "real" if e.is_real else "integer"
    if isinstance(e, Name):
        return c.scope[e.id].type
    if isinstance(e, ArrayRef):
        return "real"
    if isinstance(e, Neg):
        return _etype(c, e.operand)
    if isinstance(e, BinOp):
        return "real" if "real" in (_etype(c, e.left), _etype(c, e.right)) else "integer"
    if isinstance(e, Intrinsic):
        return "real" if any(_etype(c, a) == "real" for a in e.args) else "integer"
    raise TypeError(e)


def _name(c, n: str) -> str:
    s = c.scope[n]
    if s.kind == "const":
        if s.value is None:  # myrank / nranks
            return f"P.{n}"
        return str(s.value)
    return f"v_{n}"


def _index(c, ref: ArrayRef) -> str:
    dims = c.scope[ref.name].dims
    strides, base, _ = _layout(dims)
    terms, const = [], base
    for sub, st in zip(ref.subs, strides):
        var, off = affine(sub)
        const += off * st
        if var is not None:
            v = _name(c, var)
            terms.append(v if st == 1 else f"{v} * {st}")
    if const or not terms:
        terms.append(str(const))
    return " + ".join(terms).replace("+ -", "- ")


def expr(c, e) -> str:
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Name):
        return _name(c, e.id)
    if isinstance(e, ArrayRef):
        return f"v_{e.name}[{_index(c, e)}]"
    if isinstance(e, Neg):
        return f"(-{expr(c, e.operand)})"
    if isinstance(e, BinOp):
        a, b = expr(c, e.left), expr(c, e.right)
        if e.op == "/" and _etype(c, e) == "integer":
            return f"P.idiv({a}, {b})"
        return f"({a} {e.op} {b})"
    if isinstance(e, Intrinsic):
        args = ", ".join(expr(c, a) for a in e.args)
        if _etype(c, e) == "real":
            return f"float({e.fn}({args}))"
        return f"{e.fn}({args})"
    raise TypeError(e)


def _refs(e):
    if isinstance(e, ArrayRef):
        yield e
    elif isinstance(e, BinOp):
        yield from _refs(e.left)
        yield from _refs(e.right)
    elif isinstance(e, Neg):
        yield from _refs(e.operand)
    elif isinstance(e, Intrinsic):
        for a in e.args:
            yield from _refs(a)


def _checks(c, refs, hoisted_vars, depth, sid):
    """Inline bounds checks for subscripts not covered by a loop-entry check."""
    for ref in refs:
        dims = c.scope[ref.name].dims
        for k, (sub, (lo, hi)) in enumerate(zip(ref.subs, dims), 1):
            var, off = affine(sub)
            if var is None:
                if not lo <= off <= hi:
                    c.emit(depth, f"P.oob({ref.name!r}, {k}, {off}, {lo}, {hi}, {sid})")
            elif var not in hoisted_vars:
                v = _name(c, var)
                val = v if off == 0 else f"{v} + {off}"
                c.emit(depth, f"if not {lo} <= {val} <= {hi}: "
                              f"P.oob({ref.name!r}, {k}, {val}, {lo}, {hi}, {sid})")


def _loop_refs(body):
    """Array refs in a loop body paired with their statement ids (preorder)."""
    out = []
    for s in body:
        if isinstance(s, Assign):
            out.extend(_refs(s.value))
            if isinstance(s.target, ArrayRef):
                out.append(s.target)
        elif isinstance(s, Do):
            out.extend(_loop_refs(s.body))
    return out


def stmt(c, s, depth, hoisted):
    c.sid += 1
    sid = c.sid
    if isinstance(s, Assign):
        refs = list(_refs(s.value))
        if isinstance(s.target, ArrayRef):
            refs.append(s.target)
        _checks(c, refs, hoisted, depth, sid)
        val = expr(c, s.value)
        vt = _etype(c, s.value)
        if isinstance(s.target, ArrayRef):
            if vt == "integer":
                val = f"float({val})"
            c.emit(depth, f"v_{s.target.name}[{_index(c, s.target)}] = {val}")
        else:
            tt = c.scope[s.target.id].type
            if tt == "integer" and vt == "real":
                val = f"int({val})"
            elif tt == "real" and vt == "integer":
                val = f"float({val})"
            c.emit(depth, f"v_{s.target.id} = {val}")
    elif isinstance(s, Do):
        lo, hi = c.fresh("lo"), c.fresh("hi")
        v = f"v_{s.var}"
        c.emit(depth, f"{lo} = {expr(c, s.lo)}")
        c.emit(depth, f"{hi} = {expr(c, s.hi)}")
        unit = s.step is None or affine(s.step) == (None, 1)
        inner = set(hoisted)
        if unit:
            inner.add(s.var)
            seen = set()
            for ref in _loop_refs(s.body):
                dims = c.scope[ref.name].dims
                for k, (sub, (dlo, dhi)) in enumerate(zip(ref.subs, dims), 1):
                    var, off = affine(sub)
                    if var != s.var or (ref.name, k, off) in seen:
                        continue
                    seen.add((ref.name, k, off))
                    c.emit(depth, f"if {lo} <= {hi} and ({lo} + {off} < {dlo} or "
                                  f"{hi} + {off} > {dhi}): P.oob({ref.name!r}, {k}, "
                                  f"{lo} + {off} if {lo} + {off} < {dlo} else {hi} + {off}, "
                                  f"{dlo}, {dhi}, {sid})")
            c.emit(depth, f"for {v} in range({lo}, {hi} + 1):")
        else:
            st = c.fresh("st")
            c.emit(depth, f"{st} = {expr(c, s.step)}")
            c.emit(depth, f"for {v} in P.steps({lo}, {hi}, {st}, {sid}):")
        mark = len(c.lines)
        for b in s.body:
            stmt(c, b, depth + 1, inner)
        if len(c.lines) == mark:
            c.emit(depth + 1, "pass")
        if unit:
            c.emit(depth, f"{v} = max({lo}, {hi} + 1)")
        else:
            c.emit(depth, f"{v} = P.exit_value({lo}, {hi}, {st})")
    elif isinstance(s, Call):
        args = []
        for a in s.args:
            if isinstance(a, Name) and c.scope[a.id].kind == "array":
                args.append(f"v_{a.id}")
            else:
                args.append(expr(c, a))
        c.emit(depth, f"yield from P.call({s.name!r}, ({', '.join(args)}{',' if len(args) == 1 else ''}), {sid})")
    elif isinstance(s, Return):
        c.emit(depth, "return")
    elif isinstance(s, (Send, Receive)):
        buf = s.buf
        dims = c.scope[buf.name].dims
        peer = expr(c, s.dest if isinstance(s, Send) else s.source)
        op = "send" if isinstance(s, Send) else "receive"
        c.emit(depth, f"yield from P.{op}(v_{buf.name}, {buf.name!r}, {_index(c, buf)}, "
                      f"{_subs_tuple(c, buf)}, {dims!r}, {expr(c, s.count)}, {peer}, {sid})")
    elif isinstance(s, Exchange):
        dims = c.scope[s.recv.name].dims
        c.emit(depth, f"yield from P.exchange(v_{s.recv.name}, {s.recv.name!r}, "
                      f"{_subs_tuple(c, s.recv)}, {_subs_tuple(c, s.send)}, {dims!r}, "
                      f"{expr(c, s.count)}, {s.direction!r}, {s.dim}, {sid})")
    elif isinstance(s, SetupPart):
        c.emit(depth, f"v_{s.lower}, v_{s.upper} = P.setuppart({expr(c, s.lo)}, "
                      f"{expr(c, s.hi)}, {sid})")
    else:
        raise TypeError(s)


def _subs_tuple(c, ref):
    items = [expr(c, x) for x in ref.subs]
    return "(" + ", ".join(items) + ("," if len(items) == 1 else "") + ")"


def routine_source(program, table, routine) -> str:
    c = _Ctx(program, table, routine)
    params = ", ".join(["P"] + [f"v_{n}" for n in routine.params])
    c.emit(0, f"def r_{routine.name}({params}):")
    c.emit(1, "if False:")
    c.emit(2, "yield")
    formals = set(routine.params)
    for sym in sorted(c.scope.values(), key=lambda s: s.name):
        if sym.name in formals or sym.kind == "const":
            continue
        if sym.kind == "array":
            _, _, size = _layout(sym.dims)
            c.emit(1, f"v_{sym.name} = [0.0] * {size}")
        else:
            c.emit(1, f"v_{sym.name} = {'0.0' if sym.type == 'real' else '0'}")
    c.emit(1, "try:")
    mark = len(c.lines)
    for s in routine.body:
        stmt(c, s, 2, set())
    if len(c.lines) == mark:
        c.emit(2, "pass")
    c.emit(1, "finally:")
    c.emit(2, "P.leave(locals())")
    return "\n".join(c.lines) + "\n"


def compile_program(program, table) -> dict:
    """Return ``{routine name: generator function}``."""
    src = "\n\n".join(routine_source(program, table, r) for r in program.all_routines)
    ns: dict = {}
    exec(compile(src, f"<relcheck:{program.main.name}>", "exec"), ns)
    return {r.name: ns[f"r_{r.name}"] for r in program.all_routines}


def array_size(dims) -> int:
    return _layout(dims)[2]
