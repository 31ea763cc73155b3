"""Canonical source emitter; ``parse(pretty_print(p)) == p``."""

from __future__ import annotations

from .ast import (ArrayRef, Assign, BinOp, Call, Decl, Do, Exchange, Intrinsic, Name, Neg,
                  Num, Param, Receive, Return, Send, SetupPart)

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}
INDENT = "  "


def expr_str(e, prec: int = 0) -> str:
    if isinstance(e, Num):
        return repr(e.value) if e.is_real else str(e.value)
    if isinstance(e, Name):
        return e.id
    if isinstance(e, ArrayRef):
        return f"{e.name}({', '.join(expr_str(s) for s in e.subs)})"
    if isinstance(e, Intrinsic):
        return f"{e.fn}({', '.join(expr_str(a) for a in e.args)})"
    if isinstance(e, Neg):
        inner = expr_str(e.operand, 3 if isinstance(e.operand, BinOp) else 0)
        s = "-" + inner
        return f"({s})" if prec > 0 else s
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        s = f"{expr_str(e.left, p)} {e.op} {expr_str(e.right, p + 1)}"
        return f"({s})" if p < prec else s
    raise TypeError(f"not an expression: {e!r}")


def _decl_lines(decls) -> list:
    out, i = [], 0
    decls = list(decls)
    while i < len(decls):
        d = decls[i]
        if isinstance(d, Param):
            group = []
            while i < len(decls) and isinstance(decls[i], Param):
                group.append(f"{decls[i].name} = {decls[i].value}")
                i += 1
            out.append(f"parameter ({', '.join(group)})")
            continue
        group = []
        while i < len(decls) and isinstance(decls[i], Decl) and decls[i].type == d.type:
            x = decls[i]
            if x.dims:
                dims = ", ".join(f"{lo}:{hi}" for lo, hi in x.dims)
                group.append(f"{x.name}({dims})")
            else:
                group.append(x.name)
            i += 1
        out.append(f"{d.type} {', '.join(group)}")
    return out


def stmt_lines(s, depth: int = 0) -> list:
    pad = INDENT * depth
    if isinstance(s, Assign):
        return [f"{pad}{expr_str(s.target)} = {expr_str(s.value)}"]
    if isinstance(s, Do):
        head = f"{pad}do {s.var} = {expr_str(s.lo)}, {expr_str(s.hi)}"
        if s.step is not None:
            head += f", {expr_str(s.step)}"
        lines = [head]
        for b in s.body:
            lines.extend(stmt_lines(b, depth + 1))
        lines.append(f"{pad}end do")
        return lines
    if isinstance(s, Call):
        args = ", ".join(expr_str(a) for a in s.args)
        return [f"{pad}call {s.name}({args})"]
    if isinstance(s, Return):
        return [f"{pad}return"]
    if isinstance(s, Send):
        return [f"{pad}send({expr_str(s.buf)}, {expr_str(s.count)}, {expr_str(s.dest)})"]
    if isinstance(s, Receive):
        return [f"{pad}receive({expr_str(s.buf)}, {expr_str(s.count)}, {expr_str(s.source)})"]
    if isinstance(s, Exchange):
        extra = f", {s.dim}" if s.dim != 1 else ""
        return [f"{pad}exchange({expr_str(s.recv)}, {expr_str(s.send)}, "
                f"{expr_str(s.count)}, {s.direction}{extra})"]
    if isinstance(s, SetupPart):
        return [f"{pad}setuppart({expr_str(s.lo)}, {expr_str(s.hi)}, {s.lower}, {s.upper})"]
    raise TypeError(f"not a statement: {s!r}")


def routine_lines(r, parallel: bool = False) -> list:
    if r.is_main:
        head = ("parallel program " if parallel else "program ") + r.name
    else:
        head = f"subroutine {r.name}({', '.join(r.params)})"
    lines = [head]
    lines += [INDENT + d for d in _decl_lines(r.decls)]
    for s in r.body:
        lines.extend(stmt_lines(s, 1))
    lines.append("end")
    return lines


def pretty_print(p) -> str:
    """Emit canonical source for a Program."""
    chunks = []
    if p.params:
        chunks.append(_decl_lines(p.params))
    chunks.append(routine_lines(p.main, p.parallel))
    for r in p.routines:
        chunks.append(routine_lines(r))
    return "\n\n".join("\n".join(c) for c in chunks) + "\n"


def routine_line_numbers(p) -> dict:
    """1-based line of each routine header in ``pretty_print(p)``."""
    out, line = {}, 1
    if p.params:
        line += len(_decl_lines(p.params)) + 1
    for r in p.all_routines:
        out[r.name] = line
        line += len(routine_lines(r, p.parallel)) + 1
    return out
