"""Free-form, line-oriented parser for ``.mf`` sources.

One statement per line, ``!`` starts a comment, a trailing ``&`` continues a
statement onto the next line. Keywords and names are case-insensitive and are
normalised to lower case.
"""

from __future__ import annotations

import re

from ..errors import ParseError, SyntaxIssue
from .ast import (ArrayRef, Assign, BinOp, Call, Decl, Do, Exchange, Intrinsic, Name, Neg,
                  Num, Param, Program, Receive, Return, Routine, Send, SetupPart)

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<real>(?:\d+\.\d*|\.\d+)(?:[ed][+-]?\d+)?|\d+[ed][+-]?\d+)
  | (?P<int>\d+)
  | (?P<name>[a-z_][a-z0-9_]*)
  | (?P<op>\*\*|[-+*/(),=:])
""", re.VERBOSE)

_TYPES = ("real", "integer", "double")
_INTRINSICS = ("max", "min")


class _Tok:
    __slots__ = ("kind", "text", "col")

    def __init__(self, kind, text, col):
        self.kind, self.text, self.col = kind, text, col

    def __repr__(self):
        return f"{self.kind}:{self.text}"


class _Fail(Exception):
    def __init__(self, col, msg):
        self.col, self.msg = col, msg


def _tokenize(text: str, lineno: int, errors: list) -> list:
    toks, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            errors.append(SyntaxIssue(lineno, pos + 1, f"unexpected character {text[pos]!r}"))
            return []
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos + 1))
        pos = m.end()
    return toks


def _logical_lines(source: str, errors: list) -> list:
    """Split into ``(lineno, tokens)`` records, joining ``&`` continuations."""
    out, pending, start = [], "", 0
    for n, raw in enumerate(source.splitlines(), 1):
        text = raw.split("!", 1)[0].rstrip().lower()
        cont = text.endswith("&")
        if cont:
            text = text[:-1]
        if not pending:
            start = n
        pending += " " + text if pending else text
        if cont:
            continue
        if pending.strip():
            toks = _tokenize(pending, start, errors)
            if toks:
                out.append((start, toks))
        pending = ""
    if pending.strip():
        toks = _tokenize(pending, start, errors)
        if toks:
            out.append((start, toks))
    return out


class _Line:
    """Cursor over the tokens of one logical line."""

    def __init__(self, lineno, toks, consts):
        self.lineno, self.toks, self.i, self.consts = lineno, toks, 0, consts

    def peek(self, k=0):
        j = self.i + k
        return self.toks[j] if j < len(self.toks) else None

    def at(self, text, k=0):
        t = self.peek(k)
        return t is not None and t.text == text

    def next(self):
        t = self.peek()
        if t is None:
            raise _Fail(self.end_col(), "unexpected end of line")
        self.i += 1
        return t

    def end_col(self):
        return (self.toks[-1].col + len(self.toks[-1].text)) if self.toks else 1

    def expect(self, text):
        t = self.next()
        if t.text != text:
            raise _Fail(t.col, f"expected {text!r}, found {t.text!r}")
        return t

    def name(self):
        t = self.next()
        if t.kind != "name":
            raise _Fail(t.col, f"expected a name, found {t.text!r}")
        return t.text

    def done(self):
        t = self.peek()
        if t is not None:
            raise _Fail(t.col, f"unexpected {t.text!r}")

    # expressions -----------------------------------------------------------

    def expr(self):
        if self.at("-") or self.at("+"):
            sign = self.next().text
            left = self.term()
            if sign == "-":
                left = Neg(left)
        else:
            left = self.term()
        while self.at("+") or self.at("-"):
            op = self.next().text
            left = BinOp(op, left, self.term())
        return left

    def term(self):
        left = self.factor()
        while self.at("*") or self.at("/"):
            op = self.next().text
            left = BinOp(op, left, self.factor())
        return left

    def factor(self):
        t = self.peek()
        if t is not None and t.text == "**":
            raise _Fail(t.col, "exponentiation is not supported")
        if t is not None and t.text == "-":
            self.next()
            return Neg(self.factor())
        return self.primary()

    def primary(self):
        t = self.next()
        if t.kind == "int":
            return Num(int(t.text))
        if t.kind == "real":
            return Num(float(t.text.replace("d", "e")))
        if t.text == "(":
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "name":
            if self.at("("):
                self.next()
                args = [] if self.at(")") else self.arglist()
                self.expect(")")
                if t.text in _INTRINSICS:
                    if len(args) < 2:
                        raise _Fail(t.col, f"{t.text} needs at least two arguments")
                    return Intrinsic(t.text, tuple(args))
                return ArrayRef(t.text, tuple(args))
            return Name(t.text)
        raise _Fail(t.col, f"unexpected {t.text!r} in expression")

    def arglist(self):
        args = [self.expr()]
        while self.at(","):
            self.next()
            args.append(self.expr())
        return args

    def const_int(self):
        """Integer constant expression, evaluated now against known parameters."""
        col = self.peek().col if self.peek() else self.end_col()
        return _const_eval(self.expr(), self.consts, col)

    def ref(self):
        t = self.peek()
        e = self.primary()
        if not isinstance(e, ArrayRef):
            raise _Fail(t.col if t else self.end_col(), "expected an array element")
        return e


def _const_eval(e, consts, col):
    if isinstance(e, Num) and not e.is_real:
        return e.value
    if isinstance(e, Name):
        if e.id not in consts:
            raise _Fail(col, f"{e.id!r} is not a known integer constant")
        return consts[e.id]
    if isinstance(e, Neg):
        return -_const_eval(e.operand, consts, col)
    if isinstance(e, BinOp):
        a, b = _const_eval(e.left, consts, col), _const_eval(e.right, consts, col)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if b == 0:
            raise _Fail(col, "division by zero in constant expression")
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    if isinstance(e, Intrinsic):
        vals = [_const_eval(a, consts, col) for a in e.args]
        return max(vals) if e.fn == "max" else min(vals)
    raise _Fail(col, "expected an integer constant expression")


class _Parser:
    def __init__(self, lines, errors):
        self.lines, self.k, self.errors = lines, 0, errors
        self.globals: dict = {}

    def fail(self, lineno, col, msg):
        self.errors.append(SyntaxIssue(lineno, col, msg))

    def cur(self, consts=None):
        lineno, toks = self.lines[self.k]
        return _Line(lineno, toks, consts if consts is not None else self.globals)

    def program(self):
        params, main, subs, parallel = [], None, [], False
        while self.k < len(self.lines):
            ln = self.cur()
            try:
                first = ln.peek()
                if first.text == "parameter":
                    params.extend(self.parameter(ln, self.globals))
                    self.k += 1
                elif first.text in ("program", "parallel", "subroutine"):
                    r, is_par = self.routine()
                    if r is None:
                        continue
                    if r.is_main:
                        if main is not None:
                            self.fail(r.line, 1, "more than one main program")
                        main, parallel = r, is_par
                    else:
                        subs.append(r)
                else:
                    raise _Fail(first.col, "expected 'program', 'subroutine' or 'parameter'")
            except _Fail as f:
                self.fail(ln.lineno, f.col, f.msg)
                self.k += 1
        if main is None and not self.errors:
            self.fail(self.lines[-1][0] if self.lines else 1, 1, "no main program")
        if self.errors:
            raise ParseError(self.errors)
        return Program(main=main, routines=tuple(subs), parallel=parallel, params=tuple(params))

    def parameter(self, ln, consts):
        ln.next()
        ln.expect("(")
        out = []
        while True:
            name = ln.name()
            ln.expect("=")
            value = ln.const_int()
            consts[name] = value
            out.append(Param(name, value))
            if ln.at(","):
                ln.next()
                continue
            break
        ln.expect(")")
        ln.done()
        return out

    def routine(self):
        ln = self.cur()
        header_line = ln.lineno
        is_par = False
        if ln.at("parallel"):
            ln.next()
            is_par = True
            if not ln.at("program"):
                raise _Fail(ln.peek().col if ln.peek() else ln.end_col(), "expected 'program'")
        kind = ln.next().text
        name = ln.name()
        params = []
        if kind == "subroutine" and ln.at("("):
            ln.next()
            if not ln.at(")"):
                params.append(ln.name())
                while ln.at(","):
                    ln.next()
                    params.append(ln.name())
            ln.expect(")")
        ln.done()
        self.k += 1
        consts = dict(self.globals)
        decls, body = [], []
        seen_exec = False
        stack = [(body, None)]  # (statement list, open Do header or None)
        while True:
            if self.k >= len(self.lines):
                self.fail(header_line, 1, f"{kind} {name!r} is missing 'end'")
                break
            ln = self.cur(consts)
            t0 = ln.peek()
            try:
                if t0.text in ("end", "enddo"):
                    is_enddo = t0.text == "enddo" or ln.at("do", 1)
                    if is_enddo:
                        ln.next()
                        if t0.text == "end":
                            ln.next()
                        ln.done()
                        if len(stack) == 1:
                            raise _Fail(t0.col, "'end do' without matching 'do'")
                        stmts, hdr = stack.pop()
                        var, lo, hi, step, line = hdr
                        stack[-1][0].append(Do(var, lo, hi, step, tuple(stmts), line=line))
                        self.k += 1
                        continue
                    ln.next()
                    if ln.at(kind):
                        ln.next()
                        if ln.peek() is not None:
                            if ln.name() != name:
                                raise _Fail(t0.col, f"end name does not match {name!r}")
                    ln.done()
                    if len(stack) > 1:
                        self.fail(stack[-1][1][4], 1, "'do' without matching 'end do'")
                        while len(stack) > 1:
                            stmts, hdr = stack.pop()
                            var, lo, hi, step, line = hdr
                            stack[-1][0].append(Do(var, lo, hi, step, tuple(stmts), line=line))
                    self.k += 1
                    break
                if t0.text in ("program", "subroutine", "parallel") and not ln.at("=", 1):
                    self.fail(header_line, 1, f"{kind} {name!r} is missing 'end'")
                    break
                if t0.text in _TYPES or t0.text == "parameter":
                    if seen_exec:
                        raise _Fail(t0.col, "declaration after executable statement")
                    if t0.text == "parameter":
                        decls.extend(self.parameter(ln, consts))
                    else:
                        decls.extend(self.declaration(ln))
                    self.k += 1
                    continue
                seen_exec = True
                if t0.text == "do" and not ln.at("=", 1):
                    ln.next()
                    var = ln.name()
                    ln.expect("=")
                    lo = ln.expr()
                    ln.expect(",")
                    hi = ln.expr()
                    step = None
                    if ln.at(","):
                        ln.next()
                        step = ln.expr()
                    ln.done()
                    stack.append(([], (var, lo, hi, step, ln.lineno)))
                    self.k += 1
                    continue
                stack[-1][0].append(self.statement(ln))
                self.k += 1
            except _Fail as f:
                self.fail(ln.lineno, f.col, f.msg)
                self.k += 1
        r = Routine(name=name, params=tuple(params), decls=tuple(decls), body=tuple(body),
                    is_main=(kind == "program"), line=header_line)
        return r, is_par

    def declaration(self, ln):
        t = ln.next().text
        if t == "double":
            if ln.next().text != "precision":
                raise _Fail(ln.toks[ln.i - 1].col, "expected 'precision'")
            typ = "real"
        else:
            typ = t
            if ln.at("*"):
                ln.next()
                ln.next()
        out = []
        while True:
            name = ln.name()
            dims = []
            if ln.at("("):
                ln.next()
                while True:
                    a = ln.const_int()
                    if ln.at(":"):
                        ln.next()
                        dims.append((a, ln.const_int()))
                    else:
                        dims.append((1, a))
                    if ln.at(","):
                        ln.next()
                        continue
                    break
                ln.expect(")")
            out.append(Decl(typ, name, tuple(dims)))
            if ln.at(","):
                ln.next()
                continue
            break
        ln.done()
        return out

    def statement(self, ln):
        t0 = ln.peek()
        line = ln.lineno
        word = t0.text if t0.kind == "name" else None
        is_kw = word is not None and not ln.at("=", 1) and not (
            ln.at("(", 1) and _looks_like_assign(ln))
        if word == "call" and is_kw:
            ln.next()
            name = ln.name()
            args = []
            if ln.at("("):
                ln.next()
                if not ln.at(")"):
                    args = ln.arglist()
                ln.expect(")")
            ln.done()
            return Call(name, tuple(args), line=line)
        if word == "return" and is_kw:
            ln.next()
            ln.done()
            return Return(line=line)
        if word in ("send", "receive") and is_kw:
            ln.next()
            ln.expect("(")
            buf = ln.ref()
            ln.expect(",")
            count = ln.expr()
            ln.expect(",")
            peer = ln.expr()
            ln.expect(")")
            ln.done()
            cls = Send if word == "send" else Receive
            return cls(buf, count, peer, line=line)
        if word == "exchange" and is_kw:
            ln.next()
            ln.expect("(")
            recv = ln.ref()
            ln.expect(",")
            send = ln.ref()
            ln.expect(",")
            count = ln.expr()
            ln.expect(",")
            d = ln.next()
            if d.text not in ("left", "right"):
                raise _Fail(d.col, "exchange direction must be 'left' or 'right'")
            dim = 1
            if ln.at(","):
                ln.next()
                dt = ln.next()
                if dt.kind != "int":
                    raise _Fail(dt.col, "exchange dimension must be an integer literal")
                dim = int(dt.text)
            ln.expect(")")
            ln.done()
            return Exchange(recv, send, count, d.text, dim, line=line)
        if word == "setuppart" and is_kw:
            ln.next()
            ln.expect("(")
            lo = ln.expr()
            ln.expect(",")
            hi = ln.expr()
            ln.expect(",")
            lower = ln.name()
            ln.expect(",")
            upper = ln.name()
            ln.expect(")")
            ln.done()
            return SetupPart(lo, hi, lower, upper, line=line)
        target = ln.primary()
        if not isinstance(target, (Name, ArrayRef)):
            raise _Fail(t0.col, "expected an assignment target")
        ln.expect("=")
        value = ln.expr()
        ln.done()
        return Assign(target, value, line=line)


def _looks_like_assign(ln) -> bool:
    # `send(...) = x` would be an array assignment; find '=' at depth 0 after the parens.
    depth = 0
    for t in ln.toks[1:]:
        if t.text == "(":
            depth += 1
        elif t.text == ")":
            depth -= 1
        elif t.text == "=" and depth == 0:
            return True
    return False


def parse(source: str) -> Program:
    """Parse ``source`` into a :class:`Program`.

    Raises :class:`~relcheck.errors.ParseError` listing every syntax issue
    (line, column, message). Never raises anything else.
    """
    errors: list = []
    try:
        lines = _logical_lines(source, errors)
        return _Parser(lines, errors).program()
    except ParseError:
        raise
    except Exception as exc:  # parsing is total: surface internal failures as syntax errors
        errors.append(SyntaxIssue(0, 0, f"internal parser error: {exc!r}"))
        raise ParseError(errors) from None
