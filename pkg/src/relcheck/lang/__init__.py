"""The mini array language: parse, typecheck, pretty-print."""

from .ast import (ArrayRef, Assign, BinOp, Call, Decl, Do, Exchange, Intrinsic, Name, Neg, Num,
                  Param, Program, Receive, Return, Routine, Send, SetupPart, affine, walk_stmts)
from .parser import parse
from .printer import expr_str, pretty_print
from .typecheck import Symbol, SymbolTable, typecheck

__all__ = [
    "parse", "typecheck", "pretty_print", "expr_str", "Symbol", "SymbolTable",
    "Program", "Routine", "Decl", "Param", "Assign", "Do", "Call", "Return", "Send", "Receive",
    "Exchange", "SetupPart", "Num", "Name", "ArrayRef", "BinOp", "Neg", "Intrinsic",
    "affine", "walk_stmts",
]
