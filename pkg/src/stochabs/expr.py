"""Small arithmetic expression language for kernel definitions.

Expressions are parsed by a recursive-descent parser into an immutable AST
and evaluated either on floats or elementwise on numpy arrays.  Grammar::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

``^`` is right-associative and binds tighter than unary minus, so ``-2^2``
is ``-4`` and ``2^3^2`` is ``512``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Union

import numpy as np

FUNCTIONS = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "abs": np.abs,
}
CONSTANTS = {"pi": np.pi, "e": np.e}

VARIABLE_RE = re.compile(r"(s|sb|u)[1-9][0-9]*\Z")


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ParseError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r}", offset)
        self.name = name


class EvalDomainError(ExprError):
    def __init__(self, message: str, node: "Expr"):
        super().__init__(f"{message} in {to_text(node)!r} (offset {node.pos})")
        self.node = node


# AST nodes. ``pos`` is the byte offset of the node in the source text.

@dataclass(frozen=True)
class Num:
    value: float
    pos: int = 0


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = 0


@dataclass(frozen=True)
class Const:
    name: str
    pos: int = 0


@dataclass(frozen=True)
class Neg:
    operand: "Expr"
    pos: int = 0


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = 0


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expr"
    pos: int = 0


Expr = Union[Num, Var, Const, Neg, BinOp, Call]

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), pos))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, allowed: set[str] | None):
        self.tokens = _tokenize(text)
        self.i = 0
        self.allowed = allowed

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            found = "end of input" if kind == "end" else repr(text)
            raise ParseError(f"expected {value!r}, found {found}", pos)

    def parse(self) -> Expr:
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {text!r}", pos)
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.unary(), pos)
        return node

    def unary(self) -> Expr:
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary(), pos)
        if kind == "op" and text == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return BinOp("^", base, self.unary(), pos)
        return base

    def atom(self) -> Expr:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text), pos)
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(text, arg, pos)
            if text in CONSTANTS:
                return Const(text, pos)
            if self.allowed is None:
                if VARIABLE_RE.match(text):
                    return Var(text, pos)
            elif text in self.allowed:
                return Var(text, pos)
            raise UnknownIdentifierError(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ParseError(f"unexpected {found}", pos)


def parse_expression(text: str, allowed_vars: Iterable[str] | None = None) -> Expr:
    """Parse ``text`` into an AST.

    If ``allowed_vars`` is None, any name of the form ``s<i>``, ``sb<i>`` or
    ``u<i>`` is accepted as a variable; arity is then checked by the caller.
    """
    allowed = None if allowed_vars is None else set(allowed_vars)
    return _Parser(text, allowed).parse()


def free_variables(expr: Expr) -> set[str]:
    if isinstance(expr, Var):
        return {expr.name}
    if isinstance(expr, (Num, Const)):
        return set()
    if isinstance(expr, Neg):
        return free_variables(expr.operand)
    if isinstance(expr, Call):
        return free_variables(expr.arg)
    return free_variables(expr.left) | free_variables(expr.right)


def _fmt_num(value: float) -> str:
    text = repr(float(value))
    if text in ("inf", "nan"):
        raise ExprError(f"literal {text} cannot be printed")
    return text


def to_text(expr: Expr) -> str:
    """Print ``expr`` fully parenthesized; ``parse_expression`` inverts it."""
    if isinstance(expr, Num):
        return _fmt_num(expr.value)
    if isinstance(expr, (Var, Const)):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{to_text(expr.operand)})"
    if isinstance(expr, Call):
        return f"{expr.func}({to_text(expr.arg)})"
    return f"({to_text(expr.left)}{expr.op}{to_text(expr.right)})"


Value = Union[float, np.ndarray]


def _evaluate(expr: Expr, env: Mapping[str, Value]) -> Value:
    if isinstance(expr, Num):
        return expr.value
    if isinstance(expr, Var):
        try:
            return env[expr.name]
        except KeyError:
            raise ExprError(f"unbound variable {expr.name!r} at offset {expr.pos}") from None
    if isinstance(expr, Const):
        return CONSTANTS[expr.name]
    if isinstance(expr, Neg):
        return -_evaluate(expr.operand, env)
    if isinstance(expr, Call):
        arg = _evaluate(expr.arg, env)
        if expr.func == "log" and np.any(np.asarray(arg) <= 0):
            raise EvalDomainError("log of non-positive value", expr)
        if expr.func == "sqrt" and np.any(np.asarray(arg) < 0):
            raise EvalDomainError("sqrt of negative value", expr)
        return FUNCTIONS[expr.func](arg)
    left = _evaluate(expr.left, env)
    right = _evaluate(expr.right, env)
    if expr.op == "+":
        return left + right
    if expr.op == "-":
        return left - right
    if expr.op == "*":
        return left * right
    if expr.op == "/":
        if np.any(np.asarray(right) == 0):
            raise EvalDomainError("division by zero", expr)
        return left / right
    out = np.power(np.asarray(left, dtype=float), right)
    if not np.all(np.isfinite(out)) and np.all(np.isfinite(left)) and np.all(np.isfinite(right)):
        raise EvalDomainError("invalid power", expr)
    return out


def eval_ast(expr: Expr, bindings: Mapping[str, Value]) -> Value:
    """Evaluate ``expr``; scalar bindings give a float, array bindings broadcast."""
    with np.errstate(all="ignore"):
        out = _evaluate(expr, bindings)
    if np.ndim(out) == 0:
        return float(out)
    return out
