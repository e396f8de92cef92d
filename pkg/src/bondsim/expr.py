"""Modulation expressions: tokenizer, parser, tree evaluator.

Expressions are the small arithmetic language used for modulated
parameters, signal definitions and time-function input bindings::

    (x + l_m/mu_r) / (mu0*A)
    U * min(1, t/0.01)
    effort(b5)

Operators are ``+ - * /`` and unary minus; functions are
``sin cos exp sqrt abs min max pow``.  Signal-source functions
(``effort``, ``flow``, ``momentum``, ``displacement``) take bond or
element identifiers and are resolved by the compiler, not here.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence, Union

__all__ = [
    "ExpressionError",
    "Token",
    "tokenize",
    "Num",
    "Name",
    "Unary",
    "Binary",
    "Call",
    "Expr",
    "parse_expr",
    "parse_value",
    "evaluate",
    "free_names",
    "to_source",
    "normalize_source",
    "FUNCTIONS",
    "SOURCE_FUNCTIONS",
]


class ExpressionError(ValueError):
    """Raised for malformed expressions and runtime evaluation faults."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        where = f" (line {line}, column {col})" if line else ""
        super().__init__(message + where)


# arity; min/max are binary
FUNCTIONS: dict[str, int] = {
    "sin": 1,
    "cos": 1,
    "exp": 1,
    "sqrt": 1,
    "abs": 1,
    "min": 2,
    "max": 2,
    "pow": 2,
}

SOURCE_FUNCTIONS = ("effort", "flow", "momentum", "displacement")


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, NAME, STR, OP, NEWLINE, EOF
    text: str
    line: int
    col: int


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*(?:\.[0-9]+)?)
  | (?P<str>"(?:[^"\\\n]|\\[^\n])*")
  | (?P<op>->|[-+*/()\[\]{},=])
    """,
    re.VERBOSE,
)


def tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, line_start, pos = 1, 0, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise ExpressionError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        if kind == "newline":
            tokens.append(Token("NEWLINE", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind == "num":
            tokens.append(Token("NUM", m.group(), line, col))
        elif kind == "name":
            tokens.append(Token("NAME", m.group(), line, col))
        elif kind == "str":
            tokens.append(Token("STR", re.sub(r"\\(.)", r"\1", m.group()[1:-1]), line, col))
        elif kind == "op":
            tokens.append(Token("OP", m.group(), line, col))
        pos = m.end()
    tokens.append(Token("EOF", "", line, pos - line_start + 1))
    return tokens


@dataclass(frozen=True)
class Num:
    value: float
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Name:
    id: str
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...]
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


Expr = Union[Num, Name, Unary, Binary, Call]
# nested lists of expressions, used for vector and matrix parameters
Value = Union[Expr, list]


class _Parser:
    def __init__(self, tokens: Sequence[Token], pos: int = 0):
        self.tokens = tokens
        self.pos = pos

    @property
    def tok(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        t = self.tokens[self.pos]
        if t.kind != "EOF":
            self.pos += 1
        return t

    def expect(self, text: str) -> Token:
        t = self.tok
        if t.kind != "OP" or t.text != text:
            raise ExpressionError(f"expected {text!r}, found {t.text or t.kind!r}", t.line, t.col)
        return self.advance()

    def value(self) -> Value:
        t = self.tok
        if t.kind == "OP" and t.text == "[":
            self.advance()
            items = [self.value()]
            while self.tok.kind == "OP" and self.tok.text == ",":
                self.advance()
                items.append(self.value())
            self.expect("]")
            return items
        return self.expr()

    def expr(self) -> Expr:
        node = self.term()
        while self.tok.kind == "OP" and self.tok.text in "+-":
            op = self.advance()
            node = Binary(op.text, node, self.term(), op.line, op.col)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.tok.kind == "OP" and self.tok.text in "*/":
            op = self.advance()
            node = Binary(op.text, node, self.unary(), op.line, op.col)
        return node

    def unary(self) -> Expr:
        t = self.tok
        if t.kind == "OP" and t.text in "+-":
            self.advance()
            operand = self.unary()
            return operand if t.text == "+" else Unary("-", operand, t.line, t.col)
        return self.primary()

    def primary(self) -> Expr:
        t = self.tok
        if t.kind == "NUM":
            self.advance()
            return Num(float(t.text), t.line, t.col)
        if t.kind == "NAME":
            self.advance()
            if self.tok.kind == "OP" and self.tok.text == "(":
                self.advance()
                args: list[Expr] = []
                if not (self.tok.kind == "OP" and self.tok.text == ")"):
                    args.append(self.expr())
                    while self.tok.kind == "OP" and self.tok.text == ",":
                        self.advance()
                        args.append(self.expr())
                self.expect(")")
                _check_call(t, args)
                return Call(t.text, tuple(args), t.line, t.col)
            return Name(t.text, t.line, t.col)
        if t.kind == "OP" and t.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected {t.text or 'end of input'!r}", t.line, t.col)


def _check_call(t: Token, args: list) -> None:
    if t.text in FUNCTIONS:
        if len(args) != FUNCTIONS[t.text]:
            raise ExpressionError(
                f"{t.text}() takes {FUNCTIONS[t.text]} argument(s), got {len(args)}", t.line, t.col
            )
    elif t.text in SOURCE_FUNCTIONS:
        if not 1 <= len(args) <= 2 or not isinstance(args[0], Name):
            raise ExpressionError(f"{t.text}() takes an identifier and an optional index", t.line, t.col)
        if len(args) == 2 and not (isinstance(args[1], Num) and args[1].value >= 1 and args[1].value.is_integer()):
            raise ExpressionError(f"{t.text}() index must be a positive integer", t.line, t.col)
    else:
        raise ExpressionError(f"unknown function {t.text!r}", t.line, t.col)


def _parse_whole(text: str, rule: str):
    tokens = [t for t in tokenize(text) if t.kind != "NEWLINE"]
    p = _Parser(tokens)
    node = getattr(p, rule)()
    if p.tok.kind != "EOF":
        raise ExpressionError(f"unexpected {p.tok.text!r}", p.tok.line, p.tok.col)
    return node


def parse_expr(text: str) -> Expr:
    """Parse a scalar expression from source text."""
    return _parse_whole(text, "expr")


def parse_value(text: str) -> Value:
    """Parse an expression or a bracketed (nested) list of expressions."""
    return _parse_whole(text, "value")


def normalize_source(text: str) -> str:
    """Whitespace-normalized token string, used as the canonical form."""
    return " ".join(t.text for t in tokenize(text) if t.kind not in ("NEWLINE", "EOF"))


def free_names(node: Value) -> set[str]:
    """Names referenced by an expression, excluding source-function arguments."""
    out: set[str] = set()

    def walk(n):
        if isinstance(n, list):
            for item in n:
                walk(item)
        elif isinstance(n, Name):
            out.add(n.id)
        elif isinstance(n, Unary):
            walk(n.operand)
        elif isinstance(n, Binary):
            walk(n.left)
            walk(n.right)
        elif isinstance(n, Call) and n.func not in SOURCE_FUNCTIONS:
            for a in n.args:
                walk(a)

    walk(node)
    return out


def source_calls(node: Value) -> Iterator[Call]:
    """Yield every signal-source call (``effort(b1)`` etc.) in the tree."""
    if isinstance(node, list):
        for item in node:
            yield from source_calls(item)
    elif isinstance(node, Unary):
        yield from source_calls(node.operand)
    elif isinstance(node, Binary):
        yield from source_calls(node.left)
        yield from source_calls(node.right)
    elif isinstance(node, Call):
        if node.func in SOURCE_FUNCTIONS:
            yield node
        else:
            for a in node.args:
                yield from source_calls(a)


def apply_binary(op: str, a: float, b: float, where: Expr) -> float:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0.0:
        raise ExpressionError("division by zero", where.line, where.col)
    return a / b


def apply_function(name: str, args: Sequence[float], where: Expr) -> float:
    if name == "sqrt":
        if args[0] < 0.0:
            raise ExpressionError("sqrt of negative value", where.line, where.col)
        return math.sqrt(args[0])
    if name == "pow":
        try:
            r = math.pow(args[0], args[1])
        except (ValueError, ZeroDivisionError):
            raise ExpressionError("pow domain error", where.line, where.col) from None
        except OverflowError:
            return math.inf
        return r
    if name == "exp":
        try:
            return math.exp(args[0])
        except OverflowError:
            return math.inf
    if name == "sin":
        return math.sin(args[0])
    if name == "cos":
        return math.cos(args[0])
    if name == "abs":
        return abs(args[0])
    if name == "min":
        return min(args[0], args[1])
    return max(args[0], args[1])


def evaluate(
    node: Expr,
    env: Mapping[str, float],
    sources: Callable[[Call], float] | None = None,
) -> float:
    """Evaluate a scalar expression tree.

    ``env`` maps names (signals, params, ``t``) to values.  ``sources``
    resolves signal-source calls; without it they are an error.
    """
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Name):
        try:
            return float(env[node.id])
        except KeyError:
            raise ExpressionError(f"undefined name {node.id!r}", node.line, node.col) from None
    if isinstance(node, Unary):
        return -evaluate(node.operand, env, sources)
    if isinstance(node, Binary):
        return apply_binary(node.op, evaluate(node.left, env, sources), evaluate(node.right, env, sources), node)
    if isinstance(node, Call):
        if node.func in SOURCE_FUNCTIONS:
            if sources is None:
                raise ExpressionError(f"{node.func}() is only allowed in signal definitions", node.line, node.col)
            return float(sources(node))
        return apply_function(node.func, [evaluate(a, env, sources) for a in node.args], node)
    raise TypeError(f"not an expression node: {node!r}")


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _fmt_num(x: float) -> str:
    if x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def to_source(node: Value) -> str:
    """Render a tree as source text with minimal parentheses."""
    if isinstance(node, list):
        return "[" + ", ".join(to_source(v) for v in node) + "]"

    def render(n, parent_prec=0, right_side=False):
        if isinstance(n, Num):
            return _fmt_num(n.value)
        if isinstance(n, Name):
            return n.id
        if isinstance(n, Call):
            return f"{n.func}(" + ", ".join(render(a) for a in n.args) + ")"
        if isinstance(n, Unary):
            s = "-" + render(n.operand, 3)
            return f"({s})" if parent_prec >= 3 else s
        prec = _PREC[n.op]
        s = f"{render(n.left, prec)} {n.op} {render(n.right, prec, True)}"
        if prec < parent_prec or (prec == parent_prec and right_side):
            return f"({s})"
        return s

    return render(node)
