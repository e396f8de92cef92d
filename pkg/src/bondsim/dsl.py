"""Text format for bond graphs (``.bg``) and DOT rendering.

Example::

    model rl
    param L = 1
    element SE u { value = 1 }
    element 1 j
    element R r { k = 1 }
    element I coil { k = L, init = 0, out = [momentum, power] }
    bond b1 u -> j
    bond b2 j -> r
    bond b3 j -> coil causal head
    probe b3 flow

Statements end at a newline outside brackets; ``#`` starts a comment.
Kinds prefixed with ``M`` (``MTF``, ``MSE`` ...) take an expression
parameter evaluated at run time; all other parameters must fold to
constants over previously declared ``param`` values.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Bond,
    BondGraph,
    Element,
    ElementKind,
    Modulated,
    Param,
    Parameter,
    Probe,
    Signal,
    Stroke,
)
from .expr import ExpressionError, Token, _Parser, evaluate, to_source, tokenize

__all__ = ["ParseError", "SyntaxIssue", "parse", "load", "emit", "emit_dot", "kind_keyword"]

KIND_KEYWORDS: dict[str, ElementKind] = {k.keyword: k for k in ElementKind}
KIND_KEYWORDS.update({"DF": ElementKind.SOURCE_EFFORT, "DE": ElementKind.SOURCE_FLOW})


@dataclass(frozen=True)
class SyntaxIssue:
    line: int
    col: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.col}: {self.message}"


class ParseError(ValueError):
    def __init__(self, issues: Sequence[SyntaxIssue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


class _StatementError(Exception):
    def __init__(self, tok: Token, message: str):
        self.issue = SyntaxIssue(tok.line, tok.col, message)


def kind_keyword(element: Element) -> str:
    """Keyword as written in the text format, e.g. ``MTF`` for a modulated TF."""
    mod = element.parameter is not None and element.parameter.modulated
    return ("M" if mod else "") + element.kind.keyword


def _resolve_kind(text: str) -> tuple[ElementKind, bool] | None:
    if text in KIND_KEYWORDS:
        return KIND_KEYWORDS[text], False
    if text.startswith("M") and text[1:] in KIND_KEYWORDS:
        kind = KIND_KEYWORDS[text[1:]]
        if kind.modulable:
            return kind, True
    return None


def _split_statements(tokens: list[Token]) -> list[list[Token]]:
    stmts, cur, depth = [], [], 0
    for t in tokens:
        if t.kind == "EOF":
            break
        if t.kind == "OP" and t.text in "([{":
            depth += 1
        elif t.kind == "OP" and t.text in ")]}":
            depth = max(depth - 1, 0)
        if t.kind == "NEWLINE":
            if depth == 0:
                if cur:
                    stmts.append(cur)
                cur = []
            continue
        cur.append(t)
    if cur:
        stmts.append(cur)
    return stmts


class _Reader:
    def __init__(self, stmt: list[Token]):
        self.toks = stmt
        self.pos = 0

    @property
    def done(self) -> bool:
        return self.pos >= len(self.toks)

    def peek(self) -> Token | None:
        return None if self.done else self.toks[self.pos]

    def last(self) -> Token:
        return self.toks[min(self.pos, len(self.toks) - 1)]

    def next(self, what: str) -> Token:
        if self.done:
            raise _StatementError(self.last(), f"expected {what} at end of statement")
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def name(self, what: str) -> Token:
        t = self.next(what)
        if t.kind != "NAME" or "." in t.text:
            raise _StatementError(t, f"expected {what}, found {t.text!r}")
        return t

    def op(self, text: str) -> Token:
        t = self.next(repr(text))
        if t.kind != "OP" or t.text != text:
            raise _StatementError(t, f"expected {text!r}, found {t.text!r}")
        return t

    def span_until(self, stops: set[str]) -> list[Token]:
        """Tokens up to a depth-0 stop operator (not consumed)."""
        out, depth = [], 0
        while not self.done:
            t = self.toks[self.pos]
            if t.kind == "OP":
                if depth == 0 and t.text in stops:
                    break
                if t.text in "([{":
                    depth += 1
                elif t.text in ")]}":
                    depth -= 1
            out.append(t)
            self.pos += 1
        return out

    def end(self) -> None:
        if not self.done:
            t = self.toks[self.pos]
            raise _StatementError(t, f"unexpected {t.text!r}")


def _parse_span(span: list[Token], what: str, anchor: Token):
    if not span:
        raise _StatementError(anchor, f"missing value for {what}")
    eof = Token("EOF", "", span[-1].line, span[-1].col + len(span[-1].text))
    p = _Parser(span + [eof])
    try:
        node = p.value()
    except ExpressionError as exc:
        raise _StatementError(Token("OP", "", exc.line or anchor.line, exc.col or anchor.col), exc.message)
    if p.tok.kind != "EOF":
        raise _StatementError(p.tok, f"unexpected {p.tok.text!r} in {what}")
    return node


def _span_source(span: list[Token]) -> str:
    return " ".join(t.text for t in span)


class _GraphParser:
    def __init__(self):
        self.name: str | None = None
        self.params: list[Param] = []
        self.elements: list[Element] = []
        self.bonds: list[Bond] = []
        self.signals: list[Signal] = []
        self.probes: list[Probe] = []
        self.issues: list[SyntaxIssue] = []
        self.ids: set[str] = set()
        self.bond_ids: set[str] = set()

    @property
    def env(self) -> dict[str, float]:
        return {p.name: p.value for p in self.params}

    def fold(self, node, anchor: Token):
        """Evaluate a (nested list of) constant expression(s) over params."""
        if isinstance(node, list):
            return [self.fold(n, anchor) for n in node]
        try:
            return evaluate(node, self.env)
        except ExpressionError as exc:
            line, col = (exc.line, exc.col) if exc.line else (anchor.line, anchor.col)
            hint = ""
            if "undefined name" in exc.message:
                hint = " (constant parameters may only use declared params; use an M-prefixed kind to modulate)"
            raise _StatementError(Token("OP", "", line, col), exc.message + hint)

    def statement(self, stmt: list[Token]) -> None:
        head = stmt[0]
        r = _Reader(stmt)
        r.next("keyword")
        if head.kind != "NAME":
            raise _StatementError(head, f"expected a statement keyword, found {head.text!r}")
        if self.name is None and head.text != "model":
            raise _StatementError(head, "file must start with 'model <name>'")
        handler = getattr(self, "st_" + head.text, None)
        if handler is None:
            raise _StatementError(head, f"unknown statement {head.text!r}")
        handler(r, head)

    def st_model(self, r: _Reader, head: Token) -> None:
        if self.name is not None:
            raise _StatementError(head, "duplicate 'model' statement")
        self.name = r.name("model name").text
        r.end()

    def st_param(self, r: _Reader, head: Token) -> None:
        name = r.name("param name")
        r.op("=")
        span = r.span_until(set())
        value = self.fold(_parse_span(span, "param", name), name)
        if isinstance(value, list):
            raise _StatementError(name, "param values must be scalars")
        if name.text in self.env or name.text == "t":
            raise _StatementError(name, f"duplicate param {name.text!r}")
        self.params.append(Param(name.text, float(value)))

    def st_signal(self, r: _Reader, head: Token) -> None:
        name = r.name("signal name")
        r.op("=")
        span = r.span_until(set())
        node = _parse_span(span, "signal", name)
        if isinstance(node, list):
            raise _StatementError(name, "signals are scalar expressions")
        self.signals.append(Signal(name.text, Modulated(_span_source(span))))

    def st_probe(self, r: _Reader, head: Token) -> None:
        target = r.name("probe target")
        q = r.name("probe quantity")
        r.end()
        self.probes.append(Probe(target.text, q.text))

    def st_element(self, r: _Reader, head: Token) -> None:
        kt = r.next("element kind")
        resolved = _resolve_kind(kt.text)
        if resolved is None:
            raise _StatementError(kt, f"unknown element kind {kt.text!r}")
        kind, modulated = resolved
        eid = r.name("element id")
        if eid.text in self.ids:
            raise _StatementError(eid, f"duplicate element id {eid.text!r}")
        attrs = self.attrs(r)
        r.end()
        key = kind.param_key
        parameter = None
        unit = attrs.pop("unit", (None, ""))[1]
        for k in list(attrs):
            if k not in ("value", "k", "init", "causality", "out", "label"):
                raise _StatementError(attrs[k][0], f"unknown attribute {k!r}")
            if k in ("value", "k") and k != key:
                raise _StatementError(attrs[k][0], f"{kind.keyword} takes {key or 'no'} parameter, not {k!r}")
        if key in attrs:
            tok, span = attrs.pop(key)
            node = _parse_span(span, key, tok)
            if modulated:
                parameter = Parameter(Modulated(_span_source(span)), unit)
            else:
                parameter = Parameter.of(self.fold(node, tok), unit)
        elif modulated:
            raise _StatementError(kt, f"{kt.text} requires '{key}'")
        initial = None
        if "init" in attrs:
            tok, span = attrs.pop("init")
            val = self.fold(_parse_span(span, "init", tok), tok)
            initial = tuple(float(v) for v in np.atleast_1d(np.asarray(val, dtype=float)).ravel())
        causality = self.word(attrs.pop("causality", None))
        label = self.word(attrs.pop("label", None))
        outputs: tuple[str, ...] = ()
        if "out" in attrs:
            tok, span = attrs.pop("out")
            texts = [t.text for t in span]
            inner = span[1:-1]
            ok = (
                len(span) >= 3
                and texts[0] == "["
                and texts[-1] == "]"
                and len(inner) % 2 == 1
                and all(t.kind == "NAME" for t in inner[::2])
                and all(t.text == "," for t in inner[1::2])
            )
            if not ok:
                raise _StatementError(tok, "out expects a list like [momentum, power]")
            outputs = tuple(t.text for t in inner[::2])
        self.ids.add(eid.text)
        self.elements.append(Element(eid.text, kind, parameter, initial, causality, outputs, label))

    def word(self, entry) -> str | None:
        if entry is None:
            return None
        tok, span = entry
        if len(span) != 1 or span[0].kind not in ("NAME", "NUM", "STR"):
            raise _StatementError(tok, "expected a single word")
        return span[0].text

    def attrs(self, r: _Reader) -> dict[str, tuple[Token, list[Token]]]:
        out: dict[str, tuple[Token, list[Token]]] = {}
        t = r.peek()
        if t is None or not (t.kind == "OP" and t.text == "{"):
            return out
        r.op("{")
        t = r.peek()
        if t is not None and t.kind == "OP" and t.text == "}":
            r.op("}")
            return out
        while True:
            key = r.name("attribute name")
            r.op("=")
            span = r.span_until({",", "}"})
            if not span:
                raise _StatementError(key, f"missing value for {key.text!r}")
            if key.text in out:
                raise _StatementError(key, f"duplicate attribute {key.text!r}")
            if key.text == "unit":
                # free-form text; a quoted string is taken verbatim
                text = span[0].text if len(span) == 1 and span[0].kind == "STR" else _span_source(span)
                out["unit"] = (key, text)
            else:
                out[key.text] = (key, span)
            sep = r.next("',' or '}'")
            if sep.text == "}":
                break
            if sep.text != ",":
                raise _StatementError(sep, "expected ',' or '}'")
        return out

    def st_bond(self, r: _Reader, head: Token) -> None:
        bid = r.name("bond id")
        if bid.text in self.bond_ids:
            raise _StatementError(bid, f"duplicate bond id {bid.text!r}")
        tail = self.port_ref(r.next("bond tail"))
        r.op("->")
        hd = self.port_ref(r.next("bond head"))
        dim, stroke, label = 1, Stroke.UNASSIGNED, None
        while not r.done:
            t = r.next("bond option")
            if t.kind == "NAME" and t.text == "dim":
                n = r.next("dimension")
                if n.kind != "NUM" or not n.text.isdigit() or int(n.text) < 1:
                    raise _StatementError(n, "dim expects a positive integer")
                dim = int(n.text)
            elif t.kind == "NAME" and t.text == "causal":
                w = r.name("head or tail")
                if w.text not in ("head", "tail"):
                    raise _StatementError(w, "causal expects 'head' or 'tail'")
                stroke = Stroke(w.text)
            elif t.kind == "OP" and t.text == "{":
                r.pos -= 1
                attrs = self.attrs(r)
                for k in attrs:
                    if k != "label":
                        raise _StatementError(attrs[k][0], f"unknown bond attribute {k!r}")
                label = self.word(attrs.get("label"))
            else:
                raise _StatementError(t, f"unknown bond option {t.text!r}")
        self.bond_ids.add(bid.text)
        self.bonds.append(Bond(bid.text, tail[0], hd[0], dim, stroke, tail[1], hd[1], label))

    def port_ref(self, t: Token) -> tuple[str, int | None]:
        if t.kind != "NAME":
            raise _StatementError(t, f"expected element reference, found {t.text!r}")
        if "." in t.text:
            name, port = t.text.split(".")
            if int(port) < 1:
                raise _StatementError(t, "port indices start at 1")
            return name, int(port)
        return t.text, None


def parse(text: str | bytes) -> BondGraph:
    """Parse ``.bg`` text into a BondGraph.

    Raises ParseError listing every syntax problem with line and column.
    Structural rules (junction endpoints, parameter shapes ...) are left to
    :func:`bondsim.core.validate`.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError([SyntaxIssue(1, exc.start + 1, "input is not valid UTF-8")]) from None
    try:
        tokens = tokenize(text)
    except ExpressionError as exc:
        raise ParseError([SyntaxIssue(exc.line, exc.col, exc.message)]) from None
    gp = _GraphParser()
    for stmt in _split_statements(tokens):
        try:
            gp.statement(stmt)
        except _StatementError as exc:
            gp.issues.append(exc.issue)
        except (ExpressionError, ValueError) as exc:
            gp.issues.append(SyntaxIssue(stmt[0].line, stmt[0].col, str(exc)))
    if gp.name is None and not gp.issues:
        gp.issues.append(SyntaxIssue(1, 1, "file must start with 'model <name>'"))
    if gp.issues:
        raise ParseError(gp.issues)
    return BondGraph(
        gp.name, tuple(gp.elements), tuple(gp.bonds), tuple(gp.params), tuple(gp.signals), tuple(gp.probes)
    )


def load(path: str | Path) -> BondGraph:
    return parse(Path(path).read_text(encoding="utf-8"))


# -------------------------------------------------------------------- emit


def _num(x: float) -> str:
    return repr(float(x))


_BARE_WORD = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def _word(text: str) -> str:
    """A label/unit as a bare word when possible, else a quoted string."""
    if _BARE_WORD.fullmatch(text):
        return text
    if "\n" in text:
        raise ValueError(f"labels cannot contain newlines: {text!r}")
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _const(value) -> str:
    if isinstance(value, tuple):
        return "[" + ", ".join(_const(v) for v in value) + "]"
    return _num(value)


def emit(graph: BondGraph) -> str:
    """Canonical text; ``parse(emit(g)) == g`` for every parseable graph."""
    lines = [f"model {graph.name}"]
    for p in graph.params:
        lines.append(f"param {p.name} = {_num(p.value)}")
    for e in graph.elements:
        attrs = []
        if e.parameter is not None:
            val = e.parameter.value
            text = val.source if isinstance(val, Modulated) else _const(val)
            attrs.append(f"{e.kind.param_key} = {text}")
            if e.parameter.unit:
                attrs.append(f"unit = {_word(e.parameter.unit)}")
        if e.initial is not None:
            init = _num(e.initial[0]) if len(e.initial) == 1 else _const(e.initial)
            attrs.append(f"init = {init}")
        if e.causality:
            attrs.append(f"causality = {e.causality}")
        if e.outputs:
            attrs.append("out = [" + ", ".join(e.outputs) + "]")
        if e.label:
            attrs.append(f"label = {_word(e.label)}")
        block = " { " + ", ".join(attrs) + " }" if attrs else ""
        lines.append(f"element {kind_keyword(e)} {e.id}{block}")
    for b in graph.bonds:
        tail = b.tail + (f".{b.tail_port}" if b.tail_port else "")
        head = b.head + (f".{b.head_port}" if b.head_port else "")
        s = f"bond {b.id} {tail} -> {head}"
        if b.dim != 1:
            s += f" dim {b.dim}"
        if b.stroke is not Stroke.UNASSIGNED:
            s += f" causal {b.stroke.value}"
        if b.label:
            s += f" {{ label = {_word(b.label)} }}"
        lines.append(s)
    for s in graph.signals:
        lines.append(f"signal {s.name} = {s.expr.source}")
    for p in graph.probes:
        lines.append(f"probe {p.target} {p.quantity}")
    return "\n".join(lines) + "\n"


def _dot_id(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_dot(graph: BondGraph, assignment=None) -> str:
    """DOT rendering: edges follow half arrows, ``|H``/``|T`` mark strokes."""
    lines = [f"digraph {_dot_id(graph.name)} {{", "  rankdir=LR;", "  node [shape=plaintext];"]
    for e in graph.elements:
        label = e.kind.keyword if e.kind.is_junction else f"{kind_keyword(e)}:{e.id}"
        lines.append(f"  {_dot_id(e.id)} [label={_dot_id(label)}];")
    for b in graph.bonds:
        text = b.id
        if assignment is not None:
            stroke = assignment.strokes.get(b.id, Stroke.UNASSIGNED)
            if stroke is Stroke.HEAD:
                text += " |H"
            elif stroke is Stroke.TAIL:
                text += " |T"
        lines.append(f"  {_dot_id(b.tail)} -> {_dot_id(b.head)} [label={_dot_id(text)}, arrowhead=lhalf];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def expression_text(node) -> str:
    return to_source(node)
