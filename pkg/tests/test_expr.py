import math

import pytest
from hypothesis import given, settings, strategies as st

from bondsim.expr import (
    ExpressionError,
    evaluate,
    free_names,
    normalize_source,
    parse_expr,
    parse_value,
    to_source,
    tokenize,
)

ENV = {"t": 0.7, "a": -1.3, "b": 2.5}


# Reference: random trees rendered to text alongside their value, computed
# directly with the math module (no shared code with the package parser).
class Undefined(Exception):
    pass


def _leaf():
    return st.one_of(
        st.floats(0, 100, allow_nan=False).map(lambda v: (repr(v), v)),
        st.integers(0, 50).map(lambda v: (str(v), float(v))),
        st.sampled_from(sorted(ENV)).map(lambda n: (n, ENV[n])),
    )


def _combine(children):
    def binop(op):
        def make(pair):
            (ls, lv), (rs, rv) = pair
            if op == "/" and rv == 0.0:
                raise Undefined
            v = {"+": lv + rv, "-": lv - rv, "*": lv * rv, "/": lv / rv if rv else 0.0}[op]
            return f"({ls} {op} {rs})", v
        return make

    def call1(name, fn):
        def make(c):
            s, v = c
            if name == "sqrt" and v < 0:
                raise Undefined
            try:
                return f"{name}({s})", fn(v)
            except OverflowError:
                raise Undefined
        return make

    def call2(name, fn):
        def make(pair):
            (ls, lv), (rs, rv) = pair
            return f"{name}({ls}, {rs})", fn(lv, rv)
        return make

    pairs = st.tuples(children, children)
    return st.one_of(
        *[pairs.map(binop(op)) for op in "+-*/"],
        children.map(lambda c: (f"-({c[0]})", -c[1])),
        *[children.map(call1(n, f)) for n, f in
          [("sin", math.sin), ("cos", math.cos), ("abs", abs), ("sqrt", math.sqrt), ("exp", math.exp)]],
        pairs.map(call2("min", min)),
        pairs.map(call2("max", max)),
    )


def _safe(strategy):
    @st.composite
    def draw(d):
        try:
            return d(strategy)
        except Undefined:
            return ("1", 1.0)

    return draw()


expressions = st.recursive(_leaf(), lambda c: _safe(_combine(c)), max_leaves=12)


@settings(max_examples=400)
@given(_safe(expressions))
def test_matches_reference_interpreter(case):
    text, expected = case
    got = evaluate(parse_expr(text), ENV)
    if math.isinf(expected) or math.isnan(expected):
        return
    assert abs(got - expected) <= 1e-12 * max(1.0, abs(expected))


@settings(max_examples=200)
@given(_safe(expressions))
def test_to_source_round_trips(case):
    tree = parse_expr(case[0])
    assert parse_expr(to_source(tree)) == tree


def test_precedence_and_associativity():
    assert evaluate(parse_expr("2 + 3 * 4"), {}) == 14
    assert evaluate(parse_expr("8 / 4 / 2"), {}) == 1
    assert evaluate(parse_expr("10 - 3 - 2"), {}) == 5
    assert evaluate(parse_expr("-2 * -3"), {}) == 6
    assert evaluate(parse_expr("pow(2, 10)"), {}) == 1024


@pytest.mark.parametrize("text,message", [
    ("1 / (t - t)", "division by zero"),
    ("sqrt(-1 - t)", "sqrt of negative"),
    ("pow(0 * t, -1)", "pow domain"),
])
def test_runtime_errors_carry_location(text, message):
    with pytest.raises(ExpressionError) as info:
        evaluate(parse_expr(text), {"t": 1.0})
    assert message in info.value.message
    assert info.value.line == 1 and info.value.col > 0


@pytest.mark.parametrize("text", ["1 +", "sin(1, 2)", "foo(1)", "(1", "1 2", "min(1)", "3 $ 4"])
def test_syntax_errors(text):
    with pytest.raises(ExpressionError) as info:
        parse_expr(text)
    assert info.value.line >= 1


def test_undefined_name():
    with pytest.raises(ExpressionError, match="undefined name"):
        evaluate(parse_expr("z + 1"), {})


def test_source_calls_need_a_resolver():
    with pytest.raises(ExpressionError):
        evaluate(parse_expr("effort(b1)"), {})
    assert evaluate(parse_expr("2 * flow(b1)"), {}, lambda call: 3.0) == 6.0


def test_free_names_and_normalization():
    assert free_names(parse_expr("a * sin(t) + effort(b3)")) == {"a", "t"}
    assert normalize_source("  a*(b +  c) ") == normalize_source("a * ( b + c )")


def test_matrix_values():
    v = parse_value("[[1, t], [0, 2]]")
    assert len(v) == 2 and len(v[0]) == 2


def test_tokenizer_positions():
    toks = tokenize("a +\n  b")
    b = next(t for t in toks if t.text == "b")
    assert (b.line, b.col) == (2, 3)
