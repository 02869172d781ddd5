import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from config import MAX_NESTING_DEPTH
from seal.sexpr import (CORE_PATTERNS, EntityRef, Function, NumberLiteral, Placeholder,
                        RelationRef, SExprSyntaxError, SExprTypeError, ValueType,
                        is_core, match_core_pattern, parse, placeholders, print_sexpr,
                        tokenize, type_check)
from seal.synthetic import random_core, random_expr, random_graph


def test_parse_classifies_leaves():
    e = parse("(AND (JOIN (R P22) Q1) (JOIN P31 Q5))")
    first = e.args[0]
    assert first == Function("JOIN", (Function("R", (RelationRef("P22"),)),
                                      EntityRef("Q1")))
    assert e.args[1].args[0] == RelationRef("P31")
    assert parse("(VALUES 1 2)").args == (NumberLiteral(1), NumberLiteral(2))


@pytest.mark.parametrize("e", [
    Function("JOIN", (RelationRef("P1"), EntityRef("42"))),
    Function("JOIN", (Function("R", (RelationRef("7"),)),
                      Function("VALUES", (EntityRef("1"), EntityRef("2"))))),
    Function("IS_TRUE", (EntityRef("10"), RelationRef("P1"), EntityRef("007"))),
    Function("GE", (Function("GROUP_COUNT", (Function("JOIN", (
        RelationRef("P1"), EntityRef("5"))),)), NumberLiteral(3))),
])
def test_digit_ids_round_trip_by_position(e):
    assert parse(print_sexpr(e)) == e


def test_digit_tokens_are_numbers_in_value_slots():
    e = parse("(LT (GROUP_COUNT (JOIN P1 (VALUES 3 4))) 2)")
    assert e.args[1] == NumberLiteral(2)
    assert e.args[0].args[0].args[1].args == (EntityRef("3"), EntityRef("4"))
    assert parse("(COUNT (VALUES 3 4))").args[0].args == (NumberLiteral(3),
                                                          NumberLiteral(4))
    assert type_check(parse("(DISTINCT (VALUES 5))")) == ValueType.VALUE_SET


def test_parse_template_placeholders():
    body = parse("(COUNT (compare (GROUP_COUNT x1) number))", template=True)
    assert placeholders(body) == ["compare", "x1", "number"]
    assert isinstance(body.args[0].args[1], Placeholder)
    with pytest.raises(SExprSyntaxError, match="unknown function 'compare'"):
        parse("(compare (GROUP_COUNT Q1) 3)")


def test_print_is_canonical():
    text = "(JOIN   P1\n\t( VALUES Q1  Q2 ) )"
    assert print_sexpr(parse(text)) == "(JOIN P1 (VALUES Q1 Q2))"


@pytest.mark.parametrize("text, message, offset", [
    ("(JOIN P1 Q1", "unclosed '('", 0),
    ("(JOIN P1 Q1))", "unexpected ')'", 12),
    ("(FOO P1 Q1)", "unknown function 'FOO'", 1),
    ("(JOIN P1)", "JOIN expects 2 argument", 0),
    ("(AND (JOIN P1 Q1))", "AND expects at least 2", 0),
    ("()", "empty argument list", 0),
    ("(JOIN P1 Q1) Q2", "trailing input", 13),
    ("", "empty input", 0),
])
def test_syntax_errors(text, message, offset):
    with pytest.raises(SExprSyntaxError, match=message) as info:
        parse(text)
    assert info.value.offset == offset


def test_offsets_are_bytes():
    assert tokenize("(JOIN é Q1)") == [("(", 0), ("JOIN", 1), ("é", 6), ("Q1", 9),
                                        (")", 11)]


def test_nesting_guard():
    deep = "(DISTINCT " * (MAX_NESTING_DEPTH + 1) + "Q1" + ")" * (MAX_NESTING_DEPTH + 1)
    with pytest.raises(SExprSyntaxError, match="nesting deeper"):
        parse(deep)


@pytest.mark.parametrize("text, expected", [
    ("(JOIN P1 Q1)", ValueType.ENTITY_SET),
    ("(R P1)", ValueType.PAIR_SET),
    ("(VALUES 3 4)", ValueType.VALUE_SET),
    ("(IS_TRUE Q1 P1 Q2)", ValueType.BOOLEAN),
    ("(ALL (IS_TRUE Q1 P1 Q2) (IS_TRUE Q2 P1 Q3))", ValueType.BOOLEAN),
    ("(COUNT (JOIN P1 Q1))", ValueType.INTEGER),
    ("(GROUP_COUNT (JOIN P1 Q1))", ValueType.GROUPED_COUNTS),
    ("(GE (GROUP_COUNT (JOIN P1 Q1)) 3)", ValueType.ENTITY_SET),
    ("(ARGMAX (GROUP_SUM (GROUP_COUNT (JOIN P1 Q1)) (GROUP_COUNT (JOIN P2 Q1))))",
     ValueType.ENTITY_SET),
])
def test_type_check(text, expected):
    assert type_check(parse(text)) == expected


def test_type_errors_carry_path():
    with pytest.raises(SExprTypeError, match="COUNT argument 1") as info:
        type_check(parse("(COUNT (IS_TRUE Q1 P1 Q2))"))
    assert info.value.path == (0,)
    with pytest.raises(SExprTypeError, match="at 1/0"):
        type_check(parse("(AND (JOIN P1 Q1) (COUNT (IS_TRUE Q1 P1 Q2)))"))
    with pytest.raises(SExprTypeError, match="all entities or all numbers"):
        type_check(Function("VALUES", (EntityRef("Q1"), NumberLiteral(2))))


def test_type_check_placeholder_types():
    body = parse("(GE x1 number)", template=True)
    assert type_check(body, {"x1": ValueType.GROUPED_COUNTS}) == ValueType.ENTITY_SET
    with pytest.raises(SExprTypeError):
        type_check(body, {"x1": ValueType.BOOLEAN})


def test_core_patterns_match_lowest_id():
    assert match_core_pattern(parse("(JOIN P1 Q1)")) == 2
    assert match_core_pattern(parse("(JOIN (R P1) Q1)")) == 3
    e = parse("(AND (JOIN P1 (VALUES Q1 Q2 Q3)) (JOIN P2 Q4))")
    assert match_core_pattern(e) == 5
    assert match_core_pattern(parse("(COUNT (JOIN P1 Q1))")) is None
    assert is_core(parse("(AND (JOIN P1 Q1) (JOIN P2 Q2))"))
    assert not is_core(parse("(COUNT (JOIN P1 Q1))"))


@pytest.mark.parametrize("pattern_id", sorted(CORE_PATTERNS))
def test_generated_cores_match_their_pattern(pattern_id):
    rng = random.Random(pattern_id)
    g = random_graph(rng)
    for _ in range(20):
        core = random_core(rng, g, pattern_id)
        assert match_core_pattern(core) == pattern_id
        assert is_core(core)


@pytest.mark.slow
def test_round_trip_generated_expressions():
    rng = random.Random(7)
    g = random_graph(rng)
    for _ in range(10_000):
        e = random_expr(rng, g, depth=rng.randint(0, 3))
        text = print_sexpr(e)
        assert parse(text) == e
        assert print_sexpr(parse(text)) == text
        type_check(e)


_GRAPH = random_graph(random.Random(0), n_entities=30)


@given(seed=st.integers(0, 2**32 - 1), depth=st.integers(0, 3))
@settings(max_examples=200, deadline=None)
def test_round_trip_property(seed, depth):
    e = random_expr(random.Random(seed), _GRAPH, depth)
    text = print_sexpr(e)
    assert parse(text) == e
    assert tokenize(text) == tokenize(print_sexpr(parse(text)))
