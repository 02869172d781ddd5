import json
import os
import random

import pytest

from seal.clients import ScriptedGateway
from seal.evaluator import brute_force_eval, evaluate
from seal.kg_store import load_graph
from seal.sexpr import is_core, match_core_pattern, type_check
from seal.synthetic import (SyntheticSpec, build_dialogs, gen_synthetic,
                            random_core, random_expr, random_graph,
                            scripted_rules, surface)
from seal.templates import QuestionType


def test_random_graph_is_seeded():
    a = random_graph(random.Random(7), n_entities=30, n_relations=3)
    b = random_graph(random.Random(7), n_entities=30, n_relations=3)
    assert a == b
    assert a != random_graph(random.Random(8), n_entities=30, n_relations=3)


def test_random_graph_shape():
    g = random_graph(random.Random(1), n_entities=30, n_relations=3)
    people = [e for e in g.entities if e.startswith("Q1")]
    assert len(people) == 30
    assert all(g.objects_of(e, "instance_of") for e in people)
    assert {r for r in g.relations} == {"instance_of", "P10", "P11", "P12"}
    assert g.label_of("P10") == "mentor"


@pytest.mark.parametrize("pattern_id", range(1, 13))
def test_random_core_patterns(pattern_id):
    rng = random.Random(pattern_id)
    g = random_graph(rng)
    e = random_core(rng, g, pattern_id)
    assert is_core(e)
    assert match_core_pattern(e) <= pattern_id
    type_check(e)
    result = evaluate(e, g)
    assert not result.is_empty()
    if pattern_id == 1:
        assert result.value is True


def test_random_expr_type_checks():
    rng = random.Random(3)
    g = random_graph(rng, n_entities=20)
    for _ in range(50):
        e = random_expr(rng, g)
        type_check(e)
        assert brute_force_eval(e, g) == evaluate(e, g)


def test_surface_uses_labels():
    rng = random.Random(2)
    g = random_graph(rng)
    e = random_core(rng, g, 4)
    text = surface(e, g)
    assert "instance_of" in text
    assert not any(token.startswith("Q") and token[1:].isdigit()
                   for token in text.replace("(", " ").replace(")", " ").split())


def test_spec_validation():
    with pytest.raises(ValueError, match="n_dialogs"):
        SyntheticSpec(n_dialogs=0)
    with pytest.raises(ValueError, match="n_relations is limited"):
        SyntheticSpec(n_relations=40)
    with pytest.raises(ValueError, match="type_mix"):
        SyntheticSpec(type_mix={QuestionType.SIMPLE: 0})


def test_build_dialogs_honours_mix():
    rng = random.Random(4)
    g = random_graph(rng)
    spec = SyntheticSpec(n_dialogs=4, turns_per_dialog=3,
                         type_mix={QuestionType.VERIFY: 1, QuestionType.COUNT: 1})
    dialogs = build_dialogs(rng, g, spec)
    assert [len(d) for d in dialogs] == [3, 3, 3, 3]
    kinds = [t.qtype for d in dialogs for t in d]
    assert kinds.count(QuestionType.VERIFY) == 6
    assert kinds.count(QuestionType.COUNT) == 6
    for turn in (t for d in dialogs for t in d):
        assert brute_force_eval(turn.gold_sexpr, g) == turn.gold
        assert not turn.gold.is_empty()


def test_gated_dialogs_carry_decoys():
    rng = random.Random(5)
    g = random_graph(rng)
    dialogs = build_dialogs(rng, g, SyntheticSpec(n_dialogs=2, gated=True))
    turns = [t for d in dialogs for t in d]
    assert {t.qtype for t in turns} <= {QuestionType.SIMPLE, QuestionType.COUNT}
    assert all(t.decoy is not None for t in turns)
    rules = scripted_rules(dialogs, g)
    plans = [r for r in rules if r["task"] == "plan_gen"]
    assert all("fallback" in r for r in plans)


def test_scripted_rules_answer_every_turn():
    rng = random.Random(6)
    g = random_graph(rng)
    dialogs = build_dialogs(rng, g, SyntheticSpec(n_dialogs=2, turns_per_dialog=2))
    rules = scripted_rules(dialogs, g)
    ScriptedGateway(rules=rules)
    tasks = [r["task"] for r in rules]
    assert tasks.count("core_gen") == 4
    assert tasks.count("type_pred") == 4
    assert tasks.count("plan_gen") == 4


def test_gen_synthetic_files(tmp_path):
    spec = SyntheticSpec(n_entities=30, n_relations=3, n_dialogs=2,
                         turns_per_dialog=2)
    triples, labels, dialogs = gen_synthetic(11, spec, str(tmp_path))
    assert os.path.exists(tmp_path / "gateway" / "rules.json")
    g = load_graph(triples, labels)
    assert len(g.entities) >= 30
    with open(dialogs) as f:
        document = json.load(f)
    assert len(document["dialogs"]) == 2
    turn = document["dialogs"][0]["turns"][0]
    assert set(turn) == {"q", "gold", "qtype", "gold_sexpr"}


def test_gen_synthetic_is_byte_stable(tmp_path):
    spec = SyntheticSpec(n_entities=30, n_relations=3, n_dialogs=2)
    first = gen_synthetic(9, spec, str(tmp_path / "a"))
    second = gen_synthetic(9, spec, str(tmp_path / "b"))
    for a, b in zip(first, second):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()
    rules = [str(tmp_path / d / "gateway" / "rules.json") for d in ("a", "b")]
    with open(rules[0], "rb") as fa, open(rules[1], "rb") as fb:
        assert fa.read() == fb.read()
