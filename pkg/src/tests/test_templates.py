import json

import pytest

from seal.memory import GlobalMemory
from seal.sexpr import Placeholder, parse, type_check
from seal.templates import (BUILTIN, LEARNED, CompositionError, PlanError,
                            QuestionType, ReplacementPlan, abstract_template,
                            builtin_library, candidate_templates,
                            compose_out_of_template, export_catalog, learned_template,
                            plan_from_json, refine_type, template_by_id, transform)


def test_library_ids_and_types():
    library = builtin_library()
    assert len(library) == 24
    assert [t.id for t in library if t.qtype is QuestionType.VERIFY] == [
        "verify-1", "verify-2", "verify-3"]
    assert template_by_id("simple-1").text == "x1"
    assert template_by_id("compare_and_count-3").text == \
        "(COUNT (compare (GROUP_SUM (GROUP_COUNT x1) (GROUP_COUNT x2)) number))"
    assert template_by_id("count-4").repaired
    assert template_by_id("nope") is None


def test_equality_rows_use_eq():
    for t in builtin_library():
        if t.repaired:
            assert "(EQ " in t.text


@pytest.mark.parametrize("predicted, question, expected", [
    (QuestionType.SIMPLE, "Which river is the longest?", QuestionType.SIMPLE),
    (QuestionType.SIMPLE, "Which city has the most rivers?", QuestionType.OPTIMIZE),
    (QuestionType.COMPARE, "Which cities have at least 3 rivers?",
     QuestionType.COMPARE),
    (QuestionType.COMPARE, "How many cities have at least 3 rivers?",
     QuestionType.COMPARE_AND_COUNT),
    (QuestionType.COUNT, "HOW MANY cities have more than 3 rivers?",
     QuestionType.COMPARE_AND_COUNT),
    (QuestionType.COUNT, "How many rivers cross Paris?", QuestionType.COUNT),
    (QuestionType.COUNT, "How many books have at most 2 authors?",
     QuestionType.COMPARE_AND_COUNT),
])
def test_refine_type(predicted, question, expected):
    assert refine_type(predicted, question) is expected


def test_candidate_templates_with_memory():
    mem = GlobalMemory()
    mem.add(QuestionType.SIMPLE, "Which <E1> or <E2>?",
            parse("(OR (JOIN r a) (JOIN r b))"), "learned-1234abcd")
    mem.add(QuestionType.SIMPLE, "Which <E1>?",
            parse("(JOIN r a)"), "simple-1")
    candidates = candidate_templates(QuestionType.SIMPLE, mem)
    assert [t.source for t in candidates].count(LEARNED) == 0
    mem.add(QuestionType.SIMPLE, "Which <E1>, <E2> or <E3>?",
            parse("(OR (OR (JOIN r a) (JOIN r b)) (JOIN r c))"), "learned-99")
    candidates = candidate_templates(QuestionType.SIMPLE, mem)
    assert candidates[-1].source == LEARNED
    assert candidates[-1].text == "(OR (OR x1 x2) x3)"
    assert all(t.source == BUILTIN for t in candidates[:-1])


def test_abstract_template():
    e = parse("(COUNT (GE (GROUP_COUNT (JOIN (R p) q)) 3))")
    assert abstract_template(e) == parse("(COUNT (compare (GROUP_COUNT x1) number))",
                                         template=True)
    same = parse("(ARGMAX (GROUP_SUM (GROUP_COUNT (JOIN p a)) "
                 "(GROUP_COUNT (JOIN p a))))")
    assert abstract_template(same) == parse(
        "(optimize (GROUP_SUM (GROUP_COUNT x1) (GROUP_COUNT x1)))", template=True)


def test_transform():
    t = template_by_id("compare-3")
    plan = ReplacementPlan({"x1": parse("(JOIN (R p) a)"),
                            "x2": parse("(JOIN (R q) a)")},
                           {"number": 840}, {"compare": "GE"})
    result = transform(t, plan)
    assert result == parse("(GE (GROUP_SUM (GROUP_COUNT (JOIN (R p) a)) "
                           "(GROUP_COUNT (JOIN (R q) a))) 840)")
    type_check(result)


def test_transform_plan_errors():
    t = template_by_id("compare-1")
    core = parse("(JOIN p a)")
    with pytest.raises(PlanError, match=r"missing \['number'\]"):
        transform(t, ReplacementPlan({"x1": core}, {}, {"compare": "GE"}))
    with pytest.raises(PlanError, match="compare must be one of"):
        transform(t, ReplacementPlan({"x1": core}, {"number": 3}, {"compare": "BIG"}))
    with pytest.raises(PlanError, match="non negative integer"):
        transform(t, ReplacementPlan({"x1": core}, {"number": -1}, {"compare": "GE"}))
    with pytest.raises(PlanError, match="extra"):
        transform(t, ReplacementPlan({"x1": core, "x2": core}, {"number": 3},
                                     {"compare": "GE"}))


def test_transform_composition_error():
    t = template_by_id("count-1")
    with pytest.raises(CompositionError, match="ill typed"):
        transform(t, ReplacementPlan({"x1": parse("(IS_TRUE a p b)")}))


def test_compose_out_of_template():
    cores = [parse("(JOIN p a)"), parse("(JOIN p b)"), parse("(JOIN p c)")]
    body = compose_out_of_template(cores, "Who founded A, B or C?")
    assert body == parse("(OR (OR x1 x2) x3)", template=True)
    assert compose_out_of_template(cores[:2], "Who founded A, B or C?") is None
    assert compose_out_of_template(cores, "Who founded A or B?") is None
    assert body.args[1] == Placeholder("x3")


def test_learned_template_ids_are_stable():
    body = parse("(OR (OR x1 x2) x3)", template=True)
    first = learned_template(QuestionType.SIMPLE, body)
    second = learned_template(QuestionType.SIMPLE, body)
    assert first.id == second.id
    assert first.id.startswith("learned-")
    assert learned_template(QuestionType.COUNT, body).id != first.id


def test_export_catalog():
    rows = json.loads(export_catalog())
    assert rows[0] == {"id": "simple-1", "type": "simple", "body": "x1",
                       "source": "builtin", "repaired": False}
    assert len(rows) == 24


def test_plan_from_json():
    plan = plan_from_json({"variables": {"x1": "c1"}, "constants": {"number": 2}},
                          lambda text: parse("(JOIN p a)") if text == "c1" else None)
    assert plan.variables == {"x1": parse("(JOIN p a)")}
    assert plan.constants == {"number": 2}
    with pytest.raises(PlanError, match="must be a JSON object"):
        plan_from_json(["x1"], str)
    with pytest.raises(PlanError, match="must be objects"):
        plan_from_json({"variables": ["c1"]}, str)
