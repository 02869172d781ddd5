import pytest
from unittest.mock import MagicMock

from seal.calibration import CalibratedCore
from seal.clients import ScriptedGateway
from seal.gateway import (LlmFormatError, PromptBundle, ask, complete_question,
                          draft_cores, extract_block, predict_type, select_plan)
from seal.memory import MemoryRecord
from seal.sexpr import parse
from seal.templates import (LEARNED, PlanError, QuestionType, candidate_templates,
                            template_by_id)


def scripted(task, response):
    return ScriptedGateway(rules=[{"task": task, "match": [], "response": response}])


def test_extract_block():
    assert extract_block("sure\n```type\ncount\n```\n", "type") == "count"
    with pytest.raises(LlmFormatError, match="no ```plan block"):
        extract_block("```type\ncount\n```", "plan")


def test_bundle_render():
    bundle = PromptBundle("core_gen", "Do it.", ("ex 1", "ex 2"), "Question: q")
    assert bundle.render() == ("### TASK\nDo it.\n### EXAMPLES\nex 1\n\nex 2\n"
                               "### INPUT\nQuestion: q\n")
    assert "### FORMAT ERROR\nbad" in bundle.with_error("bad").render()


def test_ask_reprompts_once():
    llm = MagicMock()
    llm.complete.side_effect = ["no block", "```type\nverify\n```"]
    bundle = PromptBundle("type_pred", "Classify.", (), "Question: q")
    assert ask(llm, bundle, lambda r: extract_block(r, "type")) == "verify"
    second_prompt = llm.complete.call_args.args[1]
    assert "### FORMAT ERROR" in second_prompt
    llm.complete.side_effect = ["no block", "still none"]
    with pytest.raises(LlmFormatError):
        ask(llm, bundle, lambda r: extract_block(r, "type"))


def test_complete_question():
    llm = ScriptedGateway(rules=[{
        "task": "coref", "match": ["[ENTITIES] Francesco", "USER: Who is that one?"],
        "response": "```question\nWho is\n Francesco?\n```"}])
    assert complete_question(["USER: q", "SYSTEM: Francesco"], ["Francesco"],
                             "Who is that one?", llm) == "Who is Francesco?"


def test_draft_cores():
    llm = ScriptedGateway(rules=[{
        "task": "core_gen", "match": ["Question: Who?\n", "[ENTITIES] A; B"],
        "response": "```cores\n(JOIN p A)\n\n(JOIN p B)\n```"}])
    assert draft_cores("Who?", (), llm, ["A", "B"]) == ["(JOIN p A)", "(JOIN p B)"]
    with pytest.raises(LlmFormatError, match="empty ```cores block"):
        draft_cores("Who?", (), scripted("core_gen", "```cores\n\n```"))


def test_predict_type():
    llm = scripted("type_pred", "```type\nCompare_and_count\n```")
    assert predict_type("How many?", None, llm) is QuestionType.COMPARE_AND_COUNT
    with pytest.raises(LlmFormatError, match="unknown question type"):
        predict_type("How many?", None, scripted("type_pred", "```type\nlist\n```"))


@pytest.fixture
def cores():
    return [CalibratedCore(parse("(JOIN (R p) a)")),
            CalibratedCore(parse("(JOIN q b)"))]


def test_select_plan_listed_template(cores):
    llm = scripted("plan_gen", '```plan\n{"template": "simple-2", '
                               '"variables": {"x1": "c1", "x2": "(JOIN  q b)"}}\n```')
    templates = candidate_templates(QuestionType.SIMPLE)
    template, plan = select_plan("Who?", templates, cores, (), llm,
                                 ["(JOIN (R p) a)", "(JOIN q b)"])
    assert template.id == "simple-2"
    assert plan.variables == {"x1": cores[0], "x2": cores[1]}


def test_select_plan_by_draft_and_template_text(cores):
    llm = scripted("plan_gen", '```plan\n{"template": "(OR x1 x2)", '
                               '"variables": {"x1": "(join (R p) a_draft)", '
                               '"x2": "c2"}}\n```')
    template, plan = select_plan("Who?", candidate_templates(QuestionType.SIMPLE),
                                 cores, (), llm, ["(join (R p) a_draft)", "(JOIN q b)"])
    assert template.id == "simple-2"
    assert plan.variables["x1"] is cores[0]


def test_select_plan_out_of_list_template(cores):
    llm = scripted("plan_gen", '```plan\n{"template": "(COUNT (OR x1 x2))", '
                               '"variables": {"x1": "c1", "x2": "c2"}}\n```')
    template, _ = select_plan("How many?", candidate_templates(QuestionType.COUNT),
                              cores, (), llm)
    assert template.source == LEARNED
    assert template.id.startswith("learned-")
    assert template.qtype is QuestionType.COUNT


def test_select_plan_errors(cores):
    templates = [template_by_id("simple-1")]
    llm = scripted("plan_gen", '```plan\n{"template": "simple-1", '
                               '"variables": {"x1": "c9"}}\n```')
    with pytest.raises(PlanError, match="unknown core 'c9'"):
        select_plan("Who?", templates, cores, (), llm)
    llm = scripted("plan_gen", '```plan\n{"template": "(COUNT (IS_TRUE x1 p x2)"}\n```')
    with pytest.raises(PlanError, match="neither listed nor parseable"):
        select_plan("Who?", templates, cores, (), llm)
    with pytest.raises(PlanError, match="no candidate templates"):
        select_plan("Who?", [], cores, (), llm)
    llm = scripted("plan_gen", "```plan\n[1, 2]\n```")
    with pytest.raises(LlmFormatError, match="'template' string"):
        select_plan("Who?", templates, cores, (), llm)


def test_select_plan_shows_exemplars_per_template(cores):
    records = [MemoryRecord(QuestionType.SIMPLE, f"Who founded <E{i}>?",
                            parse(f"(JOIN p e{i})"), "simple-1", i) for i in range(6)]
    llm = MagicMock()
    llm.complete.return_value = ('```plan\n{"template": "simple-1", '
                                 '"variables": {"x1": "c1"}}\n```')
    select_plan("Who?", candidate_templates(QuestionType.SIMPLE), cores, records, llm)
    prompt = llm.complete.call_args.args[1]
    assert prompt.count("Template: x1") == 4
    assert "[c2] (JOIN q b)" in prompt
    assert "[simple-6] (EQ (GROUP_SUM" in prompt
