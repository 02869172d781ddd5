import json
import random
import threading

import pytest
from unittest.mock import MagicMock

from seal.agent import ValidationVerdict
from seal.clients import LlmGatewayError, ScriptedGateway
from seal.evaluator import EvalResult
from seal.memory import (DialogState, DialogTurn, GlobalMemory, MemoryRecord,
                         MemoryRejectionError, MemoryRestoreError, abstract_question,
                         persist, record_success, resolve_question, restore,
                         retrieve_exemplars)
from seal.sexpr import parse
from seal.templates import QuestionType

PASSED = ValidationVerdict(True, True, True)
FAILED = ValidationVerdict(True, True, False, "empty_result")


@pytest.fixture
def state():
    s = DialogState()
    turn = DialogTurn("Who are the children of Ludovico II?")
    s.add_turn(turn, EvalResult.entity_set({"Q2", "Q1"}),
               {"Q1": "Francesco", "Q2": "Michele"}.get)
    return s


def test_state_tracks_mentions(state):
    assert state.mentions == {"Francesco": "Q1", "Michele": "Q2"}
    assert state.last_answer_entity() == "Francesco"
    assert state.history_lines() == ["USER: Who are the children of Ludovico II?",
                                     "SYSTEM: "]


def test_resolve_question_fallbacks(state):
    assert resolve_question(state, "Who are siblings of that one?") == \
        "Who are siblings of Francesco?"
    state.turns[-1].resolved_question = "Who are siblings of Francesco?"
    assert resolve_question(state, "No, I meant Michele.") == \
        "Who are siblings of Michele?"
    assert resolve_question(DialogState(), "Who founded it?") == "Who founded it?"


def test_resolve_question_uses_gateway(state):
    llm = ScriptedGateway(rules=[{
        "task": "coref", "match": ["USER: Who is it?"],
        "response": "```question\nWho is Francesco?\n```"}])
    assert resolve_question(state, "Who is it?", llm) == "Who is Francesco?"


def test_resolve_question_gateway_failure(state):
    llm = MagicMock()
    llm.complete.side_effect = LlmGatewayError("down")
    assert resolve_question(state, "Who founded it?", llm) == "Who founded Francesco?"


def test_abstract_question():
    assert abstract_question("Who are siblings of Francesco of Saluzzo and Michele?",
                             ["Michele", "Francesco of Saluzzo", "Francesco"]) == \
        "Who are siblings of <E1> and <E2>?"
    assert abstract_question("Who founded Acme?", []) == "Who founded Acme?"


def test_record_success_gate():
    mem = GlobalMemory()
    e = parse("(JOIN (R child) Q1)")
    record_success(mem, QuestionType.SIMPLE, "Who are children of Q1?", e, "simple-1",
                   PASSED, ["Q1"])
    assert mem.records[0].pattern == "Who are children of <E1>?"
    with pytest.raises(MemoryRejectionError, match="unverified"):
        record_success(mem, QuestionType.SIMPLE, "q", e, "simple-1", FAILED)
    with pytest.raises(MemoryRejectionError, match="placeholders"):
        record_success(mem, QuestionType.SIMPLE, "q",
                       parse("(JOIN child x1)", template=True), "simple-1", PASSED)
    with pytest.raises(MemoryRejectionError, match="does not type check"):
        record_success(mem, QuestionType.COUNT, "q", parse("(COUNT (IS_TRUE a p b))"),
                       "count-1", PASSED)
    assert len(mem) == 1


def test_memory_deduplicates_shapes():
    mem = GlobalMemory()
    assert mem.add(QuestionType.SIMPLE, "Who founded <E1>?", parse("(JOIN p a)"), "s")
    assert mem.add(QuestionType.SIMPLE, "Who founded <E1>?", parse("(JOIN p b)"),
                   "s") is None
    assert mem.add(QuestionType.SIMPLE, "Who founded <E1>?", parse("(JOIN q b)"), "s")
    assert [r.seq for r in mem.records] == [1, 2]
    assert len(mem.by_type(QuestionType.SIMPLE)) == 2
    assert mem.by_type(QuestionType.COUNT) == ()


def test_retrieve_exemplars():
    mem = GlobalMemory()
    mem.add(QuestionType.COUNT, "How many rivers cross <E1>?", parse("(JOIN p a)"), "c")
    mem.add(QuestionType.COUNT, "How many children has <E1>?", parse("(JOIN q a)"), "c")
    mem.add(QuestionType.SIMPLE, "How many children has <E1>?", parse("(JOIN r a)"),
            "s")
    found = retrieve_exemplars(mem, QuestionType.COUNT, "How many children has Bob?", 1)
    assert [r.seq for r in found] == [2]
    assert len(retrieve_exemplars(mem, QuestionType.COUNT, "x", 5)) == 2
    with pytest.raises(ValueError, match="n must be positive"):
        retrieve_exemplars(mem, QuestionType.COUNT, "x", 0)


def test_persist_restore_byte_exact(tmp_path):
    mem = GlobalMemory()
    mem.add(QuestionType.COMPARE, "Which <E1> have at least 3?",
            parse("(GE (GROUP_COUNT (JOIN (R p) a)) 3)"), "compare-1")
    mem.add(QuestionType.VERIFY, "Is <E1> a child of <E2>?",
            parse("(ALL (IS_TRUE a child b))"), "verify-1")
    first, second = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    persist(mem, str(first))
    restored = restore(str(first))
    assert restored == mem
    persist(restored, str(second))
    assert first.read_bytes() == second.read_bytes()
    assert restore(str(tmp_path / "missing.jsonl")) == GlobalMemory()


def test_restore_reports_corrupt_line(tmp_path):
    path = tmp_path / "memory.jsonl"
    good = MemoryRecord(QuestionType.SIMPLE, "p", parse("(JOIN p a)"), "simple-1", 1)
    path.write_text(json.dumps(good.to_json()) + "\n{not json}\n")
    with pytest.raises(MemoryRestoreError, match="line 2") as info:
        restore(str(path))
    assert info.value.line_number == 2


def test_attached_memory_flushes_appends(tmp_path):
    path = tmp_path / "memory.jsonl"
    mem = restore(str(path), attach=True)
    mem.add(QuestionType.SIMPLE, "Who founded <E1>?", parse("(JOIN p a)"), "simple-1")
    mem.flush()
    mem.add(QuestionType.SIMPLE, "Who owns <E1>?", parse("(JOIN q a)"), "simple-1")
    mem.flush()
    mem.flush()
    assert len(path.read_text().splitlines()) == 2
    assert restore(str(path)) == mem


def test_concurrent_writers():
    mem = GlobalMemory()

    def write(worker):
        for i in range(100):
            mem.add(QuestionType.SIMPLE, f"w{worker} q{i}", parse("(JOIN p a)"), "s")
    threads = [threading.Thread(target=write, args=(w,)) for w in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(r.seq for r in mem.records) == list(range(1, 401))


def test_only_verified_forms_enter_memory():
    rng = random.Random(11)
    mem = GlobalMemory()
    accepted = 0
    for turn in range(1_000):
        verdict = ValidationVerdict(rng.random() < 0.9, rng.random() < 0.9,
                                    rng.random() < 0.8)
        e = parse(f"(JOIN p{turn % 7} e{turn})")
        try:
            record_success(mem, QuestionType.SIMPLE, f"question {turn}", e,
                           "simple-1", verdict)
            accepted += 1
            assert verdict.passed
        except MemoryRejectionError:
            assert not verdict.passed
    assert len(mem) == accepted
    assert all(r.verified for r in mem.records)
