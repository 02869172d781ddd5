"""
Local dialog memory and the global memory of verified exemplars.

Local memory is a :class:`DialogState`: the turns of one dialog plus the
entity mentions learned from earlier answers. Global memory is an
append-only list of execution verified records indexed by question type,
persisted as JSON lines.
"""
import json
import logging
import os
import re
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from seal.clients import LlmGatewayError
from seal.evaluator import EvalResult
from seal.sexpr import (EntityRef, Function, SExpr, SExprSyntaxError, ValueType,
                        SExprTypeError, parse, placeholders, print_sexpr,
                        type_check)
from seal.templates import (LEARNED, QuestionType, Template, abstract_template,
                            learned_template)

logger = logging.getLogger(__name__)

PRONOUNS = ("that one", "that person", "it")
_PRONOUN = re.compile(r"\b(" + "|".join(re.escape(p) for p in PRONOUNS) + r")\b",
                      re.IGNORECASE)
_CORRECTION = re.compile(r"^\s*no\b[,.]?\s*i\s+meant\s+(?P<target>.+?)[.!?]*\s*$",
                         re.IGNORECASE)
_WORD = re.compile(r"[a-z0-9<>]+")


class MemoryRejectionError(Exception):
    """Exception raised when an unverified or ill typed logical form is
    offered to global memory."""
    pass


class MemoryRestoreError(ValueError):
    """Exception raised for a corrupt line of a memory file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# -- local memory ----------------------------------------------------------
@dataclass
class DialogTurn:
    question: str
    answer: str = ""
    resolved_question: str = ""
    logical_form: Optional[SExpr] = None
    answer_entities: Tuple[str, ...] = ()


@dataclass
class DialogState:
    """Turns of one dialog and the mentions ``surface -> id`` taken from
    their answers."""
    turns: List[DialogTurn] = field(default_factory=list)
    mentions: Dict[str, str] = field(default_factory=dict)

    def add_turn(self, turn: DialogTurn, result: Optional[EvalResult] = None,
                 label_of=str) -> None:
        if result is not None and result.kind is ValueType.ENTITY_SET:
            ids = sorted(result.value)
            turn.answer_entities = tuple(label_of(i) for i in ids)
            for i in ids:
                self.mentions[label_of(i)] = i
        self.turns.append(turn)

    def history_lines(self) -> List[str]:
        lines = []
        for turn in self.turns:
            lines.append(f"USER: {turn.resolved_question or turn.question}")
            lines.append(f"SYSTEM: {turn.answer}")
        return lines

    def last_answer_entity(self) -> Optional[str]:
        for turn in reversed(self.turns):
            if turn.answer_entities:
                return turn.answer_entities[0]
        return None


def _substitute_pronouns(state: DialogState, question: str) -> str:
    referent = state.last_answer_entity()
    if referent is None:
        return question
    return _PRONOUN.sub(referent, question)


def _apply_correction(state: DialogState, question: str) -> Optional[str]:
    m = _CORRECTION.match(question)
    if m is None or not state.turns:
        return None
    target = m.group("target").strip()
    previous = state.turns[-1].resolved_question or state.turns[-1].question
    known = sorted((s for s in state.mentions if s in previous),
                   key=lambda s: (-len(s), s))
    if not known:
        return None
    return previous.replace(known[0], target)


def resolve_question(history: DialogState, question: str, llm=None) -> str:
    """Complete ``question`` into a standalone question.

    The gateway is asked first. When it fails, or none is given, a
    correction of the form "No, I meant X" rewrites the previous question
    and pronouns are replaced by the most recent answer entity.
    """
    if llm is not None:
        from seal.gateway import complete_question
        try:
            resolved = complete_question(history.history_lines(),
                                         sorted(history.mentions), question, llm)
            if resolved.strip():
                return resolved.strip()
        except LlmGatewayError as e:
            logger.warning(f"Coreference completion failed, using fallback: {e}")
    corrected = _apply_correction(history, question)
    if corrected is not None:
        return corrected
    return _substitute_pronouns(history, question)


# -- global memory ---------------------------------------------------------
@dataclass(frozen=True)
class MemoryRecord:
    qtype: QuestionType
    pattern: str
    sexpr: SExpr
    template_id: str
    seq: int
    verified: bool = True

    def to_json(self) -> Dict:
        return {"qtype": self.qtype.value, "pattern": self.pattern,
                "sexpr": print_sexpr(self.sexpr), "template_id": self.template_id,
                "seq": self.seq}

    @classmethod
    def from_json(cls, data: Dict) -> "MemoryRecord":
        return cls(QuestionType(data["qtype"]), data["pattern"],
                   parse(data["sexpr"]), data["template_id"], int(data["seq"]))

    def render(self, template_text: str = "") -> str:
        lines = [f"Question: {self.pattern}",
                 f"S-expression: {print_sexpr(self.sexpr)}"]
        if template_text:
            lines.append(f"Template: {template_text}")
        return "\n".join(lines)


def _shape(e: SExpr) -> str:
    def walk(node):
        if isinstance(node, EntityRef):
            return EntityRef("<E>")
        if isinstance(node, Function):
            return Function(node.name, tuple(walk(a) for a in node.args))
        return node
    return print_sexpr(walk(e))


class GlobalMemory:
    """Append-only store of verified records with a question type index.

    Writes are serialized by a lock; readers get tuple snapshots. When a
    path is set, :meth:`flush` appends the records not yet written.
    """

    def __init__(self, records: Iterable[MemoryRecord] = (),
                 path: Optional[str] = None):
        self._records: List[MemoryRecord] = []
        self._by_type: Dict[QuestionType, List[MemoryRecord]] = {}
        self._keys = set()
        self._lock = threading.Lock()
        self._path = path
        for r in records:
            self._append(r)
        self._flushed = len(self._records)

    def _append(self, record: MemoryRecord) -> None:
        self._records.append(record)
        self._by_type.setdefault(record.qtype, []).append(record)
        self._keys.add((record.pattern, _shape(record.sexpr)))

    @property
    def records(self) -> Tuple[MemoryRecord, ...]:
        return tuple(self._records)

    @property
    def path(self) -> Optional[str]:
        return self._path

    def by_type(self, qtype: QuestionType) -> Tuple[MemoryRecord, ...]:
        return tuple(self._by_type.get(qtype, ()))

    def learned_templates(self, qtype: QuestionType) -> List[Template]:
        out = []
        for r in self.by_type(qtype):
            if r.template_id.startswith(f"{LEARNED}-"):
                out.append(learned_template(qtype, abstract_template(r.sexpr)))
        return out

    def add(self, qtype: QuestionType, pattern: str, sexpr: SExpr,
            template_id: str) -> Optional[MemoryRecord]:
        with self._lock:
            key = (pattern, _shape(sexpr))
            if key in self._keys:
                return None
            record = MemoryRecord(qtype, pattern, sexpr, template_id,
                                  len(self._records) + 1)
            self._append(record)
        logger.debug(f"Memory record {record.seq} ({qtype.value}): {pattern}")
        return record

    def flush(self) -> None:
        if self._path is None:
            return
        with self._lock:
            pending = self._records[self._flushed:]
            with open(self._path, "a", encoding="utf8") as f:
                for r in pending:
                    f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
            self._flushed = len(self._records)

    def __len__(self) -> int:
        return len(self._records)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GlobalMemory):
            return NotImplemented
        return self._records == other._records


def abstract_question(question: str, surfaces: Sequence[str]) -> str:
    """Replace entity surfaces by ``<E1>``, ``<E2>`` in mention order."""
    found = []
    lowered = question.lower()
    for s in sorted(set(surfaces), key=lambda s: (-len(s), s)):
        position = lowered.find(s.lower()) if s else -1
        if position >= 0 and not any(a <= position < b for a, b, _ in found):
            found.append((position, position + len(s), s))
    pieces, last = [], 0
    for n, (start, end, _) in enumerate(sorted(found), start=1):
        pieces += [question[last:start], f"<E{n}>"]
        last = end
    return "".join(pieces) + question[last:]


def record_success(mem: GlobalMemory, qtype: QuestionType, question: str,
                   sexpr: SExpr, template_id: str, verdict,
                   surfaces: Sequence[str] = ()) -> GlobalMemory:
    """Store a verified logical form as an exemplar.

    Raises
    ------
    MemoryRejectionError
        If the verdict did not pass, or the form holds placeholders or does
        not type check.
    """
    if verdict is None or not getattr(verdict, "passed", False):
        raise MemoryRejectionError(f"refusing unverified logical form {sexpr}")
    if placeholders(sexpr):
        raise MemoryRejectionError(f"logical form holds placeholders: {sexpr}")
    try:
        type_check(sexpr)
    except SExprTypeError as e:
        raise MemoryRejectionError(f"logical form does not type check: {e}")
    mem.add(qtype, abstract_question(question, surfaces), sexpr, template_id)
    return mem


def _overlap(a: str, b: str) -> float:
    left, right = set(_WORD.findall(a.lower())), set(_WORD.findall(b.lower()))
    if not left and not right:
        return 0.0
    return len(left & right) / len(left | right)


def retrieve_exemplars(mem: GlobalMemory, qtype: QuestionType, question: str,
                       n: int) -> List[MemoryRecord]:
    """Up to ``n`` records of ``qtype`` by word overlap with ``question``."""
    if n < 1:
        raise ValueError(f"n must be positive: {n}")
    ranked = sorted(mem.by_type(qtype),
                    key=lambda r: (-_overlap(r.pattern, question), r.seq))
    return ranked[:n]


def persist(mem: GlobalMemory, path: str) -> None:
    """Write all records, one JSON document per line."""
    with open(path, "w", encoding="utf8") as f:
        for r in mem.records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def restore(path: str, attach: bool = False) -> GlobalMemory:
    """Read a memory file; a missing file gives an empty memory.

    With ``attach`` the returned memory flushes new records to ``path``.

    Raises
    ------
    MemoryRestoreError
        On the first corrupt line.
    """
    records = []
    if os.path.exists(path):
        with open(path, encoding="utf8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(MemoryRecord.from_json(json.loads(line)))
                except (ValueError, KeyError, TypeError, SExprSyntaxError) as e:
                    raise MemoryRestoreError(f"corrupt memory record: {e}", number)
    return GlobalMemory(records, path if attach else None)
