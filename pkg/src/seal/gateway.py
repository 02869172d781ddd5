"""
Prompting tasks on top of the language model transports.

Every task renders a :class:`PromptBundle`, sends it through a gateway and
passes the reply through a single validation funnel. Replies carry their
payload in a fenced block (```cores, ```type, ```plan or ```question);
a reply that breaks the contract is retried once with the error appended,
then :class:`LlmFormatError` is raised.
"""
import json
import logging
import re
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from seal.clients import EXAMPLES_HEADER, INPUT_HEADER, LlmGatewayError
from seal.sexpr import (SExprSyntaxError, SExprTypeError, parse, placeholders,
                        print_sexpr, type_check)
from seal.templates import (PlanError, QuestionType, ReplacementPlan, Template,
                            learned_template, plan_from_json)

logger = logging.getLogger(__name__)

T = TypeVar("T")

TYPE_EXEMPLARS_PER_TYPE = 3
EXEMPLARS_PER_TEMPLATE = 4
CORE_EXEMPLARS = 4

TYPE_EXEMPLARS: Dict[QuestionType, Tuple[str, ...]] = {
    QuestionType.SIMPLE: (
        "Who are the children of Ludovico II, Marquess of Saluzzo?",
        "Which television programs is Shelley Olds a screenwriter of?",
        "Which occupations belong to the field of sport?",
    ),
    QuestionType.VERIFY: (
        "Is Francesco of Saluzzo a brother of Michele Antonio of Saluzzo?",
        "Was Paris the birthplace of Marie Curie?",
        "Are both Gian Gabriele I and Francesco sons of Ludovico II?",
    ),
    QuestionType.COUNT: (
        "How many children does Ludovico II, Marquess of Saluzzo have?",
        "How many rivers flow through Bavaria?",
        "How many works of art are set in Florence?",
    ),
    QuestionType.COMPARE: (
        "Which territories are the narrative locations of at least 840 works?",
        "Which people have more siblings than Francesco of Saluzzo?",
        "Which countries share a border with exactly 2 countries?",
    ),
    QuestionType.COMPARE_AND_COUNT: (
        "How many administrative territories are the narrative locations of "
        "at least 840 applications or works of art?",
        "How many people have more than 3 siblings?",
        "How many countries share a border with fewer than 2 countries?",
    ),
    QuestionType.OPTIMIZE: (
        "Which territory is the narrative location of the most works of art?",
        "Who has the least siblings among the Saluzzo family?",
        "Which river flows through the max number of countries?",
    ),
}

INSTRUCTIONS = {
    "coref": ("Rewrite the latest user question as a complete standalone "
              "question using the dialog history and entity annotations. "
              "Answer in a ```question block."),
    "core_gen": ("Identify the independent query objects of the question and "
                 "write one S-expression core per object, one per line, in a "
                 "```cores block."),
    "type_pred": ("Classify the question as one of: simple, verify, count, "
                  "compare, compare_and_count, optimize. Answer with the type "
                  "in a ```type block."),
    "plan_gen": ("Choose the template that answers the question and a "
                 "replacement plan for its placeholders. Answer with a JSON "
                 "object with keys template, variables, constants and "
                 "functions in a ```plan block."),
}


class LlmFormatError(LlmGatewayError):
    """Exception raised when a reply breaks its response contract twice."""
    pass


@dataclass(frozen=True)
class PromptBundle:
    task_tag: str
    instruction: str
    exemplars: Tuple[str, ...]
    payload: str
    format_error: str = ""

    def render(self) -> str:
        sections = ["### TASK", self.instruction]
        if self.exemplars:
            sections += [EXAMPLES_HEADER, "\n\n".join(self.exemplars)]
        sections += [INPUT_HEADER, self.payload]
        if self.format_error:
            sections += ["### FORMAT ERROR", self.format_error]
        return "\n".join(sections) + "\n"

    def with_error(self, message: str) -> "PromptBundle":
        return PromptBundle(self.task_tag, self.instruction, self.exemplars,
                            self.payload, message)


def extract_block(text: str, name: str) -> str:
    """Body of the fenced block ``name`` in a reply.

    Raises
    ------
    LlmFormatError
        If the block is missing.
    """
    m = re.search(rf"```{name}[ \t]*\r?\n(.*?)```", text, re.DOTALL)
    if m is None:
        raise LlmFormatError(f"reply has no ```{name} block")
    return m.group(1).strip()


def ask(llm, bundle: PromptBundle, read: Callable[[str], T]) -> T:
    """Send ``bundle`` and validate the reply with ``read``.

    A reply that ``read`` rejects with :class:`LlmFormatError` is retried
    once with a FORMAT ERROR section; a second rejection propagates.
    """
    reply = llm.complete(bundle.task_tag, bundle.render())
    try:
        return read(reply)
    except LlmFormatError as e:
        logger.warning(f"{bundle.task_tag} reply rejected, reprompting: {e}")
        reply = llm.complete(bundle.task_tag, bundle.with_error(str(e)).render())
        return read(reply)


# -- tasks -----------------------------------------------------------------
def _read_question(reply: str) -> str:
    text = " ".join(extract_block(reply, "question").split())
    if not text:
        raise LlmFormatError("empty ```question block")
    return text


def complete_question(history: Sequence[str], entities: Sequence[str],
                      question: str, llm) -> str:
    """Coreference completion of the latest question."""
    payload = "\n".join(list(history) + [
        "[ENTITIES] " + "; ".join(entities),
        f"USER: {question}",
    ])
    bundle = PromptBundle("coref", INSTRUCTIONS["coref"], (), payload)
    return ask(llm, bundle, _read_question)


def _read_cores(reply: str) -> List[str]:
    lines = [line.strip() for line in extract_block(reply, "cores").splitlines()]
    drafts = [line for line in lines if line]
    if not drafts:
        raise LlmFormatError("empty ```cores block")
    return drafts


def draft_cores(question: str, exemplars: Sequence = (), llm=None,
                entity_hints: Sequence[str] = ()) -> List[str]:
    """Draft one raw core per independent query object.

    ``exemplars`` are memory records; ``entity_hints`` are entity labels
    annotated on the question.
    """
    payload = f"Question: {question}"
    if entity_hints:
        payload += "\n[ENTITIES] " + "; ".join(entity_hints)
    shown = tuple(r.render() for r in list(exemplars)[:CORE_EXEMPLARS])
    bundle = PromptBundle("core_gen", INSTRUCTIONS["core_gen"], shown, payload)
    return ask(llm, bundle, _read_cores)


def _read_type(reply: str) -> QuestionType:
    tokens = extract_block(reply, "type").split()
    if not tokens:
        raise LlmFormatError("empty ```type block")
    try:
        return QuestionType(tokens[0].lower())
    except ValueError:
        raise LlmFormatError(f"unknown question type {tokens[0]!r}")


def predict_type(question: str, exemplars: Optional[Dict] = None,
                 llm=None) -> QuestionType:
    """Predict the question type with three exemplars per type."""
    bank = exemplars if exemplars is not None else TYPE_EXEMPLARS
    shown = []
    for qtype in QuestionType:
        for q in list(bank.get(qtype, ()))[:TYPE_EXEMPLARS_PER_TYPE]:
            shown.append(f"Question: {q}\nType: {qtype.value}")
    bundle = PromptBundle("type_pred", INSTRUCTIONS["type_pred"], tuple(shown),
                          f"Question: {question}")
    return ask(llm, bundle, _read_type)


def _read_plan(reply: str) -> Dict:
    try:
        data = json.loads(extract_block(reply, "plan"))
    except json.JSONDecodeError as e:
        raise LlmFormatError(f"plan is not valid JSON: {e.msg}")
    if not isinstance(data, dict) or not isinstance(data.get("template"), str):
        raise LlmFormatError("plan must be an object with a 'template' string")
    return data


def _canonical(text: str) -> Optional[str]:
    try:
        return print_sexpr(parse(text))
    except SExprSyntaxError:
        return None


def _core_resolver(cores: Sequence, drafts: Sequence[str]):
    names: Dict[str, object] = {}
    for i, core in enumerate(cores):
        names.setdefault(f"c{i + 1}", core)
        names.setdefault(print_sexpr(core.expr), core)
    for draft, core in zip(drafts, cores):
        names.setdefault(" ".join(draft.split()), core)
        canonical = _canonical(draft)
        if canonical is not None:
            names.setdefault(canonical, core)

    def resolve(value):
        if not isinstance(value, str):
            raise PlanError(f"core reference must be a string: {value!r}")
        for key in (value.strip(), " ".join(value.split()), _canonical(value)):
            if key is not None and key in names:
                return names[key]
        raise PlanError(f"plan references unknown core {value!r}")
    return resolve


def _choose_template(choice: str, templates: Sequence[Template],
                     qtype: QuestionType) -> Template:
    for t in templates:
        if choice == t.id:
            return t
    wanted = _canonical_template(choice)
    for t in templates:
        if wanted == t.text:
            return t
    if wanted is None:
        raise PlanError(f"template {choice!r} is neither listed nor parseable")
    body = parse(wanted, template=True)
    if not placeholders(body):
        raise PlanError(f"out of list template {wanted} has no placeholders")
    try:
        type_check(body)
    except SExprTypeError as e:
        raise PlanError(f"out of list template {wanted} rejected: {e}")
    logger.info(f"Accepted out of list template {wanted}")
    return learned_template(qtype, body)


def _canonical_template(text: str) -> Optional[str]:
    try:
        return print_sexpr(parse(text, template=True))
    except SExprSyntaxError:
        return None


def select_plan(question: str, templates: Sequence[Template], cores: Sequence,
                exemplars: Sequence = (), llm=None, drafts: Sequence[str] = (),
                qtype: Optional[QuestionType] = None
                ) -> Tuple[Template, ReplacementPlan]:
    """Ask for a template and a replacement plan.

    Parameters
    ----------
    templates : list of Template
        Candidates, in preference order.
    cores : list of CalibratedCore
        Cores the plan may reference as ``c<i>``, by canonical text or by
        the draft they were calibrated from.
    exemplars : list of MemoryRecord
        Shown grouped by template, at most four per template.

    Raises
    ------
    PlanError
        If the plan references an unknown core or an out of list template
        is rejected.
    LlmFormatError
        If the reply breaks the plan contract twice.
    """
    if not templates:
        raise PlanError("no candidate templates")
    qtype = qtype or templates[0].qtype
    shown = []
    for t in templates:
        matching = [r for r in exemplars if r.template_id == t.id]
        if len(matching) > EXEMPLARS_PER_TEMPLATE:
            logger.debug(f"Truncated {len(matching)} exemplars of {t.id}")
        shown += [r.render(t.text) for r in matching[:EXEMPLARS_PER_TEMPLATE]]
    lines = [f"Question: {question}", "Templates:"]
    lines += [f"[{t.id}] {t.text}" for t in templates]
    lines.append("Cores:")
    lines += [f"[c{i + 1}] {print_sexpr(c.expr)}" for i, c in enumerate(cores)]
    bundle = PromptBundle("plan_gen", INSTRUCTIONS["plan_gen"], tuple(shown),
                          "\n".join(lines))
    data = ask(llm, bundle, _read_plan)
    template = _choose_template(data["template"], templates, qtype)
    plan = plan_from_json(data, _core_resolver(cores, drafts))
    return template, plan
