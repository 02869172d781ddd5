"""
Question types, the template library and template instantiation.

Templates are S-expressions whose leaves may be placeholders: ``x1``,
``x2``, ... stand for calibrated cores, ``number`` for an integer and the
heads ``compare`` and ``optimize`` for a comparison or an optimizer.
"""
import enum
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

from seal.sexpr import (COMPARISONS, FUNCTION_PLACEHOLDERS, NUMBER_PLACEHOLDER,
                        OPTIMIZERS, Function, NumberLiteral, Placeholder, SExpr,
                        SExprTypeError, is_core, parse, placeholders,
                        print_sexpr, type_check)
from seal.utils import stable_hash

logger = logging.getLogger(__name__)

BUILTIN = "builtin"
LEARNED = "learned"


class QuestionType(str, enum.Enum):
    SIMPLE = "simple"
    VERIFY = "verify"
    COUNT = "count"
    COMPARE = "compare"
    COMPARE_AND_COUNT = "compare_and_count"
    OPTIMIZE = "optimize"


class PlanError(Exception):
    """Exception raised when a replacement plan does not fit its template."""
    pass


class CompositionError(Exception):
    """Exception raised when an instantiated template does not type check."""
    pass


@dataclass(frozen=True)
class Template:
    id: str
    qtype: QuestionType
    body: SExpr
    source: str = BUILTIN
    repaired: bool = False

    @property
    def text(self) -> str:
        return print_sexpr(self.body)

    @property
    def placeholders(self) -> List[str]:
        return placeholders(self.body)

    def to_json(self) -> Dict:
        return {"id": self.id, "type": self.qtype.value, "body": self.text,
                "source": self.source, "repaired": self.repaired}


# Rows marked repaired fix the comparison of an equality row to EQ.
_GROUP_SUM = "(GROUP_SUM (GROUP_COUNT x1) (GROUP_COUNT x2))"
_LIBRARY_ROWS = (
    (QuestionType.SIMPLE, "x1", False),
    (QuestionType.SIMPLE, "(OR x1 x2)", False),
    (QuestionType.SIMPLE, "(DISTINCT x1)", False),
    (QuestionType.SIMPLE, "(DIFF x1 x2)", False),
    (QuestionType.SIMPLE, "(EQ (GROUP_COUNT x1) number)", True),
    (QuestionType.SIMPLE, f"(EQ {_GROUP_SUM} number)", True),
    (QuestionType.VERIFY, "(ALL x1)", False),
    (QuestionType.VERIFY, "(ALL x1 x2)", False),
    (QuestionType.VERIFY, "(ALL x1 x2 x3)", False),
    (QuestionType.COUNT, "(COUNT x1)", False),
    (QuestionType.COUNT, "(COUNT (DISTINCT x1))", False),
    (QuestionType.COUNT, "(COUNT (DISTINCT (OR x1 x2)))", False),
    (QuestionType.COUNT, "(COUNT (EQ (GROUP_COUNT x1) number))", True),
    (QuestionType.COUNT, f"(COUNT (EQ {_GROUP_SUM} number))", True),
    (QuestionType.COMPARE, "(compare (GROUP_COUNT x1) number)", False),
    (QuestionType.COMPARE, "(compare (GROUP_COUNT x1) x2)", False),
    (QuestionType.COMPARE, f"(compare {_GROUP_SUM} number)", False),
    (QuestionType.COMPARE, f"(compare {_GROUP_SUM} (OR x3 x4))", False),
    (QuestionType.COMPARE_AND_COUNT, "(COUNT (compare (GROUP_COUNT x1) number))",
     False),
    (QuestionType.COMPARE_AND_COUNT, "(COUNT (compare (GROUP_COUNT x1) x2))", False),
    (QuestionType.COMPARE_AND_COUNT, f"(COUNT (compare {_GROUP_SUM} number))", False),
    (QuestionType.COMPARE_AND_COUNT, f"(COUNT (compare {_GROUP_SUM} (OR x3 x4)))",
     False),
    (QuestionType.OPTIMIZE, "(optimize (GROUP_COUNT x1))", False),
    (QuestionType.OPTIMIZE, f"(optimize {_GROUP_SUM})", False),
)

_LIBRARY: List[Template] = []


def builtin_library() -> List[Template]:
    """Every library row as a Template, ids ``<type>-<n>`` in row order."""
    if not _LIBRARY:
        numbering: Dict[QuestionType, int] = {}
        for qtype, body, repaired in _LIBRARY_ROWS:
            numbering[qtype] = numbering.get(qtype, 0) + 1
            _LIBRARY.append(Template(f"{qtype.value}-{numbering[qtype]}", qtype,
                                     parse(body, template=True), BUILTIN,
                                     repaired))
    return list(_LIBRARY)


def template_by_id(template_id: str,
                   extra: Iterable[Template] = ()) -> Optional[Template]:
    for t in list(builtin_library()) + list(extra):
        if t.id == template_id:
            return t
    return None


def learned_template(qtype: QuestionType, body: SExpr) -> Template:
    text = print_sexpr(body)
    return Template(f"learned-{stable_hash(qtype.value, text, length=8)}", qtype,
                    body, LEARNED)


# -- type refinement -------------------------------------------------------
COUNT_CUES = ("how many", "number of")
COMPARATIVE_CUES = ("more than", "less than", "fewer than", "greater than",
                    "at least", "at most", "exactly")
_BOUNDS = re.compile(r"\bat (most|least)\b")
_SUPERLATIVE = re.compile(r"\b(most|least|max|min)\b")


def refine_type(predicted: QuestionType, question: str) -> QuestionType:
    """Refine a predicted question type with keyword rules.

    In priority order: a superlative cue gives optimize; a compare question
    with a count cue, or a count question with a comparative cue and a
    count cue, gives compare_and_count. Matching is case insensitive and
    "at most"/"at least" are not superlatives.
    """
    q = question.lower()
    if _SUPERLATIVE.search(_BOUNDS.sub(" ", q)):
        return QuestionType.OPTIMIZE
    has_count = any(cue in q for cue in COUNT_CUES)
    if predicted is QuestionType.COMPARE and has_count:
        return QuestionType.COMPARE_AND_COUNT
    if (predicted is QuestionType.COUNT and has_count
            and any(cue in q for cue in COMPARATIVE_CUES)):
        return QuestionType.COMPARE_AND_COUNT
    return predicted


# -- selection -------------------------------------------------------------
def candidate_templates(t: QuestionType, global_mem=None) -> List[Template]:
    """Builtin templates of type ``t``, then learned ones from memory.

    Learned templates whose body equals an earlier template are skipped,
    so builtins are never shadowed.
    """
    out = [tpl for tpl in builtin_library() if tpl.qtype is t]
    seen = {tpl.text for tpl in out}
    learned = global_mem.learned_templates(t) if global_mem is not None else []
    for tpl in learned:
        if tpl.text not in seen:
            seen.add(tpl.text)
            out.append(tpl)
    return out


def abstract_template(e: SExpr) -> SExpr:
    """Abstract a final expression into a template body.

    Maximal cores become ``x1``, ``x2``, ... in order of appearance,
    numbers become ``number``, comparisons ``compare`` and optimizers
    ``optimize``.
    """
    names: Dict[SExpr, str] = {}

    def walk(node: SExpr) -> SExpr:
        if isinstance(node, NumberLiteral):
            return Placeholder(NUMBER_PLACEHOLDER)
        if is_core(node) and not isinstance(node, Placeholder):
            if node not in names:
                names[node] = f"x{len(names) + 1}"
            return Placeholder(names[node])
        if not isinstance(node, Function):
            return node
        head = node.name
        if head in COMPARISONS:
            head = "compare"
        elif head in OPTIMIZERS:
            head = "optimize"
        return Function(head, tuple(walk(a) for a in node.args))
    return walk(e)


# -- instantiation ---------------------------------------------------------
@dataclass(frozen=True)
class ReplacementPlan:
    """Assignment of every template placeholder.

    ``variables`` values are calibrated cores or plain expressions.
    """
    variables: Dict[str, object] = field(default_factory=dict)
    constants: Dict[str, int] = field(default_factory=dict)
    functions: Dict[str, str] = field(default_factory=dict)

    def domain(self) -> List[str]:
        return list(self.variables) + list(self.constants) + list(self.functions)

    def to_json(self) -> Dict:
        return {
            "variables": {k: print_sexpr(_expr_of(v))
                          for k, v in self.variables.items()},
            "constants": dict(self.constants),
            "functions": dict(self.functions),
        }


def _expr_of(value) -> SExpr:
    return getattr(value, "expr", value)


def _check_plan(t: Template, plan: ReplacementPlan) -> None:
    domain = plan.domain()
    repeated = sorted({p for p in domain if domain.count(p) > 1})
    if repeated:
        raise PlanError(f"placeholders assigned twice: {repeated}")
    wanted, given = set(t.placeholders), set(domain)
    if wanted != given:
        raise PlanError(f"plan does not fit {t.id}: missing "
                        f"{sorted(wanted - given)}, extra {sorted(given - wanted)}")
    for name, value in plan.functions.items():
        allowed = FUNCTION_PLACEHOLDERS.get(name, ())
        if value not in allowed:
            raise PlanError(f"{name} must be one of {list(allowed)}, got '{value}'")
    for name, value in plan.constants.items():
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise PlanError(f"constant {name} must be a non negative integer: "
                            f"{value!r}")


def transform(t: Template, plan: ReplacementPlan) -> SExpr:
    """Instantiate ``t`` by recursive substitution of its placeholders.

    Raises
    ------
    PlanError
        If the plan domain differs from the template placeholders or a
        function or constant value is out of range.
    CompositionError
        If an assigned core or the result fails the type check.
    """
    _check_plan(t, plan)
    cores = {name: _expr_of(v) for name, v in plan.variables.items()}
    for name, core in cores.items():
        try:
            type_check(core)
        except SExprTypeError as e:
            raise CompositionError(f"core for {name} does not type check: {e}")

    def substitute(node: SExpr) -> SExpr:
        if isinstance(node, Placeholder):
            if node.name in plan.constants:
                return NumberLiteral(plan.constants[node.name])
            return cores[node.name]
        if isinstance(node, Function):
            head = plan.functions.get(node.name, node.name)
            return Function(head, tuple(substitute(a) for a in node.args))
        return node

    result = substitute(t.body)
    try:
        type_check(result)
    except SExprTypeError as e:
        raise CompositionError(f"{t.id} instantiated to an ill typed "
                               f"expression: {e}")
    return result


_SEPARATORS = (",", " or ", " and ")


def compose_out_of_template(cores: Sequence, question: str) -> Optional[SExpr]:
    """Template body for disjunctions over three or more cores.

    Returns a left nested OR over ``x1 .. xn`` when the question lists at
    least two separators, and None otherwise.
    """
    if len(cores) < 3:
        return None
    q = question.lower()
    if sum(q.count(sep) for sep in _SEPARATORS) < 2:
        return None
    body: SExpr = Placeholder("x1")
    for i in range(2, len(cores) + 1):
        body = Function("OR", (body, Placeholder(f"x{i}")))
    logger.debug(f"Composed out of library template {print_sexpr(body)}")
    return body


def export_catalog(templates: Optional[Iterable[Template]] = None) -> str:
    """JSON catalog of templates, the builtin library by default."""
    rows = [t.to_json() for t in (templates if templates is not None
                                  else builtin_library())]
    return json.dumps(rows, indent=2)


def plan_from_json(data: Dict, resolve) -> ReplacementPlan:
    """Build a plan from its JSON shape.

    ``resolve`` maps a variable's value (a core text) to its core.
    """
    if not isinstance(data, dict):
        raise PlanError("plan must be a JSON object")
    variables = data.get("variables", {}) or {}
    constants = data.get("constants", {}) or {}
    functions = data.get("functions", {}) or {}
    if not all(isinstance(m, dict) for m in (variables, constants, functions)):
        raise PlanError("plan variables, constants and functions must be objects")
    return ReplacementPlan({k: resolve(v) for k, v in variables.items()},
                           dict(constants), dict(functions))

