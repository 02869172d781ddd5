"""
Extended S-expression language: syntax tree, parser, printer and types.

Classes
-------
EntityRef, RelationRef, NumberLiteral, Placeholder, Function
    Node kinds of the syntax tree. All nodes are immutable.
ValueType
    Result types of the language.
RawAtom, RawList
    Untyped reader output, used by the syntax corrector.

Functions
---------
parse(text, template=False)
    Parse text into a typed tree.
print_sexpr(e)
    Canonical single-space rendering.
type_check(e, placeholder_types=None)
    Infer the result type or raise a located error.
match_core_pattern(e)
    Lowest numbered core pattern matched by ``e``.
is_core(e)
    Whether ``e`` only uses core functions.
"""
import enum
import re
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

from config import MAX_NESTING_DEPTH

COMPARISONS = ("LT", "LE", "GT", "GE", "EQ")
OPTIMIZERS = ("ARGMAX", "ARGMIN")
FUNCTIONS = frozenset({
    "JOIN", "R", "AND", "OR", "VALUES", "IS_TRUE", "COUNT", "DISTINCT",
    "GROUP_COUNT", "GROUP_SUM", "ALL", "DIFF", *OPTIMIZERS, *COMPARISONS,
})
CORE_FUNCTIONS = frozenset({"JOIN", "R", "AND", "VALUES", "IS_TRUE"})
FUNCTION_PLACEHOLDERS = {"compare": COMPARISONS, "optimize": OPTIMIZERS}
NUMBER_PLACEHOLDER = "number"
_VARIABLE_PLACEHOLDER = re.compile(r"^x[1-9][0-9]*$")
_NUMBER = re.compile(r"^[0-9]+$")

# (min, max) argument counts; None means unbounded
ARITY: Dict[str, Tuple[int, Optional[int]]] = {
    "JOIN": (2, 2), "R": (1, 1), "AND": (2, None), "OR": (2, None),
    "DIFF": (2, 2), "VALUES": (1, None), "IS_TRUE": (3, 3), "COUNT": (1, 1),
    "DISTINCT": (1, 1), "GROUP_COUNT": (1, 1), "GROUP_SUM": (2, 2),
    "ALL": (1, None), "ARGMAX": (1, 1), "ARGMIN": (1, 1), "optimize": (1, 1),
    **{name: (2, 2) for name in COMPARISONS}, "compare": (2, 2),
}

CORE_PATTERNS: Dict[int, str] = {
    1: "(IS_TRUE x x x)",
    2: "(JOIN x x)",
    3: "(JOIN (R x) x)",
    4: "(AND (JOIN x x) (JOIN x x))",
    5: "(AND (JOIN x (VALUES x ...)) (JOIN x x))",
    6: "(AND (JOIN (R x) x) (JOIN x x))",
    7: "(AND (JOIN (R x) (VALUES x ...)) (JOIN x x))",
    8: "(AND (JOIN x (JOIN x x)) (JOIN x x))",
    9: "(AND (JOIN (R x) (JOIN x x)) (JOIN x x))",
    10: "(AND (JOIN x x) (JOIN x x) (JOIN x x))",
    11: "(AND (JOIN (R x) x) (JOIN (R x) x) (JOIN x x))",
    12: "(AND (JOIN (R x) x) (JOIN x x) (JOIN (R x) x))",
}


class ValueType(enum.Enum):
    ENTITY_SET = "EntitySet"
    VALUE_SET = "ValueSet"
    PAIR_SET = "PairSet"
    GROUPED_COUNTS = "GroupedCounts"
    BOOLEAN = "Boolean"
    INTEGER = "Integer"


class SExprSyntaxError(ValueError):
    """Exception raised for text that is not a well formed S-expression.

    The ``offset`` attribute is the byte offset of the offending token.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SExprTypeError(ValueError):
    """Exception raised when a tree does not type check.

    The ``path`` attribute lists argument indexes from the root to the
    offending subtree.
    """

    def __init__(self, message: str, path: Tuple[int, ...]):
        where = "/".join(str(i) for i in path) or "root"
        super().__init__(f"{message} at {where}")
        self.path = path


@dataclass(frozen=True)
class EntityRef:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class RelationRef:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class NumberLiteral:
    value: int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Placeholder:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Function:
    name: str
    args: Tuple["SExpr", ...]

    def __str__(self):
        return print_sexpr(self)


SExpr = Union[Function, EntityRef, RelationRef, NumberLiteral, Placeholder]
Leaf = (EntityRef, RelationRef, NumberLiteral, Placeholder)


# -- reader ----------------------------------------------------------------
@dataclass
class RawAtom:
    text: str
    offset: int


@dataclass
class RawList:
    items: List[Union["RawAtom", "RawList"]]
    offset: int


RawNode = Union[RawAtom, RawList]


def tokenize(text: str) -> List[Tuple[str, int]]:
    """Split text into ``(token, byte_offset)`` pairs."""
    tokens = []
    current: List[str] = []
    start = 0
    position = 0
    for ch in text:
        if ch in "()" or ch.isspace():
            if current:
                tokens.append(("".join(current), start))
                current = []
            if ch in "()":
                tokens.append((ch, position))
        else:
            if not current:
                start = position
            current.append(ch)
        position += len(ch.encode("utf8"))
    if current:
        tokens.append(("".join(current), start))
    return tokens


def check_balance(tokens: Sequence[Tuple[str, int]]) -> None:
    """Raise on the first unmatched parenthesis."""
    opened: List[int] = []
    for token, offset in tokens:
        if token == "(":
            opened.append(offset)
        elif token == ")":
            if not opened:
                raise SExprSyntaxError("unexpected ')'", offset)
            opened.pop()
    if opened:
        raise SExprSyntaxError("unclosed '('", opened[0])


def read_forest(tokens: Sequence[Tuple[str, int]]) -> List[RawNode]:
    """Read balanced tokens into top level raw nodes (no typing)."""
    check_balance(tokens)
    root: List[RawNode] = []
    stack: List[RawList] = []
    for token, offset in tokens:
        if token == "(":
            node = RawList([], offset)
            (stack[-1].items if stack else root).append(node)
            stack.append(node)
            if len(stack) > MAX_NESTING_DEPTH:
                raise SExprSyntaxError(
                    f"nesting deeper than {MAX_NESTING_DEPTH}", offset
                )
        elif token == ")":
            stack.pop()
        else:
            (stack[-1].items if stack else root).append(RawAtom(token, offset))
    return root


def raw_to_text(node: RawNode) -> str:
    if isinstance(node, RawAtom):
        return node.text
    return "(" + " ".join(raw_to_text(item) for item in node.items) + ")"


# -- typed construction ----------------------------------------------------
_RELATION_SLOT = "relation"
_ENTITY_SLOT = "entity"
# entity or number; digit tokens read as numbers only here
_VALUE_SLOT = "value"
_VALUE_HOLDERS = frozenset({"COUNT", "DISTINCT", "compare", *COMPARISONS})


def slot_roles(name: str, count: int, role: str = _VALUE_SLOT) -> List[str]:
    """Roles of the ``count`` arguments of ``name`` sitting in a ``role`` slot.

    A ``VALUES`` list inherits the role of its own slot, so that it holds
    entities under ``JOIN`` and may hold numbers under ``COUNT``.
    """
    if name == "VALUES":
        return [_ENTITY_SLOT if role == _ENTITY_SLOT else _VALUE_SLOT] * count
    if name in COMPARISONS or name == "compare":
        return [_ENTITY_SLOT] + [_VALUE_SLOT] * (count - 1)
    if name in _VALUE_HOLDERS:
        return [_VALUE_SLOT] * count
    if name == "JOIN":
        return [_RELATION_SLOT] + [_ENTITY_SLOT] * (count - 1)
    if name == "R":
        return [_RELATION_SLOT] * count
    if name == "IS_TRUE":
        roles = [_ENTITY_SLOT, _RELATION_SLOT, _ENTITY_SLOT]
        return roles[:count] + [_ENTITY_SLOT] * max(0, count - 3)
    return [_ENTITY_SLOT] * count


def is_placeholder_name(token: str) -> bool:
    return bool(_VARIABLE_PLACEHOLDER.match(token)) or token == NUMBER_PLACEHOLDER


def make_leaf(token: str, role: str = _VALUE_SLOT, template: bool = False):
    if template and is_placeholder_name(token):
        return Placeholder(token)
    if role == _VALUE_SLOT and _NUMBER.match(token):
        return NumberLiteral(int(token))
    if role == _RELATION_SLOT:
        return RelationRef(token)
    return EntityRef(token)


def check_arity(name: str, count: int) -> Optional[str]:
    """Describe an arity violation, or return None when ``count`` fits."""
    low, high = ARITY[name]
    if count < low or (high is not None and count > high):
        expected = f"{low}" if low == high else (
            f"at least {low}" if high is None else f"{low} to {high}")
        return f"{name} expects {expected} argument(s), got {count}"
    return None


def build(node: RawNode, template: bool = False, role: str = _VALUE_SLOT
          ) -> SExpr:
    """Turn a raw node into a typed tree, classifying leaves by slot."""
    if isinstance(node, RawAtom):
        return make_leaf(node.text, role, template)
    if not node.items:
        raise SExprSyntaxError("empty argument list", node.offset)
    head = node.items[0]
    if not isinstance(head, RawAtom):
        raise SExprSyntaxError("function head must be a name", head.offset)
    name = head.text
    if name not in FUNCTIONS and not (template and name in FUNCTION_PLACEHOLDERS):
        raise SExprSyntaxError(f"unknown function '{name}'", head.offset)
    raw_args = node.items[1:]
    problem = check_arity(name, len(raw_args))
    if problem:
        raise SExprSyntaxError(problem, node.offset)
    roles = slot_roles(name, len(raw_args), role)
    args = tuple(build(arg, template, r) for arg, r in zip(raw_args, roles))
    return Function(name, args)


def parse(text: str, template: bool = False) -> SExpr:
    """Parse one S-expression.

    Parameters
    ----------
    text : str
        Source text.
    template : bool, default=False
        Accept placeholders (``x1``, ``number``) and the function valued
        placeholders ``compare`` and ``optimize``.

    Returns
    -------
    SExpr
        The typed tree.

    Raises
    ------
    SExprSyntaxError
        For unbalanced parentheses, unknown heads, empty argument lists,
        arity violations, excessive nesting or trailing input.
    """
    forest = read_forest(tokenize(text))
    if not forest:
        raise SExprSyntaxError("empty input", 0)
    if len(forest) > 1:
        raise SExprSyntaxError("trailing input after expression", forest[1].offset)
    return build(forest[0], template)


def print_sexpr(e: SExpr) -> str:
    if isinstance(e, Function):
        return "(" + " ".join([e.name] + [print_sexpr(a) for a in e.args]) + ")"
    return str(e)


# -- traversal -------------------------------------------------------------
def iter_nodes(e: SExpr) -> Iterator[SExpr]:
    """Pre-order traversal."""
    stack = [e]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, Function):
            stack.extend(reversed(node.args))


def leaves(e: SExpr) -> List[SExpr]:
    return [n for n in iter_nodes(e) if not isinstance(n, Function)]


def node_count(e: SExpr) -> int:
    return sum(1 for _ in iter_nodes(e))


def placeholders(e: SExpr) -> List[str]:
    """Placeholder names in order of first appearance, including function
    valued placeholders used as heads."""
    found: List[str] = []
    for node in iter_nodes(e):
        name = None
        if isinstance(node, Placeholder):
            name = node.name
        elif isinstance(node, Function) and node.name in FUNCTION_PLACEHOLDERS:
            name = node.name
        if name is not None and name not in found:
            found.append(name)
    return found


def is_core(e: SExpr) -> bool:
    return all(n.name in CORE_FUNCTIONS
               for n in iter_nodes(e) if isinstance(n, Function))


# -- types -----------------------------------------------------------------
def type_check(e: SExpr, placeholder_types: Optional[Dict[str, ValueType]] = None
               ) -> ValueType:
    """Infer the result type of ``e``.

    Placeholders take their type from ``placeholder_types`` or, failing
    that, from the slot they occupy (``number`` is an Integer, ``x_i``
    is an entity set, or a boolean under ``ALL``).

    Raises
    ------
    SExprTypeError
        With the path to the offending subtree.
    """
    return _infer(e, (), placeholder_types or {}, ValueType.ENTITY_SET)


def _infer(e, path, ptypes, expected) -> ValueType:
    if isinstance(e, EntityRef):
        return ValueType.ENTITY_SET
    if isinstance(e, NumberLiteral):
        return ValueType.INTEGER
    if isinstance(e, Placeholder):
        if e.name in ptypes:
            return ptypes[e.name]
        if e.name == NUMBER_PLACEHOLDER:
            return ValueType.INTEGER
        return expected
    if isinstance(e, RelationRef):
        raise SExprTypeError(f"relation '{e.name}' outside a relation slot", path)

    name, args = e.name, e.args
    problem = check_arity(name, len(args)) if name in ARITY else (
        f"unknown function '{name}'")
    if problem:
        raise SExprTypeError(problem, path)

    def arg(i, want=ValueType.ENTITY_SET):
        return _infer(args[i], path + (i,), ptypes, want)

    def expect(i, allowed, want=ValueType.ENTITY_SET):
        got = arg(i, want)
        if got not in allowed:
            names = "/".join(t.value for t in allowed)
            raise SExprTypeError(
                f"{name} argument {i + 1} must be {names}, got {got.value}",
                path + (i,))
        return got

    if name == "JOIN":
        first = args[0]
        if isinstance(first, Function) and first.name == "R":
            _relation_slot(first.args[0], path + (0, 0))
        else:
            _relation_slot(first, path + (0,))
        expect(1, (ValueType.ENTITY_SET,))
        return ValueType.ENTITY_SET
    if name == "R":
        _relation_slot(args[0], path + (0,))
        return ValueType.PAIR_SET
    if name in ("AND", "OR", "DIFF"):
        for i in range(len(args)):
            expect(i, (ValueType.ENTITY_SET,))
        return ValueType.ENTITY_SET
    if name == "VALUES":
        if all(isinstance(a, (EntityRef, Placeholder)) for a in args):
            return ValueType.ENTITY_SET
        if all(isinstance(a, NumberLiteral) for a in args):
            return ValueType.VALUE_SET
        raise SExprTypeError(
            "VALUES arguments must be all entities or all numbers", path)
    if name == "DISTINCT":
        return expect(0, (ValueType.ENTITY_SET, ValueType.VALUE_SET))
    if name == "IS_TRUE":
        for i in (0, 2):
            if not isinstance(args[i], (EntityRef, Placeholder)):
                raise SExprTypeError("IS_TRUE subject and object must be entities",
                                     path + (i,))
        _relation_slot(args[1], path + (1,))
        return ValueType.BOOLEAN
    if name == "ALL":
        for i in range(len(args)):
            expect(i, (ValueType.BOOLEAN,), ValueType.BOOLEAN)
        return ValueType.BOOLEAN
    if name == "COUNT":
        expect(0, (ValueType.ENTITY_SET, ValueType.VALUE_SET,
                   ValueType.GROUPED_COUNTS))
        return ValueType.INTEGER
    if name == "GROUP_COUNT":
        expect(0, (ValueType.ENTITY_SET,))
        return ValueType.GROUPED_COUNTS
    if name == "GROUP_SUM":
        expect(0, (ValueType.GROUPED_COUNTS,))
        expect(1, (ValueType.GROUPED_COUNTS,))
        return ValueType.GROUPED_COUNTS
    if name in OPTIMIZERS or name == "optimize":
        expect(0, (ValueType.GROUPED_COUNTS,))
        return ValueType.ENTITY_SET
    # comparisons and the compare placeholder
    expect(0, (ValueType.GROUPED_COUNTS,))
    expect(1, (ValueType.INTEGER, ValueType.ENTITY_SET))
    return ValueType.ENTITY_SET


def _relation_slot(node, path) -> None:
    if not isinstance(node, (RelationRef, Placeholder)):
        raise SExprTypeError("expected a relation", path)


# -- core patterns ---------------------------------------------------------
_SKELETONS: Dict[int, SExpr] = {}


def core_skeleton(pattern_id: int) -> SExpr:
    if pattern_id not in _SKELETONS:
        _SKELETONS[pattern_id] = parse(CORE_PATTERNS[pattern_id])
    return _SKELETONS[pattern_id]


def _matches(skeleton: SExpr, e: SExpr) -> bool:
    if not isinstance(skeleton, Function):
        return not isinstance(e, Function)
    if not isinstance(e, Function) or e.name != skeleton.name:
        return False
    if skeleton.name == "VALUES":
        return all(not isinstance(a, Function) for a in e.args)
    if len(e.args) != len(skeleton.args):
        return False
    return all(_matches(s, a) for s, a in zip(skeleton.args, e.args))


def match_core_pattern(e: SExpr) -> Optional[int]:
    """Return the lowest pattern id whose skeleton matches ``e``.

    Wildcards bind single leaves; a ``VALUES`` skeleton binds one or more
    leaves.
    """
    for pattern_id in sorted(CORE_PATTERNS):
        if _matches(core_skeleton(pattern_id), e):
            return pattern_id
    return None
