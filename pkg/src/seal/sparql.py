"""
Conversion between S-expressions and a SPARQL subset, plus an embedded
executor for that subset.

The subset covers basic graph patterns, VALUES, UNION, MINUS, FILTER
comparisons, sub-selects, GROUP BY and HAVING over COUNT/SUM/MAX/MIN
aggregates. Constants are bare graph ids or integers; there are no
prefixes, literals other than integers, OPTIONAL or property paths.

Classes
-------
Var, TriplePattern, ValuesBlock, UnionBlock, MinusBlock, SubSelect, Filter
    Elements of a group graph pattern.
Aggregate, Projection, Having
    Select clause parts.
SparqlQuery
    A query of the subset; ``where`` is its WherePattern.

Functions
---------
to_sparql(e)
    Translate a resolved, well typed S-expression.
render(q)
    Golden text rendering.
parse_sparql_subset(text)
    Parse rendered text back into a query.
execute_sparql(q, g)
    Run a query over a knowledge graph.
from_where(w)
    Recover a core from a WHERE pattern.
"""
import enum
import logging
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

from seal.evaluator import (COMPARATORS, EvalResult, SemanticError,
                            join_relation, split_core)
from seal.kg_store import KnowledgeGraph
from seal.sexpr import (COMPARISONS, EntityRef, Function, NumberLiteral,
                        Placeholder, RelationRef, SExpr, SExprTypeError,
                        ValueType, iter_nodes, match_core_pattern, type_check)

logger = logging.getLogger(__name__)

ANSWER_VAR_NAME = "x"
COUNT_VAR_NAME = "c"
OPERATORS = {"LT": "<", "LE": "<=", "GT": ">", "GE": ">=", "EQ": "="}
_OPERATOR_NAMES = {symbol: name for name, symbol in OPERATORS.items()}
AGGREGATES = ("COUNT", "SUM", "MAX", "MIN")
KEYWORDS = frozenset({
    "SELECT", "DISTINCT", "WHERE", "ASK", "VALUES", "UNION", "MINUS",
    "FILTER", "GROUP", "BY", "HAVING", "AS", *AGGREGATES,
})


class SparqlConversionError(Exception):
    """Exception raised when an S-expression has no query in the subset,
    for instance because a leaf is unresolved."""
    pass


class SparqlParseError(ValueError):
    """Exception raised for text outside the subset grammar.

    The ``offset`` attribute is the character offset of the bad token.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class SparqlExecutionError(Exception):
    """Exception raised when a query cannot run, such as a variable that
    is used but never bound."""
    pass


class ShapeUnsupportedError(ValueError):
    """Exception raised when a WHERE pattern is not one of the core
    shapes."""
    pass


# -- query model -----------------------------------------------------------
@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return f"?{self.name}"


Term = Union[Var, str, int]


@dataclass(frozen=True)
class TriplePattern:
    s: Term
    p: str
    o: Term


@dataclass(frozen=True)
class ValuesBlock:
    var: Var
    values: Tuple[Union[str, int], ...]


@dataclass(frozen=True)
class UnionBlock:
    branches: Tuple[Tuple["Element", ...], ...]


@dataclass(frozen=True)
class MinusBlock:
    pattern: Tuple["Element", ...]


@dataclass(frozen=True)
class SubSelect:
    query: "SparqlQuery"


@dataclass(frozen=True)
class Filter:
    left: Var
    op: str
    right: Union[Var, int]


Element = Union[TriplePattern, ValuesBlock, UnionBlock, MinusBlock,
                SubSelect, Filter]
WherePattern = Tuple[Element, ...]


@dataclass(frozen=True)
class Aggregate:
    func: str
    var: Var
    distinct: bool = False


@dataclass(frozen=True)
class Projection:
    expr: Union[Var, Aggregate]
    alias: Optional[Var] = None


@dataclass(frozen=True)
class Having:
    aggregate: Aggregate
    op: str
    value: int


class QueryForm(enum.Enum):
    SELECT_DISTINCT = "SELECT_DISTINCT"
    ASK = "ASK"
    SELECT_COUNT = "SELECT_COUNT"
    SELECT_GROUPED = "SELECT_GROUPED"
    SUBQUERY = "SUBQUERY"


@dataclass(frozen=True)
class SparqlQuery:
    """A query of the subset. An empty projection means ASK."""
    projection: Tuple[Projection, ...]
    where: WherePattern
    distinct: bool = False
    group_by: Optional[Var] = None
    having: Optional[Having] = None
    nested: bool = field(default=False, compare=True)

    @property
    def form(self) -> QueryForm:
        if self.nested:
            return QueryForm.SUBQUERY
        if not self.projection:
            return QueryForm.ASK
        if self.group_by is not None:
            return QueryForm.SELECT_GROUPED
        if len(self.projection) == 1 and isinstance(self.projection[0].expr,
                                                     Aggregate):
            return QueryForm.SELECT_COUNT
        return QueryForm.SELECT_DISTINCT

    @property
    def answer_var(self) -> Optional[Var]:
        for p in self.projection:
            if isinstance(p.expr, Var):
                return p.expr
        return None

    def __str__(self):
        return render(self)


# -- S-expression to query -------------------------------------------------
class _Compiler:
    """Translates expressions with deterministic variable numbering."""

    def __init__(self):
        self._counters: Dict[str, int] = {}

    def fresh(self, prefix: str) -> Var:
        self._counters[prefix] = self._counters.get(prefix, 0) + 1
        return Var(f"{prefix}{self._counters[prefix]}")

    def pattern(self, e: SExpr, v: Var) -> List[Element]:
        """Elements binding ``v`` to the members of entity/value set ``e``."""
        if isinstance(e, EntityRef):
            return [ValuesBlock(v, (e.name,))]
        name, args = e.name, e.args
        if name == "VALUES":
            return [ValuesBlock(v, tuple(
                a.value if isinstance(a, NumberLiteral) else a.name
                for a in args))]
        if name == "JOIN":
            relation, inverse = join_relation(args[0])
            inner = args[1]
            if isinstance(inner, EntityRef):
                other: Term = inner.name
                elements: List[Element] = []
            else:
                other = self.fresh("w")
                elements = self.pattern(inner, other)
            triple = (TriplePattern(other, relation, v) if inverse
                      else TriplePattern(v, relation, other))
            return elements + [triple]
        if name == "AND":
            return [el for a in args for el in self.pattern(a, v)]
        if name == "OR":
            return [UnionBlock(tuple(tuple(self.pattern(a, v)) for a in args))]
        if name == "DIFF":
            return (self.pattern(args[0], v)
                    + [MinusBlock(tuple(self.pattern(args[1], v)))])
        if name == "DISTINCT":
            return self.pattern(args[0], v)
        if name in ("ARGMAX", "ARGMIN"):
            return [SubSelect(self._optimum(name, args[0], v))]
        if name in COMPARISONS:
            return [SubSelect(self._comparison(name, args[0], args[1], v))]
        raise SparqlConversionError(f"{name} does not denote a set")

    def grouped_parts(self, gc: SExpr, key: Var):
        """WHERE elements and aggregate computing ``gc`` grouped by ``key``."""
        if gc.name == "GROUP_COUNT":
            try:
                primary, constraints = split_core(gc.args[0])
            except SemanticError as e:
                raise SparqlConversionError(str(e))
            relation, inverse = join_relation(primary.args[0])
            w = self.fresh("w")
            elements = self.pattern(primary.args[1], w)
            elements.append(TriplePattern(w, relation, key) if inverse
                            else TriplePattern(key, relation, w))
            for c in constraints:
                elements.extend(self.pattern(c, key))
            return elements, Aggregate("COUNT", w, distinct=True)
        if gc.name == "GROUP_SUM":
            n = self.fresh("n")
            branches = tuple((SubSelect(self.rows(g, key, n)),) for g in gc.args)
            return [UnionBlock(branches)], Aggregate("SUM", n)
        raise SparqlConversionError(f"{gc.name} does not denote grouped counts")

    def rows(self, gc: SExpr, key: Var, alias: Var) -> SparqlQuery:
        elements, aggregate = self.grouped_parts(gc, key)
        return SparqlQuery((Projection(key), Projection(aggregate, alias)),
                           tuple(elements), group_by=key, nested=True)

    def _optimum(self, name: str, gc: SExpr, v: Var) -> SparqlQuery:
        n = self.fresh("n")
        per_key = self.rows(gc, v, n)
        k, n2, m = self.fresh("k"), self.fresh("n"), self.fresh("m")
        best = SparqlQuery(
            (Projection(Aggregate("MAX" if name == "ARGMAX" else "MIN", n2), m),),
            (SubSelect(self.rows(gc, k, n2)),), nested=True)
        return SparqlQuery((Projection(v),),
                           (SubSelect(per_key), SubSelect(best), Filter(n, "=", m)),
                           nested=True)

    def _comparison(self, name: str, gc: SExpr, bound: SExpr, v: Var
                    ) -> SparqlQuery:
        op = OPERATORS[name]
        if isinstance(bound, NumberLiteral):
            elements, aggregate = self.grouped_parts(gc, v)
            return SparqlQuery((Projection(v),), tuple(elements), group_by=v,
                               having=Having(aggregate, op, bound.value),
                               nested=True)
        n = self.fresh("n")
        per_key = self.rows(gc, v, n)
        t = self.fresh("t")
        limit = self._threshold(gc, bound, t)
        return SparqlQuery((Projection(v),),
                           (SubSelect(per_key), SubSelect(limit), Filter(n, op, t)),
                           nested=True)

    def _threshold(self, gc: SExpr, bound: SExpr, t: Var) -> SparqlQuery:
        if isinstance(bound, Function) and bound.name == "COUNT":
            return self.count(bound.args[0], t)
        k, n = self.fresh("k"), self.fresh("n")
        keys = SparqlQuery((Projection(k),), tuple(self.pattern(bound, k)),
                           distinct=True, nested=True)
        return SparqlQuery((Projection(Aggregate("SUM", n), t),),
                           (SubSelect(keys), SubSelect(self.rows(gc, k, n))),
                           nested=True)

    def count(self, e: SExpr, alias: Var, nested: bool = True) -> SparqlQuery:
        x = self.fresh("k") if nested else Var(ANSWER_VAR_NAME)
        if type_check(e) is ValueType.GROUPED_COUNTS:
            elements: List[Element] = [SubSelect(self.rows(e, x, self.fresh("n")))]
        else:
            elements = self.pattern(e, x)
        return SparqlQuery((Projection(Aggregate("COUNT", x, distinct=True), alias),),
                           tuple(elements), nested=nested)

    def boolean(self, e: SExpr) -> List[Element]:
        if e.name == "IS_TRUE":
            s, p, o = (a.name for a in e.args)
            return [TriplePattern(s, p, o)]
        return [el for a in e.args for el in self.boolean(a)]


_UNSAFE_ID = re.compile(r"[\s{}()<>=?]|^\.|\.$|^[0-9]+$")


def _check_convertible(e: SExpr) -> ValueType:
    for node in iter_nodes(e):
        if isinstance(node, Placeholder):
            raise SparqlConversionError(f"Unresolved placeholder: {node.name}")
        if isinstance(node, (EntityRef, RelationRef)):
            if _UNSAFE_ID.search(node.name) or node.name in KEYWORDS:
                raise SparqlConversionError(
                    f"Leaf '{node.name}' is not a resolved graph id")
    try:
        return type_check(e)
    except SExprTypeError as err:
        raise SparqlConversionError(f"Expression does not type check: {err}")


def to_sparql(e: SExpr) -> SparqlQuery:
    """Translate a resolved, well typed S-expression.

    Boolean roots become ASK, Integer roots ``SELECT (COUNT(DISTINCT ?x)
    AS ?c)``, set roots ``SELECT DISTINCT ?x`` and grouped count roots a
    grouped select. Comparisons against a number become HAVING clauses,
    other comparisons FILTER over joined sub-selects.

    Raises
    ------
    SparqlConversionError
        For unresolved leaves, pair set roots and bare numbers.
    """
    kind = _check_convertible(e)
    compiler = _Compiler()
    x = Var(ANSWER_VAR_NAME)
    if kind is ValueType.BOOLEAN:
        return SparqlQuery((), tuple(compiler.boolean(e)))
    if kind is ValueType.INTEGER:
        if not (isinstance(e, Function) and e.name == "COUNT"):
            raise SparqlConversionError(f"No query form for a bare number: {e}")
        return compiler.count(e.args[0], Var(COUNT_VAR_NAME), nested=False)
    if kind in (ValueType.ENTITY_SET, ValueType.VALUE_SET):
        return SparqlQuery((Projection(x),), tuple(compiler.pattern(e, x)),
                           distinct=True)
    if kind is ValueType.GROUPED_COUNTS:
        elements, aggregate = compiler.grouped_parts(e, x)
        return SparqlQuery((Projection(x), Projection(aggregate, compiler.fresh("n"))),
                           tuple(elements), group_by=x)
    raise SparqlConversionError("Pair set roots have no single answer variable")


# -- rendering -------------------------------------------------------------
def _term(t: Term) -> str:
    return str(t)


def _aggregate(a: Aggregate) -> str:
    inner = f"DISTINCT {a.var}" if a.distinct else str(a.var)
    return f"{a.func}({inner})"


def _group(elements: Sequence[Element]) -> str:
    if not elements:
        return "{ }"
    return "{ " + " ".join(_element(el) for el in elements) + " }"


def _element(el: Element) -> str:
    if isinstance(el, TriplePattern):
        return f"{_term(el.s)} {el.p} {_term(el.o)} ."
    if isinstance(el, ValuesBlock):
        return f"VALUES {el.var} {{ " + " ".join(str(v) for v in el.values) + " }"
    if isinstance(el, UnionBlock):
        return " UNION ".join(_group(b) for b in el.branches)
    if isinstance(el, MinusBlock):
        return "MINUS " + _group(el.pattern)
    if isinstance(el, SubSelect):
        return "{ " + render(el.query) + " }"
    return f"FILTER ({el.left} {el.op} {_term(el.right)})"


def render(q: SparqlQuery) -> str:
    """Render a query as single-spaced golden text."""
    if not q.projection:
        return "ASK " + _group(q.where)
    parts = ["SELECT"]
    if q.distinct:
        parts.append("DISTINCT")
    for p in q.projection:
        if isinstance(p.expr, Aggregate):
            parts.append(f"({_aggregate(p.expr)} AS {p.alias})")
        else:
            parts.append(str(p.expr))
    parts += ["WHERE", _group(q.where)]
    if q.group_by is not None:
        parts += ["GROUP", "BY", str(q.group_by)]
    if q.having is not None:
        h = q.having
        parts.append(f"HAVING ({_aggregate(h.aggregate)} {h.op} {h.value})")
    return " ".join(parts)


# -- parsing ---------------------------------------------------------------
_TOKEN = re.compile(
    r"\s*(?:(?P<tok>[{}()]|<=|>=|[<>=]|\?[A-Za-z_][A-Za-z0-9_]*|[^\s{}()<>=]+))")


class _SparqlReader:
    def __init__(self, text: str):
        self._tokens: List[Tuple[str, int]] = []
        position = 0
        text = text.rstrip()
        while position < len(text):
            m = _TOKEN.match(text, position)
            if m is None or m.group("tok") is None:
                raise SparqlParseError("unexpected character", position)
            token, start = m.group("tok"), m.start("tok")
            if len(token) > 1 and token.endswith(".") and token[0] != "?":
                self._tokens += [(token[:-1], start), (".", start + len(token) - 1)]
            else:
                self._tokens.append((token, start))
            position = m.end()
        self._i = 0
        self._end = len(text)

    def peek(self, ahead: int = 0) -> Optional[str]:
        j = self._i + ahead
        return self._tokens[j][0] if j < len(self._tokens) else None

    def offset(self) -> int:
        return self._tokens[self._i][1] if self._i < len(self._tokens) else self._end

    def take(self, expected: Optional[str] = None) -> str:
        token = self.peek()
        if token is None:
            raise SparqlParseError("unexpected end of query", self._end)
        if expected is not None and token != expected:
            raise SparqlParseError(f"expected '{expected}', got '{token}'",
                                   self.offset())
        self._i += 1
        return token

    def var(self) -> Var:
        token = self.peek()
        if token is None or not token.startswith("?"):
            raise SparqlParseError(f"expected a variable, got '{token}'",
                                   self.offset())
        self._i += 1
        return Var(token[1:])

    def term(self) -> Term:
        token = self.peek()
        if token is None or token in KEYWORDS or token in "{}()<>=.":
            raise SparqlParseError(f"expected a term, got '{token}'", self.offset())
        self._i += 1
        if token.startswith("?"):
            return Var(token[1:])
        return int(token) if token.isdigit() else token

    def integer(self) -> int:
        token = self.peek()
        if token is None or not token.isdigit():
            raise SparqlParseError(f"expected an integer, got '{token}'",
                                   self.offset())
        self._i += 1
        return int(token)

    def done(self) -> bool:
        return self._i >= len(self._tokens)

    # grammar
    def query(self, nested: bool) -> SparqlQuery:
        if self.peek() == "ASK":
            self.take()
            return SparqlQuery((), self.group(), nested=nested)
        if self.peek() != "SELECT":
            raise SparqlParseError(f"unsupported query form '{self.peek()}'",
                                   self.offset())
        self.take()
        distinct = False
        if self.peek() == "DISTINCT":
            self.take()
            distinct = True
        projection = []
        while self.peek() not in ("WHERE", None):
            if self.peek() == "(":
                self.take()
                aggregate = self.aggregate()
                self.take("AS")
                alias = self.var()
                self.take(")")
                projection.append(Projection(aggregate, alias))
            elif self.peek().startswith("?"):
                projection.append(Projection(self.var()))
            else:
                raise SparqlParseError(
                    f"unsupported projection '{self.peek()}'", self.offset())
        if not projection:
            raise SparqlParseError("empty projection", self.offset())
        self.take("WHERE")
        where = self.group()
        group_by = having = None
        if self.peek() == "GROUP":
            self.take()
            self.take("BY")
            group_by = self.var()
        if self.peek() == "HAVING":
            self.take()
            self.take("(")
            aggregate = self.aggregate()
            symbol = self.take()
            if symbol not in _OPERATOR_NAMES:
                raise SparqlParseError(f"unknown operator '{symbol}'", self.offset())
            having = Having(aggregate, symbol, self.integer())
            self.take(")")
        return SparqlQuery(tuple(projection), where, distinct, group_by, having,
                           nested)

    def aggregate(self) -> Aggregate:
        func = self.take()
        if func not in AGGREGATES:
            raise SparqlParseError(f"unknown aggregate '{func}'", self.offset())
        self.take("(")
        distinct = False
        if self.peek() == "DISTINCT":
            self.take()
            distinct = True
        var = self.var()
        self.take(")")
        return Aggregate(func, var, distinct)

    def group(self) -> WherePattern:
        self.take("{")
        elements: List[Element] = []
        while self.peek() != "}":
            if self.peek() is None:
                raise SparqlParseError("unclosed group", self._end)
            elements.append(self.element())
        self.take("}")
        return tuple(elements)

    def element(self) -> Element:
        token = self.peek()
        if token == "VALUES":
            self.take()
            var = self.var()
            self.take("{")
            values = []
            while self.peek() != "}":
                term = self.term()
                if isinstance(term, Var):
                    raise SparqlParseError("variable inside VALUES", self.offset())
                values.append(term)
            self.take("}")
            if not values:
                raise SparqlParseError("empty VALUES block", self.offset())
            return ValuesBlock(var, tuple(values))
        if token == "MINUS":
            self.take()
            return MinusBlock(self.group())
        if token == "FILTER":
            self.take()
            self.take("(")
            left = self.var()
            symbol = self.take()
            if symbol not in _OPERATOR_NAMES:
                raise SparqlParseError(f"unknown operator '{symbol}'", self.offset())
            is_var = (self.peek() or "").startswith("?")
            right = self.var() if is_var else self.integer()
            self.take(")")
            return Filter(left, symbol, right)
        if token == "{":
            if self.peek(1) in ("SELECT", "ASK"):
                self.take("{")
                query = self.query(nested=True)
                self.take("}")
                return SubSelect(query)
            branches = [self.group()]
            while self.peek() == "UNION":
                self.take()
                branches.append(self.group())
            if len(branches) < 2:
                raise SparqlParseError("nested group without UNION", self.offset())
            return UnionBlock(tuple(branches))
        s = self.term()
        p = self.term()
        if not isinstance(p, str):
            raise SparqlParseError("predicate must be a graph id", self.offset())
        o = self.term()
        self.take(".")
        return TriplePattern(s, p, o)


def parse_sparql_subset(text: str) -> SparqlQuery:
    """Parse text of the subset emitted by :func:`render`.

    Raises
    ------
    SparqlParseError
        For any syntax outside the subset, with its offset.
    """
    reader = _SparqlReader(text)
    query = reader.query(nested=False)
    if not reader.done():
        raise SparqlParseError(f"trailing input '{reader.peek()}'", reader.offset())
    return query


# -- execution -------------------------------------------------------------
Solution = Dict[str, Union[str, int]]


def _bound_vars(elements: Sequence[Element]) -> set:
    names = set()
    for el in elements:
        if isinstance(el, TriplePattern):
            names |= {t.name for t in (el.s, el.o) if isinstance(t, Var)}
        elif isinstance(el, ValuesBlock):
            names.add(el.var.name)
        elif isinstance(el, UnionBlock):
            for branch in el.branches:
                names |= _bound_vars(branch)
        elif isinstance(el, SubSelect):
            for p in el.query.projection:
                names.add((p.alias or p.expr).name)
    return names


def _check_bindings(q: SparqlQuery) -> None:
    bound = _bound_vars(q.where)
    used = []
    for p in q.projection:
        used.append(p.expr if isinstance(p.expr, Var) else p.expr.var)
    if q.group_by is not None:
        used.append(q.group_by)
    if q.having is not None:
        used.append(q.having.aggregate.var)

    def visit(elements):
        for el in elements:
            if isinstance(el, Filter):
                used.append(el.left)
                if isinstance(el.right, Var):
                    used.append(el.right)
            elif isinstance(el, UnionBlock):
                for branch in el.branches:
                    visit(branch)
            elif isinstance(el, MinusBlock):
                visit(el.pattern)
            elif isinstance(el, SubSelect):
                _check_bindings(el.query)
    visit(q.where)
    for var in used:
        if var.name not in bound:
            raise SparqlExecutionError(f"Variable {var} is used but never bound")


class _Engine:
    """Naive nested loop evaluation with bag semantics."""

    def __init__(self, g: KnowledgeGraph):
        self._g = g

    def _value(self, term: Term, mu: Solution):
        if isinstance(term, Var):
            return mu.get(term.name)
        return term

    def _triple(self, tp: TriplePattern, mu: Solution) -> List[Solution]:
        s, o = self._value(tp.s, mu), self._value(tp.o, mu)
        if isinstance(s, int) or isinstance(o, int):
            return []
        if s is not None and o is not None:
            return [mu] if self._g.has_triple(s, tp.p, o) else []
        if s is not None:
            return [{**mu, tp.o.name: t} for t in sorted(self._g.objects_of(s, tp.p))]
        if o is not None:
            return [{**mu, tp.s.name: h}
                    for h in sorted(self._g.subjects_of(tp.p, o))]
        pairs = sorted(self._g.pairs_of(tp.p))
        if tp.s == tp.o:
            return [{**mu, tp.s.name: h} for h, t in pairs if h == t]
        return [{**mu, tp.s.name: h, tp.o.name: t} for h, t in pairs]

    @staticmethod
    def _compatible(a: Solution, b: Solution) -> bool:
        return all(a[k] == b[k] for k in a.keys() & b.keys())

    def group(self, elements: Sequence[Element], solutions: List[Solution]
              ) -> List[Solution]:
        filters = []
        for el in elements:
            if isinstance(el, TriplePattern):
                solutions = [n for mu in solutions for n in self._triple(el, mu)]
            elif isinstance(el, ValuesBlock):
                extended = []
                for mu in solutions:
                    current = mu.get(el.var.name)
                    for value in el.values:
                        if current is None:
                            extended.append({**mu, el.var.name: value})
                        elif current == value:
                            extended.append(mu)
                solutions = extended
            elif isinstance(el, UnionBlock):
                solutions = [n for mu in solutions for branch in el.branches
                             for n in self.group(branch, [mu])]
            elif isinstance(el, MinusBlock):
                removed = self.group(el.pattern, [{}])
                solutions = [mu for mu in solutions if not any(
                    mu.keys() & nu.keys() and self._compatible(mu, nu)
                    for nu in removed)]
            elif isinstance(el, SubSelect):
                rows = self.select(el.query)
                solutions = [{**mu, **row} for mu in solutions for row in rows
                             if self._compatible(mu, row)]
            else:
                filters.append(el)
        for f in filters:
            solutions = [mu for mu in solutions if self._passes(f, mu)]
        return solutions

    def _passes(self, f: Filter, mu: Solution) -> bool:
        left = mu.get(f.left.name)
        right = self._value(f.right, mu)
        if not isinstance(left, int) or not isinstance(right, int):
            return False
        return COMPARATORS[_OPERATOR_NAMES[f.op]](left, right)

    @staticmethod
    def _aggregate(a: Aggregate, solutions: List[Solution]):
        values = [mu[a.var.name] for mu in solutions if a.var.name in mu]
        if a.distinct:
            values = list(OrderedDict.fromkeys(values))
        if a.func == "COUNT":
            return len(values)
        numbers = [v for v in values if isinstance(v, int)]
        if a.func == "SUM":
            return sum(numbers)
        if not numbers:
            return None
        return max(numbers) if a.func == "MAX" else min(numbers)

    def select(self, q: SparqlQuery) -> List[Solution]:
        solutions = self.group(q.where, [{}])
        aggregated = any(isinstance(p.expr, Aggregate) for p in q.projection)
        if q.group_by is not None:
            groups: Dict = OrderedDict()
            for mu in solutions:
                key = mu.get(q.group_by.name)
                if key is not None:
                    groups.setdefault(key, []).append(mu)
            buckets = list(groups.items())
        elif aggregated:
            buckets = [(None, solutions)]
        else:
            buckets = None
        rows: List[Solution] = []
        if buckets is None:
            for mu in solutions:
                rows.append({p.expr.name: mu[p.expr.name] for p in q.projection
                             if p.expr.name in mu})
        else:
            for key, members in buckets:
                if q.having is not None:
                    value = self._aggregate(q.having.aggregate, members)
                    test = COMPARATORS[_OPERATOR_NAMES[q.having.op]]
                    if value is None or not test(value, q.having.value):
                        continue
                row: Solution = {}
                for p in q.projection:
                    if isinstance(p.expr, Aggregate):
                        value = self._aggregate(p.expr, members)
                        if value is not None:
                            row[p.alias.name] = value
                    elif key is not None:
                        row[p.expr.name] = key
                rows.append(row)
        if q.distinct:
            unique = OrderedDict((tuple(sorted(r.items(), key=str)), r) for r in rows)
            rows = list(unique.values())
        return rows


def execute_sparql(q: SparqlQuery, g: KnowledgeGraph) -> EvalResult:
    """Execute a query of the subset over ``g``.

    Returns
    -------
    EvalResult
        Boolean for ASK, Integer for a count, entity or value set for
        SELECT DISTINCT and grouped counts for a grouped select.

    Raises
    ------
    SparqlExecutionError
        If a variable is used but never bound, or the query is nested.
    """
    if q.nested:
        raise SparqlExecutionError("Sub-queries cannot be executed on their own")
    _check_bindings(q)
    engine = _Engine(g)
    form = q.form
    if form is QueryForm.ASK:
        return EvalResult.boolean(bool(engine.group(q.where, [{}])))
    rows = engine.select(q)
    if form is QueryForm.SELECT_COUNT:
        alias = q.projection[0].alias.name
        return EvalResult.integer(rows[0].get(alias, 0) if rows else 0)
    if form is QueryForm.SELECT_GROUPED:
        key = q.answer_var.name
        alias = next(p.alias.name for p in q.projection if p.alias is not None)
        return EvalResult.grouped({r[key]: r[alias] for r in rows
                                   if key in r and alias in r})
    name = q.answer_var.name
    values = {r[name] for r in rows if name in r}
    if values and all(isinstance(v, int) for v in values):
        return EvalResult.value_set(values)
    return EvalResult.entity_set(values)


# -- WHERE to core ---------------------------------------------------------
def _describe(el: Element) -> str:
    return _element(el)


def from_where(w: WherePattern, answer: Var = Var(ANSWER_VAR_NAME)) -> SExpr:
    """Recover the core denoted by a WHERE pattern.

    Triples around the answer variable become JOIN conjuncts in pattern
    order; a variable on the far side of a triple recurses; a VALUES block
    becomes a VALUES node. A single constant triple is an IS_TRUE core.

    Raises
    ------
    ShapeUnsupportedError
        If an element cannot be placed or the result is not one of the
        twelve core shapes.
    """
    elements = list(w)
    for el in elements:
        if not isinstance(el, (TriplePattern, ValuesBlock)):
            raise ShapeUnsupportedError(
                f"shape unsupported: element '{_describe(el)}'")
    if (len(elements) == 1 and isinstance(elements[0], TriplePattern)
            and not any(isinstance(t, Var) for t in (elements[0].s, elements[0].o))):
        tp = elements[0]
        core: SExpr = Function("IS_TRUE", (EntityRef(str(tp.s)), RelationRef(tp.p),
                                           EntityRef(str(tp.o))))
        return core
    used = set()

    def core_of(v: Var, parent: Optional[int]) -> SExpr:
        conjuncts = []
        for i, el in enumerate(elements):
            if i == parent or i in used:
                continue
            if isinstance(el, ValuesBlock):
                if el.var != v:
                    continue
                used.add(i)
                conjuncts.append(Function("VALUES", tuple(
                    NumberLiteral(x) if isinstance(x, int) else EntityRef(x)
                    for x in el.values)))
                continue
            if el.s == v and el.o != v:
                other, inverse = el.o, False
            elif el.o == v and el.s != v:
                other, inverse = el.s, True
            else:
                continue
            used.add(i)
            if isinstance(other, int):
                raise ShapeUnsupportedError(
                    f"shape unsupported: element '{_describe(el)}'")
            relation: SExpr = RelationRef(el.p)
            if inverse:
                relation = Function("R", (relation,))
            arg = core_of(other, i) if isinstance(other, Var) else EntityRef(other)
            conjuncts.append(Function("JOIN", (relation, arg)))
        if not conjuncts:
            raise ShapeUnsupportedError(f"shape unsupported: {v} is never constrained")
        if len(conjuncts) == 1:
            return conjuncts[0]
        return Function("AND", tuple(conjuncts))

    result = core_of(answer, None)
    for i, el in enumerate(elements):
        if i not in used:
            raise ShapeUnsupportedError(
                f"shape unsupported: element '{_describe(el)}'")
    if match_core_pattern(result) is None:
        raise ShapeUnsupportedError(f"shape unsupported: {result}")
    return result
