"""
Reference semantics of S-expressions over a knowledge graph.

Classes
-------
EvalResult
    Tagged result value.
Evaluator
    Index based evaluation, the production path.

Functions
---------
evaluate(e, g, strict=False)
    Evaluate an expression with the graph indexes.
eval_grouped(core, g)
    Grouped witness counts of a core.
brute_force_eval(e, g)
    Independent oracle by exhaustive enumeration, for tests.
"""
import logging
import operator
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Mapping, Tuple

from config import BRUTE_FORCE_MAX_ENTITIES
from seal.kg_store import KnowledgeGraph, Triple
from seal.sexpr import (COMPARISONS, EntityRef, Function, NumberLiteral,
                        Placeholder, RelationRef, SExpr, ValueType, is_core)

logger = logging.getLogger(__name__)

COMPARATORS: Dict[str, Callable[[int, int], bool]] = {
    "LT": operator.lt, "LE": operator.le, "GT": operator.gt,
    "GE": operator.ge, "EQ": operator.eq,
}


class UnresolvedReferenceError(Exception):
    """Exception raised when an expression still holds unresolved leaves.

    Placeholders are always unresolved; in strict mode ids unknown to the
    graph are too.
    """
    pass


class SemanticError(Exception):
    """Exception raised for well typed expressions without a meaning,
    such as grouping a non core argument."""
    pass


class SizeGuardError(Exception):
    """Exception raised when the brute force oracle gets a graph that is
    too large to enumerate."""
    pass


@dataclass(frozen=True)
class EvalResult:
    """Tagged result value.

    ``value`` is a frozenset for the set kinds, a tuple of sorted
    ``(key, count)`` items for grouped counts, a bool or an int.
    """
    kind: ValueType
    value: Any

    @classmethod
    def entity_set(cls, ids: Iterable[str]) -> "EvalResult":
        return cls(ValueType.ENTITY_SET, frozenset(ids))

    @classmethod
    def value_set(cls, values: Iterable[int]) -> "EvalResult":
        return cls(ValueType.VALUE_SET, frozenset(values))

    @classmethod
    def pair_set(cls, pairs: Iterable[Tuple[str, str]]) -> "EvalResult":
        return cls(ValueType.PAIR_SET, frozenset(pairs))

    @classmethod
    def grouped(cls, counts: Mapping[str, int]) -> "EvalResult":
        items = tuple(sorted((k, n) for k, n in counts.items() if n > 0))
        return cls(ValueType.GROUPED_COUNTS, items)

    @classmethod
    def boolean(cls, flag: bool) -> "EvalResult":
        return cls(ValueType.BOOLEAN, bool(flag))

    @classmethod
    def integer(cls, n: int) -> "EvalResult":
        return cls(ValueType.INTEGER, int(n))

    @property
    def counts(self) -> Dict[str, int]:
        if self.kind is not ValueType.GROUPED_COUNTS:
            raise TypeError(f"{self.kind.value} result has no counts")
        return dict(self.value)

    def is_empty(self) -> bool:
        if self.kind in (ValueType.BOOLEAN, ValueType.INTEGER):
            return False
        return len(self.value) == 0

    def render(self, label_of: Callable[[str], str] = str) -> str:
        """Stable display text; sets are sorted by id."""
        if self.kind is ValueType.BOOLEAN:
            return "true" if self.value else "false"
        if self.kind is ValueType.INTEGER:
            return str(self.value)
        if self.kind is ValueType.GROUPED_COUNTS:
            return ", ".join(f"{label_of(k)}: {n}" for k, n in self.value)
        if self.kind is ValueType.PAIR_SET:
            return ", ".join(f"({label_of(a)}, {label_of(b)})"
                             for a, b in sorted(self.value))
        return ", ".join(label_of(str(v)) for v in sorted(self.value))

    def to_json(self) -> Dict[str, Any]:
        if self.kind in (ValueType.ENTITY_SET, ValueType.VALUE_SET):
            value: Any = sorted(self.value)
        elif self.kind is ValueType.PAIR_SET:
            value = [list(p) for p in sorted(self.value)]
        elif self.kind is ValueType.GROUPED_COUNTS:
            value = {k: n for k, n in self.value}
        else:
            value = self.value
        return {"kind": self.kind.value, "value": value}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "EvalResult":
        kind = ValueType(data["kind"])
        value = data["value"]
        if kind is ValueType.ENTITY_SET:
            return cls.entity_set(value)
        if kind is ValueType.VALUE_SET:
            return cls.value_set(value)
        if kind is ValueType.PAIR_SET:
            return cls.pair_set(tuple(p) for p in value)
        if kind is ValueType.GROUPED_COUNTS:
            return cls.grouped(value)
        if kind is ValueType.BOOLEAN:
            return cls.boolean(value)
        return cls.integer(value)


def join_relation(first: SExpr) -> Tuple[str, bool]:
    """Return ``(relation, inverse)`` for the first argument of a JOIN."""
    if isinstance(first, Function) and first.name == "R":
        return first.args[0].name, True
    return first.name, False


def split_core(core: SExpr):
    """Split a core into its primary JOIN and the remaining conjuncts.

    Raises
    ------
    SemanticError
        If the core is not a core or its primary is not a JOIN.
    """
    if not is_core(core):
        raise SemanticError(f"GROUP_COUNT needs a core argument, got {core}")
    conjuncts = core.args if isinstance(core, Function) and core.name == "AND" \
        else (core,)
    primary = conjuncts[0]
    if not (isinstance(primary, Function) and primary.name == "JOIN"):
        raise SemanticError(f"core lacks a JOIN primary: {core}")
    return primary, conjuncts[1:]


def threshold_of(gc: EvalResult, bound: EvalResult) -> int:
    """Threshold of a comparison: an integer, or the summed counts of an
    entity set under the same grouping."""
    if bound.kind is ValueType.INTEGER:
        return bound.value
    counts = gc.counts
    return sum(counts.get(k, 0) for k in bound.value)


class Evaluator:
    """Evaluator over the graph indexes."""

    def __init__(self, g: KnowledgeGraph, strict: bool = False):
        self._g = g
        self._strict = strict

    def _join(self, relation: str, inverse: bool, members: FrozenSet[str]
              ) -> FrozenSet[str]:
        result = set()
        if inverse:
            for s in members:
                result |= self._g.objects_of(s, relation)
        else:
            for o in members:
                result |= self._g.subjects_of(relation, o)
        return frozenset(result)

    def _related(self, key_relation: str, inverse: bool, witness: str
                 ) -> Iterable[str]:
        if inverse:
            return self._g.objects_of(witness, key_relation)
        return self._g.subjects_of(key_relation, witness)

    def _set(self, e: SExpr) -> FrozenSet:
        return self.evaluate(e).value

    def _check_known(self, e) -> None:
        if not self._strict:
            return
        if isinstance(e, EntityRef) and not self._g.is_entity(e.name):
            raise UnresolvedReferenceError(f"Unknown entity id: {e.name}")
        if isinstance(e, RelationRef) and not self._g.is_relation(e.name):
            raise UnresolvedReferenceError(f"Unknown relation id: {e.name}")

    def evaluate(self, e: SExpr) -> EvalResult:
        if isinstance(e, Placeholder):
            raise UnresolvedReferenceError(f"Unresolved placeholder: {e.name}")
        if isinstance(e, EntityRef):
            self._check_known(e)
            return EvalResult.entity_set((e.name,))
        if isinstance(e, NumberLiteral):
            return EvalResult.integer(e.value)
        if isinstance(e, RelationRef):
            raise SemanticError(f"relation '{e.name}' has no value on its own")

        name, args = e.name, e.args
        if name == "JOIN":
            relation, inverse = join_relation(args[0])
            self._check_known(RelationRef(relation))
            return EvalResult.entity_set(
                self._join(relation, inverse, self._set(args[1])))
        if name == "R":
            self._check_known(args[0])
            return EvalResult.pair_set(
                (o, s) for s, o in self._g.pairs_of(args[0].name))
        if name == "AND":
            result = self._set(args[0])
            for a in args[1:]:
                result = result & self._set(a)
            return EvalResult.entity_set(result)
        if name == "OR":
            return EvalResult.entity_set(
                frozenset().union(*(self._set(a) for a in args)))
        if name == "DIFF":
            return EvalResult.entity_set(self._set(args[0]) - self._set(args[1]))
        if name == "VALUES":
            if all(isinstance(a, NumberLiteral) for a in args):
                return EvalResult.value_set(a.value for a in args)
            for a in args:
                self._check_known(a)
            return EvalResult.entity_set(a.name for a in args)
        if name == "DISTINCT":
            return self.evaluate(args[0])
        if name == "IS_TRUE":
            for a in args:
                self._check_known(a)
            return EvalResult.boolean(
                self._g.has_triple(args[0].name, args[1].name, args[2].name))
        if name == "ALL":
            return EvalResult.boolean(all(self.evaluate(a).value for a in args))
        if name == "COUNT":
            return EvalResult.integer(len(self.evaluate(args[0]).value))
        if name == "GROUP_COUNT":
            return self.grouped(args[0])
        if name == "GROUP_SUM":
            left = self.evaluate(args[0]).counts
            right = self.evaluate(args[1]).counts
            return EvalResult.grouped({
                k: left.get(k, 0) + right.get(k, 0)
                for k in set(left) | set(right)})
        if name in ("ARGMAX", "ARGMIN"):
            counts = self.evaluate(args[0]).counts
            if not counts:
                return EvalResult.entity_set(())
            best = (max if name == "ARGMAX" else min)(counts.values())
            return EvalResult.entity_set(k for k, n in counts.items() if n == best)
        if name in COMPARISONS:
            gc = self.evaluate(args[0])
            limit = threshold_of(gc, self.evaluate(args[1]))
            compare = COMPARATORS[name]
            return EvalResult.entity_set(
                k for k, n in gc.value if compare(n, limit))
        raise SemanticError(f"Function '{name}' cannot be evaluated")

    def grouped(self, core: SExpr) -> EvalResult:
        primary, constraints = split_core(core)
        relation, inverse = join_relation(primary.args[0])
        witnesses = self._set(primary.args[1])
        counts: Dict[str, int] = {}
        for w in witnesses:
            for k in self._related(relation, inverse, w):
                counts[k] = counts.get(k, 0) + 1
        for c in constraints:
            allowed = self._set(c)
            counts = {k: n for k, n in counts.items() if k in allowed}
        return EvalResult.grouped(counts)


class _Enumerator:
    """Oracle semantics restated over a scan of the fact list.

    Nothing here goes through an index or through :class:`Evaluator`; each
    function is computed from its definition.
    """

    _TESTS: Dict[str, Callable[[int, int], bool]] = {
        "LT": lambda n, t: n < t, "LE": lambda n, t: n <= t,
        "GT": lambda n, t: n > t, "GE": lambda n, t: n >= t,
        "EQ": lambda n, t: n == t,
    }

    def __init__(self, g: KnowledgeGraph):
        self._facts: List[Triple] = list(g.facts)

    @staticmethod
    def _direction(first: SExpr) -> Tuple[str, bool]:
        if isinstance(first, Function):
            return first.args[0].name, True
        return first.name, False

    def _members(self, e: SExpr) -> FrozenSet:
        return self.run(e).value

    def _table(self, e: SExpr) -> Dict[str, int]:
        return dict(self.run(e).value)

    def run(self, e: SExpr) -> EvalResult:
        if isinstance(e, Placeholder):
            raise UnresolvedReferenceError(f"Unresolved placeholder: {e.name}")
        if isinstance(e, EntityRef):
            return EvalResult.entity_set([e.name])
        if isinstance(e, NumberLiteral):
            return EvalResult.integer(e.value)
        if isinstance(e, RelationRef):
            raise SemanticError(f"relation '{e.name}' has no value on its own")
        if e.name in self._TESTS:
            return self._compare(e.name, *e.args)
        if e.name in ("ARGMAX", "ARGMIN"):
            return self._optimize(e.name == "ARGMAX", e.args[0])
        rule = getattr(self, f"_rule_{e.name.lower()}", None)
        if rule is None:
            raise SemanticError(f"Function '{e.name}' cannot be evaluated")
        return rule(*e.args)

    def _rule_join(self, first, target):
        relation, inverse = self._direction(first)
        targets = self._members(target)
        if inverse:
            found = [f.tail for f in self._facts
                     if f.relation == relation and f.head in targets]
        else:
            found = [f.head for f in self._facts
                     if f.relation == relation and f.tail in targets]
        return EvalResult.entity_set(found)

    def _rule_r(self, relation):
        return EvalResult.pair_set([(f.tail, f.head) for f in self._facts
                                    if f.relation == relation.name])

    def _rule_and(self, first, *rest):
        others = [self._members(a) for a in rest]
        return EvalResult.entity_set(
            x for x in self._members(first) if all(x in o for o in others))

    def _rule_or(self, *args):
        return EvalResult.entity_set(x for a in args for x in self._members(a))

    def _rule_diff(self, kept, removed):
        gone = self._members(removed)
        return EvalResult.entity_set(x for x in self._members(kept) if x not in gone)

    def _rule_values(self, *args):
        if all(isinstance(a, NumberLiteral) for a in args):
            return EvalResult.value_set([a.value for a in args])
        return EvalResult.entity_set([a.name for a in args])

    def _rule_distinct(self, arg):
        return self.run(arg)

    def _rule_is_true(self, s, p, o):
        wanted = (s.name, p.name, o.name)
        return EvalResult.boolean(any((f.head, f.relation, f.tail) == wanted
                                      for f in self._facts))

    def _rule_all(self, *args):
        return EvalResult.boolean(not [a for a in args if not self.run(a).value])

    def _rule_count(self, arg):
        return EvalResult.integer(sum(1 for _ in self.run(arg).value))

    def _rule_group_count(self, core):
        if not is_core(core):
            raise SemanticError(f"GROUP_COUNT needs a core argument, got {core}")
        conjuncts = core.args if isinstance(core, Function) and core.name == "AND" \
            else (core,)
        primary = conjuncts[0]
        if not (isinstance(primary, Function) and primary.name == "JOIN"):
            raise SemanticError(f"core lacks a JOIN primary: {core}")
        relation, inverse = self._direction(primary.args[0])
        witnesses = self._members(primary.args[1])
        allowed = [self._members(c) for c in conjuncts[1:]]
        seen = set()
        for f in self._facts:
            if f.relation != relation:
                continue
            key, witness = (f.tail, f.head) if inverse else (f.head, f.tail)
            if witness in witnesses and all(key in a for a in allowed):
                seen.add((key, witness))
        return EvalResult.grouped(Counter(key for key, _ in seen))

    def _rule_group_sum(self, left, right):
        return EvalResult.grouped(Counter(self._table(left))
                                  + Counter(self._table(right)))

    def _optimize(self, largest: bool, arg):
        table = self._table(arg)
        beaten = (lambda m, n: m > n) if largest else (lambda m, n: m < n)
        return EvalResult.entity_set(
            k for k, n in table.items()
            if not any(beaten(m, n) for m in table.values()))

    def _compare(self, name, grouped, bound):
        table = self._table(grouped)
        limit = self.run(bound)
        if limit.kind is ValueType.INTEGER:
            threshold = limit.value
        else:
            threshold = sum(n for k, n in table.items() if k in limit.value)
        test = self._TESTS[name]
        return EvalResult.entity_set(k for k, n in table.items()
                                     if test(n, threshold))


def evaluate(e: SExpr, g: KnowledgeGraph, strict: bool = False) -> EvalResult:
    """Evaluate ``e`` over ``g``.

    Parameters
    ----------
    e : SExpr
        A well typed expression whose leaves are graph ids.
    g : KnowledgeGraph
        Graph to evaluate against.
    strict : bool, default=False
        Raise on ids unknown to the graph instead of treating them as
        matching nothing.

    Returns
    -------
    EvalResult
        Result tagged with the expression's type.

    Raises
    ------
    UnresolvedReferenceError
        For placeholders, or unknown ids in strict mode.
    SemanticError
        For GROUP_COUNT over a non core or a core without a JOIN primary.
    """
    return Evaluator(g, strict).evaluate(e)


def eval_grouped(core: SExpr, g: KnowledgeGraph) -> EvalResult:
    """Grouped witness counts of ``core``.

    The first conjunct of the core is the primary ``(JOIN r X)`` or
    ``(JOIN (R r) X)``. Each key satisfying the other conjuncts maps to
    the number of members of ``X`` the primary relates it to. Keys with
    no witness are omitted.
    """
    return Evaluator(g).grouped(core)


def brute_force_eval(e: SExpr, g: KnowledgeGraph) -> EvalResult:
    """Evaluate by exhaustive enumeration, without any index.

    Raises
    ------
    SizeGuardError
        If the graph has more than ``BRUTE_FORCE_MAX_ENTITIES`` entities.
    """
    if len(g.entities) > BRUTE_FORCE_MAX_ENTITIES:
        raise SizeGuardError(
            f"Brute force evaluation is limited to {BRUTE_FORCE_MAX_ENTITIES}"
            f" entities, graph has {len(g.entities)}")
    return _Enumerator(g).run(e)
