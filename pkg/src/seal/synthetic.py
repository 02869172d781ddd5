"""
Seeded generators of graphs, expressions and dialogs.

Everything here is driven by a ``random.Random`` instance, iterates over
sorted collections only and is therefore reproducible from a seed.
"""
import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from seal.evaluator import EvalResult, brute_force_eval, eval_grouped
from seal.kg_store import KnowledgeGraph, write_graph
from seal.sexpr import (COMPARISONS, OPTIMIZERS, EntityRef, Function,
                        NumberLiteral, RelationRef, SExpr, ValueType, print_sexpr)
from seal.templates import (QuestionType, ReplacementPlan, template_by_id,
                            transform)

logger = logging.getLogger(__name__)

TYPE_RELATION = "instance_of"
TYPE_RELATION_LABEL = "instance of"
_SYLLABLES = ("ba", "ce", "di", "fo", "gu", "ka", "le", "ro", "sa", "te", "vi",
              "zo", "na", "pe", "lu", "ri", "mo", "ta", "ne", "qui")
_RELATION_WORDS = ("mentor", "founder", "neighbor", "author", "owner", "rival",
                   "sponsor", "student", "partner", "editor", "builder", "heir")
_TYPE_WORDS = ("person", "city", "company", "book", "river", "festival")
_RESERVED_WORDS = {"max", "min", "most", "least", "it", "one"}
_PHRASES = {"GE": "at least", "LE": "at most", "GT": "more than",
            "LT": "fewer than", "EQ": "exactly"}

TRIPLES_FILE = "triples.tsv"
LABELS_FILE = "labels.tsv"
DIALOGS_FILE = "dialogs.json"
GATEWAY_DIR = "gateway"


@dataclass(frozen=True)
class SyntheticSpec:
    """Size of a synthetic suite.

    ``type_mix`` holds relative weights per question type. With ``gated``
    every turn carries a decoy plan answered when no exemplar is shown,
    for use with the exemplar gated gateway.
    """
    n_entities: int = 60
    n_relations: int = 6
    n_dialogs: int = 10
    turns_per_dialog: int = 4
    type_mix: Dict[QuestionType, float] = field(default_factory=lambda: {
        QuestionType.SIMPLE: 2, QuestionType.VERIFY: 1, QuestionType.COUNT: 1,
        QuestionType.COMPARE: 1, QuestionType.COMPARE_AND_COUNT: 1,
        QuestionType.OPTIMIZE: 1})
    gated: bool = False

    def __post_init__(self):
        for name in ("n_entities", "n_relations", "n_dialogs", "turns_per_dialog"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive: {getattr(self, name)}")
        if self.n_relations > len(_RELATION_WORDS):
            raise ValueError(f"n_relations is limited to {len(_RELATION_WORDS)}")
        if not self.type_mix or any(w < 0 for w in self.type_mix.values()) \
                or sum(self.type_mix.values()) <= 0:
            raise ValueError("type_mix needs non negative weights with a positive sum")


# -- graphs ----------------------------------------------------------------
def _name(rng: random.Random, used: set) -> str:
    while True:
        words = []
        for _ in range(2):
            word = "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(2, 3)))
            words.append(word)
        if any(w in _RESERVED_WORDS for w in words):
            continue
        name = " ".join(w.capitalize() for w in words)
        if name not in used:
            used.add(name)
            return name


def random_graph(rng: random.Random, n_entities: int = 60, n_relations: int = 6,
                 facts_per_entity: int = 3) -> KnowledgeGraph:
    """Random labeled graph with ids ``Q<n>`` and ``P<n>``.

    Every entity gets one type through ``instance_of`` and about
    ``facts_per_entity`` outgoing facts.
    """
    g = KnowledgeGraph()
    n_types = min(len(_TYPE_WORDS), max(2, n_entities // 15))
    types = [f"Q{900 + i}" for i in range(n_types)]
    for t, word in zip(types, _TYPE_WORDS):
        g.add_entity(t, word)
    g.add_relation(TYPE_RELATION, TYPE_RELATION_LABEL)
    relations = [f"P{10 + i}" for i in range(n_relations)]
    for r, word in zip(relations, _RELATION_WORDS):
        g.add_relation(r, word)
    used: set = set()
    entities = [f"Q{100 + i}" for i in range(n_entities)]
    for e in entities:
        g.add_entity(e, _name(rng, used))
        g.add_fact(e, TYPE_RELATION, rng.choice(types))
    for e in entities:
        for _ in range(rng.randint(1, 2 * facts_per_entity - 1)):
            other = rng.choice(entities)
            if other != e:
                g.add_fact(e, rng.choice(relations), other)
    return g


def _content_facts(g: KnowledgeGraph):
    return sorted(t for t in g.facts if t.relation != TYPE_RELATION)


def _type_of(g: KnowledgeGraph, entity: str) -> Optional[str]:
    types = sorted(g.objects_of(entity, TYPE_RELATION))
    return types[0] if types else None


# -- expressions -----------------------------------------------------------
def _join(r: str, arg: SExpr, inverse: bool = False) -> Function:
    head = Function("R", (RelationRef(r),)) if inverse else RelationRef(r)
    return Function("JOIN", (head, arg))


def _typed(t: str) -> Function:
    return _join(TYPE_RELATION, EntityRef(t))


def random_core(rng: random.Random, g: KnowledgeGraph, pattern_id: Optional[int] = None
                ) -> SExpr:
    """Core of the given pattern anchored on a random fact of ``g``.

    Every pattern is grounded on facts of ``g`` so that the core is
    non-empty; a graph without a two step path falls back to random
    leaves for pattern 8.
    """
    pattern_id = pattern_id or rng.randint(1, 12)
    facts = _content_facts(g)
    if pattern_id == 8:
        heads = {f.head for f in facts}
        fact = rng.choice([f for f in facts if f.tail in heads] or facts)
    else:
        fact = rng.choice(facts)
    s, r, o = fact.head, fact.relation, fact.tail
    entities = sorted(g.entities)
    ts, to = _type_of(g, s) or s, _type_of(g, o) or o
    if pattern_id == 1:
        return Function("IS_TRUE", (EntityRef(s), RelationRef(r), EntityRef(o)))
    if pattern_id == 2:
        return _join(r, EntityRef(o))
    if pattern_id == 3:
        return _join(r, EntityRef(s), inverse=True)
    if pattern_id == 4:
        return Function("AND", (_join(r, EntityRef(o)), _typed(ts)))
    if pattern_id == 5:
        extra = rng.choice(entities)
        values = Function("VALUES", tuple(EntityRef(x) for x in sorted({o, extra})))
        return Function("AND", (_join(r, values), _typed(ts)))
    if pattern_id == 6:
        return Function("AND", (_join(r, EntityRef(s), inverse=True), _typed(to)))
    if pattern_id == 7:
        values = Function("VALUES", (EntityRef(s),))
        return Function("AND", (_join(r, values, inverse=True), _typed(to)))
    if pattern_id == 8:
        step = rng.choice([f for f in facts if f.head == o] or facts)
        return Function("AND", (_join(r, _join(step.relation, EntityRef(step.tail))),
                                _typed(ts)))
    if pattern_id == 9:
        step = rng.choice([f for f in facts if f.head == s])
        return Function("AND", (_join(r, _join(step.relation, EntityRef(step.tail)),
                                      inverse=True),
                                _typed(to)))
    if pattern_id == 10:
        return Function("AND", (_join(r, EntityRef(o)), _typed(ts), _typed(ts)))
    step = rng.choice([f for f in facts if f.tail == o])
    second = _join(step.relation, EntityRef(step.head), inverse=True)
    if pattern_id == 11:
        return Function("AND", (_join(r, EntityRef(s), inverse=True), second,
                                _typed(to)))
    return Function("AND", (_join(r, EntityRef(s), inverse=True), _typed(to), second))


def _entity_set(rng: random.Random, g: KnowledgeGraph, depth: int) -> SExpr:
    if depth <= 0:
        return random_core(rng, g, rng.choice((2, 3, 4, 6, 7)))
    choice = rng.randrange(5)
    if choice == 0:
        return random_core(rng, g, rng.randint(2, 12))
    if choice == 1:
        return Function("OR", (_entity_set(rng, g, depth - 1),
                               _entity_set(rng, g, depth - 1)))
    if choice == 2:
        return Function("DIFF", (_entity_set(rng, g, depth - 1),
                                 _entity_set(rng, g, depth - 1)))
    if choice == 3:
        gc = _grouped(rng, g, depth - 1)
        bound: SExpr = NumberLiteral(rng.randint(0, 3))
        if rng.random() < 0.3:
            bound = _entity_set(rng, g, 0)
        return Function(rng.choice(COMPARISONS), (gc, bound))
    return Function(rng.choice(OPTIMIZERS), (_grouped(rng, g, depth - 1),))


def _grouped(rng: random.Random, g: KnowledgeGraph, depth: int) -> SExpr:
    core = random_core(rng, g, rng.choice((2, 3, 4, 6, 8)))
    gc = Function("GROUP_COUNT", (core,))
    if depth > 0 and rng.random() < 0.3:
        other = Function("GROUP_COUNT", (random_core(rng, g, rng.choice((2, 3))),))
        return Function("GROUP_SUM", (gc, other))
    return gc


def random_expr(rng: random.Random, g: KnowledgeGraph, depth: int = 2) -> SExpr:
    """Random well typed expression over the ids of ``g``, of any result
    type except pairs."""
    kind = rng.randrange(7)
    if kind == 0:
        return Function("COUNT", (_entity_set(rng, g, depth),))
    if kind == 1:
        return Function("ALL", tuple(random_core(rng, g, 1)
                                     for _ in range(rng.randint(1, 3))))
    if kind == 2:
        return _grouped(rng, g, depth)
    if kind == 3:
        return Function("DISTINCT", (_entity_set(rng, g, depth),))
    if kind == 4:
        return Function("COUNT", (_grouped(rng, g, depth),))
    return _entity_set(rng, g, depth)


# -- dialogs ---------------------------------------------------------------
def surface(e: SExpr, g: KnowledgeGraph) -> str:
    """Draft text of ``e`` with ids written as their labels."""
    def walk(node):
        if isinstance(node, (EntityRef, RelationRef)):
            return g.label_of(node.name).replace(" ", "_")
        if isinstance(node, Function):
            return "(" + " ".join([node.name] + [walk(a) for a in node.args]) + ")"
        return str(node)
    return walk(e)


def _plural(word: str) -> str:
    return word + ("es" if word.endswith(("s", "x")) else "s")


@dataclass
class _Turn:
    question: str
    resolved: str
    qtype: QuestionType
    predicted: QuestionType
    template_id: str
    cores: List[SExpr]
    constants: Dict[str, int]
    functions: Dict[str, str]
    gold_sexpr: SExpr
    gold: EvalResult
    decoy: Optional[Dict] = None

    def plan(self) -> Dict:
        return {"template": self.template_id,
                "variables": {f"x{i + 1}": f"c{i + 1}" for i in range(len(self.cores))},
                "constants": self.constants, "functions": self.functions}


class _DialogBuilder:
    def __init__(self, rng: random.Random, g: KnowledgeGraph, gated: bool):
        self.rng = rng
        self.g = g
        self.gated = gated
        self.facts = _content_facts(g)
        self.label = g.label_of

    def _finish(self, question, qtype, template_id, cores, constants=None,
                functions=None, predicted=None, resolved=None):
        constants, functions = constants or {}, functions or {}
        template = template_by_id(template_id)
        plan = ReplacementPlan({f"x{i + 1}": c for i, c in enumerate(cores)},
                               constants, functions)
        gold_sexpr = transform(template, plan)
        gold = brute_force_eval(gold_sexpr, self.g)
        if gold.is_empty():
            return None
        turn = _Turn(question, resolved or question, qtype, predicted or qtype,
                     template_id, list(cores), constants, functions, gold_sexpr,
                     gold)
        if self.gated and len(cores) > 1:
            decoy_id = {"simple-2": "simple-1", "count-3": "count-1"}[template_id]
            decoy = _Turn.plan(turn)
            decoy.update({"template": decoy_id, "variables": {"x1": "c1"}})
            turn.decoy = decoy
        return turn

    def simple(self, previous: Optional[_Turn]) -> Optional[_Turn]:
        rng, label = self.rng, self.label
        if self.gated:
            a, b = rng.sample(self.facts, 2)
            cores = [_join(a.relation, EntityRef(a.tail)),
                     _join(b.relation, EntityRef(b.tail))]
            q = (f"Which entities have {label(a.relation)} {label(a.tail)} or "
                 f"{label(b.relation)} {label(b.tail)}?")
            return self._finish(q, QuestionType.SIMPLE, "simple-2", cores)
        if previous is not None and previous.gold.kind is ValueType.ENTITY_SET \
                and rng.random() < 0.5:
            turn = self._follow_up(previous)
            if turn is not None:
                return turn
        fact = rng.choice(self.facts)
        if rng.random() < 0.5:
            core = _join(fact.relation, EntityRef(fact.head), inverse=True)
            q = f"What are the {_plural(label(fact.relation))} of {label(fact.head)}?"
        else:
            t = _type_of(self.g, fact.head)
            core = Function("AND", (_join(fact.relation, EntityRef(fact.tail)),
                                    _typed(t)))
            q = (f"Which {label(t)} entities have {label(fact.relation)} "
                 f"{label(fact.tail)}?")
        return self._finish(q, QuestionType.SIMPLE, "simple-1", [core])

    def _follow_up(self, previous: _Turn) -> Optional[_Turn]:
        label = self.label
        core = previous.cores[0]
        # ellipsis after "What are the <rel> of <X>?"
        if previous.template_id == "simple-1" and core.name == "JOIN" \
                and isinstance(core.args[0], Function) and self.rng.random() < 0.5:
            r = core.args[0].args[0].name
            heads = sorted({t.head for t in self.facts if t.relation == r}
                           - {core.args[1].name})
            if heads:
                head = self.rng.choice(heads)
                resolved = previous.resolved.replace(label(core.args[1].name),
                                                     label(head))
                return self._finish(f"And what about {label(head)}?",
                                    QuestionType.SIMPLE, "simple-1",
                                    [_join(r, EntityRef(head), inverse=True)],
                                    resolved=resolved)
        referent = min(previous.gold.value)
        outgoing = [t for t in self.facts if t.head == referent]
        if not outgoing:
            return None
        r = self.rng.choice(outgoing).relation
        question = f"What are the {_plural(label(r))} of that one?"
        resolved = f"What are the {_plural(label(r))} of {label(referent)}?"
        return self._finish(question, QuestionType.SIMPLE, "simple-1",
                            [_join(r, EntityRef(referent), inverse=True)],
                            resolved=resolved)

    def verify(self) -> Optional[_Turn]:
        fact = self.rng.choice(self.facts)
        tail = fact.tail if self.rng.random() < 0.6 else \
            self.rng.choice(sorted(self.g.entities))
        core = Function("IS_TRUE", (EntityRef(fact.head), RelationRef(fact.relation),
                                    EntityRef(tail)))
        label = self.label
        q = f"Does {label(fact.head)} have {label(fact.relation)} {label(tail)}?"
        return self._finish(q, QuestionType.VERIFY, "verify-1", [core])

    def count(self) -> Optional[_Turn]:
        label = self.label
        if self.gated:
            a, b = self.rng.sample(self.facts, 2)
            cores = [_join(a.relation, EntityRef(a.tail)),
                     _join(b.relation, EntityRef(b.tail))]
            q = (f"How many entities have {label(a.relation)} {label(a.tail)} or "
                 f"{label(b.relation)} {label(b.tail)}?")
            return self._finish(q, QuestionType.COUNT, "count-3", cores)
        fact = self.rng.choice(self.facts)
        core = _join(fact.relation, EntityRef(fact.tail))
        q = f"How many entities have {label(fact.relation)} {label(fact.tail)}?"
        return self._finish(q, QuestionType.COUNT, "count-1", [core])

    def _grouping(self):
        fact = self.rng.choice(self.facts)
        t = _type_of(self.g, fact.tail)
        core = _join(fact.relation, _typed(t))
        counts = eval_grouped(core, self.g).counts
        return fact.relation, t, core, counts

    def compare(self, counted: bool) -> Optional[_Turn]:
        label = self.label
        r, t, core, counts = self._grouping()
        if not counts:
            return None
        c = counts[self.rng.choice(sorted(counts))]
        op = self.rng.choice(COMPARISONS)
        n = {"GT": c - 1, "LT": c + 1}.get(op, c)
        if n < 0 or (op == "GT" and n < 1):
            op, n = "GE", c
        phrase = f"{label(r)} {_PHRASES[op]} {n} {_plural(label(t))}"
        if counted:
            q = f"How many entities have {phrase}?"
            return self._finish(q, QuestionType.COMPARE_AND_COUNT,
                                "compare_and_count-1", [core], {"number": n},
                                {"compare": op}, predicted=QuestionType.COMPARE)
        q = f"Which entities have {phrase}?"
        return self._finish(q, QuestionType.COMPARE, "compare-1", [core],
                            {"number": n}, {"compare": op})

    def optimize(self) -> Optional[_Turn]:
        label = self.label
        r, t, core, counts = self._grouping()
        if not counts:
            return None
        op = self.rng.choice(OPTIMIZERS)
        word = "most" if op == "ARGMAX" else "least"
        q = f"Which entity has {label(r)} the {word} {_plural(label(t))}?"
        return self._finish(q, QuestionType.OPTIMIZE, "optimize-1", [core],
                            functions={"optimize": op})

    def turn(self, qtype: QuestionType, previous: Optional[_Turn]) -> _Turn:
        for _ in range(100):
            if qtype is QuestionType.SIMPLE:
                built = self.simple(previous)
            elif qtype is QuestionType.VERIFY:
                built = self.verify()
            elif qtype is QuestionType.COUNT:
                built = self.count()
            elif qtype is QuestionType.OPTIMIZE:
                built = self.optimize()
            else:
                built = self.compare(qtype is QuestionType.COMPARE_AND_COUNT)
            if built is not None:
                return built
        raise RuntimeError(f"Graph too sparse for a {qtype.value} question")


def _allocate(mix: Dict[QuestionType, float], total: int) -> List[QuestionType]:
    weight = sum(mix.values())
    ordered = [t for t in QuestionType if mix.get(t, 0) > 0]
    exact = {t: total * mix[t] / weight for t in ordered}
    counts = {t: int(exact[t]) for t in ordered}
    rest = sorted(ordered, key=lambda t: (-(exact[t] - counts[t]), t.value))
    for t in rest[:total - sum(counts.values())]:
        counts[t] += 1
    return [t for t in ordered for _ in range(counts[t])]


def build_dialogs(rng: random.Random, g: KnowledgeGraph, spec: SyntheticSpec
                  ) -> List[List[_Turn]]:
    mix = dict(spec.type_mix)
    if spec.gated:
        # decoy plans exist for the two core simple and count templates only
        mix = {t: w for t, w in mix.items()
               if t in (QuestionType.SIMPLE, QuestionType.COUNT) and w > 0}
        mix = mix or {QuestionType.SIMPLE: 1.0}
    kinds = _allocate(mix, spec.n_dialogs * spec.turns_per_dialog)
    rng.shuffle(kinds)
    builder = _DialogBuilder(rng, g, spec.gated)
    dialogs = []
    for d in range(spec.n_dialogs):
        turns: List[_Turn] = []
        for qtype in kinds[d * spec.turns_per_dialog:(d + 1) * spec.turns_per_dialog]:
            turns.append(builder.turn(qtype, turns[-1] if turns else None))
        dialogs.append(turns)
    return dialogs


def _block(name: str, body: str) -> str:
    return f"```{name}\n{body}\n```"


def scripted_rules(dialogs: Sequence[Sequence[_Turn]], g: KnowledgeGraph
                   ) -> List[Dict]:
    """Gateway rules answering every turn of ``dialogs`` as a well behaved
    model would."""
    rules: List[Dict] = []
    for turns in dialogs:
        previous = None
        for turn in turns:
            if turn.resolved != turn.question:
                match = [f"USER: {turn.question}"]
                if previous is not None:
                    match.insert(0, f"USER: {previous.resolved}")
                rules.append({"task": "coref", "match": match,
                              "response": _block("question", turn.resolved)})
            key = [f"Question: {turn.resolved}\n"]
            drafts = "\n".join(surface(c, g) for c in turn.cores)
            rules.append({"task": "core_gen", "match": key,
                          "response": _block("cores", drafts)})
            rules.append({"task": "type_pred", "match": key,
                          "response": _block("type", turn.predicted.value)})
            plan = {"task": "plan_gen", "match": key,
                    "response": _block("plan", json.dumps(turn.plan(), sort_keys=True))}
            if turn.decoy is not None:
                plan["fallback"] = _block("plan", json.dumps(turn.decoy,
                                                             sort_keys=True))
            rules.append(plan)
            previous = turn
    return rules


def dialog_document(dialogs: Sequence[Sequence[_Turn]]) -> Dict:
    return {"dialogs": [{"turns": [{
        "q": t.question,
        "gold": t.gold.to_json(),
        "qtype": t.qtype.value,
        "gold_sexpr": print_sexpr(t.gold_sexpr),
    } for t in turns]} for turns in dialogs]}


def gen_synthetic(seed: int, spec: SyntheticSpec, out_dir: str
                  ) -> Tuple[str, str, str]:
    """Write a random graph, dialogs with verified gold answers and the
    scripted gateway rules answering them.

    Returns
    -------
    tuple of str
        Paths of the triple file, the labels file and the dialog file.
        The rules go to ``<out_dir>/gateway/rules.json``.
    """
    rng = random.Random(seed)
    g = random_graph(rng, spec.n_entities, spec.n_relations)
    dialogs = build_dialogs(rng, g, spec)
    os.makedirs(os.path.join(out_dir, GATEWAY_DIR), exist_ok=True)
    triples = os.path.join(out_dir, TRIPLES_FILE)
    labels = os.path.join(out_dir, LABELS_FILE)
    write_graph(g, triples, labels)
    dialog_path = os.path.join(out_dir, DIALOGS_FILE)
    with open(dialog_path, "w", encoding="utf8") as f:
        json.dump(dialog_document(dialogs), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, GATEWAY_DIR, "rules.json"), "w",
              encoding="utf8") as f:
        json.dump(scripted_rules(dialogs, g), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Generated {sum(len(d) for d in dialogs)} turns in {out_dir}")
    return triples, labels, dialog_path
