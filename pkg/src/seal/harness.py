"""
Evaluation harness: dialog files, batch metrics, the corruption benchmark
and the self evolving trend report.
"""
import dataclasses
import json
import logging
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field
from time import time_ns
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from seal.agent import AgentDeps, SealAgent, TurnTrace, export_traces
from seal.calibration import (CalibrationConfig, CalibrationError, Embedder,
                              HashingEmbedder, Linker, LinkingError, calibrate)
from seal.evaluator import EvalResult, evaluate
from seal.kg_store import KnowledgeGraph
from seal.memory import DialogState, GlobalMemory
from seal.sexpr import (EntityRef, Function, SExpr, SExprSyntaxError,
                        SExprTypeError, ValueType, iter_nodes, node_count, parse,
                        type_check)
from seal.synthetic import random_core, surface
from seal.templates import QuestionType

logger = logging.getLogger(__name__)

F1_KINDS = (ValueType.ENTITY_SET, ValueType.VALUE_SET)
_ACCURACY_TYPES = {QuestionType.VERIFY: (ValueType.BOOLEAN,),
                   QuestionType.COUNT: (ValueType.INTEGER,),
                   QuestionType.COMPARE_AND_COUNT: (ValueType.INTEGER,)}
CORRUPTIONS = ("none", "paren_drop", "arity_inflation", "label_typo")
COVERAGE_BUCKETS = ((0.0, 0.2), (0.2, 0.4), (0.4, 0.6), (0.6, 0.8), (0.8, 1.0))
TURN_BUCKETS = ((0, 3), (3, 6), (6, 9), (9, 12), (12, 16))
LENGTH_BUCKETS = ((0, 8), (8, 16), (16, 24), (24, 32), (32, None))
_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


class DialogFileError(ValueError):
    """Exception raised for a malformed dialog file."""
    pass


# -- dialog files ----------------------------------------------------------
@dataclass(frozen=True)
class GoldTurn:
    question: str
    gold: EvalResult
    qtype: QuestionType
    gold_sexpr: Optional[SExpr] = None


@dataclass
class DialogFile:
    dialogs: List[List[GoldTurn]] = field(default_factory=list)

    @classmethod
    def from_json(cls, data) -> "DialogFile":
        """Validate and decode ``{dialogs: [{turns: [...]}]}``.

        Raises
        ------
        DialogFileError
            Naming the dialog and turn of the first problem.
        """
        if not isinstance(data, dict) or not isinstance(data.get("dialogs"), list):
            raise DialogFileError("dialog file needs a 'dialogs' list")
        dialogs = []
        for d, dialog in enumerate(data["dialogs"]):
            turns = dialog.get("turns") if isinstance(dialog, dict) else None
            if not isinstance(turns, list):
                raise DialogFileError(f"dialog {d} needs a 'turns' list")
            dialogs.append([_gold_turn(t, d, i) for i, t in enumerate(turns)])
        return cls(dialogs)

    @classmethod
    def load(cls, path: str) -> "DialogFile":
        try:
            with open(path, encoding="utf8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise DialogFileError(f"{path} is not valid JSON: {e.msg} at line "
                                  f"{e.lineno}")
        return cls.from_json(data)

    def turns(self):
        for d, dialog in enumerate(self.dialogs):
            for i, turn in enumerate(dialog):
                yield d, i, turn

    def __len__(self) -> int:
        return sum(len(d) for d in self.dialogs)


def _gold_turn(data, d: int, i: int) -> GoldTurn:
    where = f"dialog {d} turn {i}"
    if not isinstance(data, dict):
        raise DialogFileError(f"{where} must be an object")
    try:
        question = data["q"]
        qtype = QuestionType(data["qtype"])
        gold = EvalResult.from_json(data["gold"])
    except KeyError as e:
        raise DialogFileError(f"{where} lacks {e}")
    except (ValueError, TypeError) as e:
        raise DialogFileError(f"{where}: {e}")
    if not isinstance(question, str) or not question.strip():
        raise DialogFileError(f"{where} has an empty question")
    allowed = _ACCURACY_TYPES.get(qtype, F1_KINDS)
    if gold.kind not in allowed:
        raise DialogFileError(f"{where}: a {qtype.value} question cannot have a "
                              f"{gold.kind.value} answer")
    gold_sexpr = None
    if data.get("gold_sexpr"):
        try:
            gold_sexpr = parse(data["gold_sexpr"])
            type_check(gold_sexpr)
        except (SExprSyntaxError, SExprTypeError) as e:
            raise DialogFileError(f"{where} gold_sexpr: {e}")
    return GoldTurn(question, gold, qtype, gold_sexpr)


def convert_spice_dialog(turns: Sequence[Dict]) -> List[GoldTurn]:
    """Map a SPICE style turn list onto gold turns.

    USER turns give ``utterance`` as the question and ``question-type`` as
    the type (``Simple Question (Direct)`` and the like map to simple,
    ``Verification (Boolean)`` to verify, ``Quantitative Reasoning (Count)``
    to count, ``Comparative Reasoning (All)`` to compare, ``Comparative
    Reasoning (Count)`` to compare_and_count, ``Quantitative Reasoning
    (All)`` to optimize). The following SYSTEM turn gives the gold answer:
    ``all_entities`` for sets, the utterance for booleans (``YES``/``NO``)
    and counts. A ``sexpr`` field on the SYSTEM turn becomes the gold
    expression.
    """
    mapping = {
        "simple": QuestionType.SIMPLE, "logical": QuestionType.SIMPLE,
        "verification": QuestionType.VERIFY,
        "quantitative reasoning (count)": QuestionType.COUNT,
        "quantitative reasoning (all)": QuestionType.OPTIMIZE,
        "comparative reasoning (count)": QuestionType.COMPARE_AND_COUNT,
        "comparative reasoning (all)": QuestionType.COMPARE,
    }
    out = []
    for i, turn in enumerate(turns):
        if turn.get("speaker") != "USER":
            continue
        label = turn.get("question-type", "").lower()
        qtype = next((t for key, t in mapping.items() if label.startswith(key)),
                     QuestionType.SIMPLE)
        answer = turns[i + 1] if i + 1 < len(turns) else {}
        if qtype is QuestionType.VERIFY:
            gold = EvalResult.boolean(
                answer.get("utterance", "").strip().upper().startswith("YES"))
        elif qtype in (QuestionType.COUNT, QuestionType.COMPARE_AND_COUNT):
            digits = "".join(c for c in answer.get("utterance", "") if c.isdigit())
            gold = EvalResult.integer(int(digits or 0))
        else:
            gold = EvalResult.entity_set(answer.get("all_entities", []))
        gold_sexpr = parse(answer["sexpr"]) if answer.get("sexpr") else None
        out.append(GoldTurn(turn["utterance"], gold, qtype, gold_sexpr))
    return out


# -- metrics ---------------------------------------------------------------
def f1_score(gold: frozenset, predicted: frozenset) -> float:
    if not gold and not predicted:
        return 1.0
    hit = len(gold & predicted)
    if not hit:
        return 0.0
    precision, recall = hit / len(predicted), hit / len(gold)
    return 2 * precision * recall / (precision + recall)


def turn_score(gold: EvalResult, predicted: Optional[EvalResult]) -> float:
    """F1 for set answers, exact match for booleans and counts."""
    if predicted is None:
        return 0.0
    if gold.kind in F1_KINDS:
        if predicted.kind not in F1_KINDS:
            return 0.0
        return f1_score(gold.value, predicted.value)
    return 1.0 if predicted == gold else 0.0


def structure_overlap(produced: SExpr, gold: SExpr) -> float:
    """Multiset overlap of labeled nodes, relative to the gold tree."""
    def labels(e):
        return Counter(n.name if isinstance(n, Function) else str(n)
                       for n in iter_nodes(e))
    wanted = labels(gold)
    common = labels(produced) & wanted
    return sum(common.values()) / sum(wanted.values())


@dataclass
class TurnOutcome:
    dialog: int
    turn: int
    qtype: QuestionType
    score: float
    parsed: bool
    overlap: Optional[float]
    probes: int
    gold_length: Optional[int]
    memory_size: int


@dataclass
class MetricsReport:
    per_type: Dict[str, float]
    counts: Dict[str, int]
    macro_f1: float
    accuracy: float
    overall: float
    parse_success: float
    structure_overlap: Optional[float]
    probes: int
    probes_per_turn: float
    requests: int
    elapsed: float
    ablations: List[str]
    outcomes: List[TurnOutcome] = field(default_factory=list, repr=False)

    def to_json(self, timing: bool = False) -> Dict:
        """Report fields; wall time only with ``timing`` so that reports of
        identical runs compare equal."""
        data = dataclasses.asdict(self)
        data.pop("outcomes")
        if not timing:
            data.pop("elapsed")
        return data

    def to_table(self) -> str:
        rows = [("type", "metric", "n", "score")]
        for name in sorted(self.per_type):
            metric = "AC" if QuestionType(name) in _ACCURACY_TYPES else "F1"
            rows.append((name, metric, str(self.counts[name]),
                         f"{self.per_type[name]:.4f}"))
        rows += [("macro-F1", "", "", f"{self.macro_f1:.4f}"),
                 ("accuracy", "", "", f"{self.accuracy:.4f}"),
                 ("overall", "", "", f"{self.overall:.4f}"),
                 ("parse success", "", "", f"{self.parse_success:.4f}")]
        if self.structure_overlap is not None:
            rows.append(("structure overlap", "", "", f"{self.structure_overlap:.4f}"))
        rows.append(("probes per turn", "", "", f"{self.probes_per_turn:.2f}"))
        return format_table(rows)


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in rows)


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def summarize(outcomes: Sequence[TurnOutcome], probes: int = 0, requests: int = 0,
              elapsed: float = 0.0, ablations: Sequence[str] = ()) -> MetricsReport:
    """Aggregate per turn outcomes.

    Per type scores are means over the turns of the type. Macro-F1 is the
    unweighted mean over the set answer types, accuracy over the boolean
    and count types, overall over every type present.
    """
    by_type: Dict[str, List[float]] = {}
    for o in outcomes:
        by_type.setdefault(o.qtype.value, []).append(o.score)
    per_type = {t: _mean(s) for t, s in by_type.items()}
    f1_types = [s for t, s in per_type.items()
                if QuestionType(t) not in _ACCURACY_TYPES]
    ac_types = [s for t, s in per_type.items() if QuestionType(t) in _ACCURACY_TYPES]
    overlaps = [o.overlap for o in outcomes if o.overlap is not None]
    return MetricsReport(
        per_type=per_type,
        counts={t: len(s) for t, s in by_type.items()},
        macro_f1=_mean(f1_types),
        accuracy=_mean(ac_types),
        overall=_mean(list(per_type.values())),
        parse_success=_mean([1.0 if o.parsed else 0.0 for o in outcomes]),
        structure_overlap=_mean(overlaps) if overlaps else None,
        probes=probes,
        probes_per_turn=probes / len(outcomes) if outcomes else 0.0,
        requests=requests,
        elapsed=elapsed,
        ablations=list(ablations),
        outcomes=list(outcomes),
    )


def run_batch(dialogs: DialogFile, deps: AgentDeps,
              trace_dir: Optional[str] = None,
              on_turn: Optional[Callable[[int, int, TurnTrace], None]] = None
              ) -> MetricsReport:
    """Run every dialog in order and score the answers.

    Global memory is shared across dialogs and flushed after each one.
    """
    start = time_ns()
    agent = SealAgent(deps)
    requests_before = getattr(deps.llm, "requests_made", 0)
    outcomes: List[TurnOutcome] = []
    traces: List[Tuple[int, int, TurnTrace]] = []
    probes = 0
    for d, dialog in enumerate(dialogs.dialogs):
        state = DialogState()
        for i, gold in enumerate(dialog):
            result, trace = agent.answer_turn(state, gold.question)
            probes += trace.probes
            overlap = None
            produced = parse(trace.sexpr) if trace.sexpr else None
            if gold.gold_sexpr is not None:
                overlap = structure_overlap(produced, gold.gold_sexpr) \
                    if produced is not None else 0.0
            outcomes.append(TurnOutcome(
                d, i, gold.qtype, turn_score(gold.gold, result), produced is not None,
                overlap, trace.probes,
                node_count(gold.gold_sexpr) if gold.gold_sexpr is not None else None,
                len(deps.memory)))
            traces.append((d, i, trace))
            if on_turn is not None:
                on_turn(d, i, trace)
        deps.memory.flush()
    if trace_dir is not None:
        export_traces(traces, trace_dir)
    end = time_ns()
    elapsed = (end - start)/1e9
    logger.info(f"Batch of {len(outcomes)} turns run in: {elapsed}")
    return summarize(outcomes, probes,
                     getattr(deps.llm, "requests_made", 0) - requests_before,
                     elapsed, sorted(deps.config.ablations))


# -- corruption benchmark --------------------------------------------------
def _typo(rng: random.Random, word: str) -> str:
    edits = rng.randint(1, 2)
    chars = list(word)
    for _ in range(edits):
        letters = [i for i, c in enumerate(chars) if c.isalpha()]
        if not letters:
            break
        i = rng.choice(letters)
        op = rng.randrange(3)
        if op == 0:
            chars[i] = rng.choice([c for c in _ALPHABET if c != chars[i].lower()])
        elif op == 1 and len(letters) > 3:
            del chars[i]
        else:
            chars.insert(i, rng.choice(_ALPHABET))
    return "".join(chars)


def corrupt(rng: random.Random, e: SExpr, g: KnowledgeGraph, kind: str) -> str:
    """Draft text of ``e`` with one corruption applied.

    ``paren_drop`` removes one closing parenthesis, ``arity_inflation``
    repeats an argument of a random function, ``label_typo`` makes one
    or two character edits to one entity label.
    """
    if kind == "none":
        return surface(e, g)
    if kind == "paren_drop":
        text = surface(e, g)
        positions = [i for i, c in enumerate(text) if c == ")"]
        i = rng.choice(positions)
        return text[:i] + text[i + 1:]
    if kind == "arity_inflation":
        functions = [n for n in iter_nodes(e) if isinstance(n, Function)
                     and n.name != "VALUES"]
        target = rng.choice(functions)
        extra = rng.choice(target.args)

        def inflate(node):
            if node is target:
                return Function(node.name, node.args + (extra,))
            if isinstance(node, Function):
                return Function(node.name, tuple(inflate(a) for a in node.args))
            return node
        return surface(inflate(e), g)
    if kind == "label_typo":
        entities = sorted({n.name for n in iter_nodes(e) if isinstance(n, EntityRef)})
        victim = rng.choice(entities)
        typo = _typo(rng, g.label_of(victim)).replace(" ", "_")
        clean = surface(e, g)
        target = g.label_of(victim).replace(" ", "_")
        return clean.replace(target, typo, 1)
    raise ValueError(f"Corruption unknown: {kind}")


def _recovered(variant, gold: SExpr, g: KnowledgeGraph) -> bool:
    if variant.expr == gold:
        return True
    return variant.nonempty and evaluate(variant.expr, g) == evaluate(gold, g)


def run_corruption_bench(seed: int, g: KnowledgeGraph,
                         emb: Optional[Embedder] = None, cases: int = 200,
                         patterns: Sequence[int] = tuple(range(1, 13))) -> Dict:
    """Recovery rate per corruption class and probe counts per
    ``(link_k, keep_variants)`` cell.

    Gold cores are grounded, hence non-empty. The same corrupted drafts
    are calibrated in every cell; ``case_probes`` keeps the count of
    each draft in draft order, with 0 for a draft that failed.
    """
    rng = random.Random(seed)
    emb = emb or HashingEmbedder()
    linker = Linker(g, emb)
    drawn = [rng.choice(patterns) for _ in range(cases)]
    golds = [random_core(rng, g, pattern_id) for pattern_id in drawn]
    drafts = {kind: [corrupt(rng, e, g, kind) for e in golds] for kind in CORRUPTIONS}
    recovery: Dict[str, float] = {}
    for kind in CORRUPTIONS:
        hits = 0
        for gold, draft in zip(golds, drafts[kind]):
            try:
                result = calibrate(draft, g, emb, CalibrationConfig(), linker)
            except (CalibrationError, LinkingError) as e:
                logger.debug(f"{kind} draft '{draft}' not recovered: {e}")
                continue
            hits += _recovered(result[0], gold, g)
        recovery[kind] = hits / cases
    cells = []
    for link_k in (1, 3):
        for keep in (1, 3):
            counts = []
            for draft in drafts["label_typo"]:
                try:
                    config = CalibrationConfig(link_k, keep)
                    counts.append(calibrate(draft, g, emb, config,
                                            linker).probes)
                except (CalibrationError, LinkingError):
                    counts.append(0)
            cells.append({"link_k": link_k, "keep_variants": keep,
                          "probes": sum(counts), "case_probes": counts,
                          "median_probes": statistics.median(counts)})
    return {"seed": seed, "cases": cases, "patterns": sorted(set(drawn)),
            "recovery": recovery, "probes": cells}


def corruption_table(report: Dict) -> str:
    rows = [("corruption", "recovery")]
    rows += [(k, f"{v:.3f}") for k, v in report["recovery"].items()]
    rows += [("", ""), ("link_k/keep", "probes (median)")]
    rows += [(f"{c['link_k']}/{c['keep_variants']}",
              f"{c['probes']} ({c['median_probes']})") for c in report["probes"]]
    return format_table(rows)


# -- self evolving report --------------------------------------------------
def _bucket_name(low, high) -> str:
    return f">{low}" if high is None else f"{low}-{high}"


def _buckets(outcomes: Sequence[TurnOutcome], key, bounds, percent=False) -> Dict:
    out = {}
    for low, high in bounds:
        last = (low, high) == bounds[-1]
        scores = []
        for o in outcomes:
            value = key(o)
            if value is None:
                continue
            inside = value >= low and (high is None or value < high or
                                       (last and value <= high))
            if inside:
                scores.append(o.score)
        name = (f"{int(low * 100)}-{int(high * 100)}%" if percent
                else _bucket_name(low, high))
        if scores:
            out[name] = {"n": len(scores), "score": _mean(scores)}
    return out


def evolve_buckets(outcomes: Sequence[TurnOutcome]) -> Dict:
    """Coverage is the share of dialogs seen before a turn's dialog."""
    dialogs = max((o.dialog for o in outcomes), default=0) + 1
    return {
        "coverage": _buckets(outcomes, lambda o: o.dialog / dialogs,
                             COVERAGE_BUCKETS, percent=True),
        "turn": _buckets(outcomes, lambda o: o.turn, TURN_BUCKETS),
        "length": _buckets(outcomes, lambda o: o.gold_length, LENGTH_BUCKETS),
    }


def run_evolve_report(stream: DialogFile, deps: AgentDeps) -> Dict:
    """Scores per context coverage, dialog turn and expression length
    bucket, once with a fresh global memory and once without memory."""
    runs = {}
    for name, ablations in (("memory", deps.config.ablations - {"no_memory"}),
                            ("no_memory", deps.config.ablations | {"no_memory"})):
        config = dataclasses.replace(deps.config, ablations=frozenset(ablations))
        run_deps = dataclasses.replace(deps, memory=GlobalMemory(), config=config)
        report = run_batch(stream, run_deps)
        runs[name] = {"overall": report.overall,
                      "buckets": evolve_buckets(report.outcomes)}
    return runs


def evolve_table(report: Dict) -> str:
    rows = [("dimension", "bucket", "memory", "no memory")]
    for dimension in ("coverage", "turn", "length"):
        with_memory = report["memory"]["buckets"][dimension]
        without = report["no_memory"]["buckets"][dimension]
        for name in with_memory:
            rows.append((dimension, name, f"{with_memory[name]['score']:.4f}",
                         f"{without.get(name, {}).get('score', 0.0):.4f}"))
    return format_table(rows)
