"""
Per turn pipeline: question completion, core drafting, calibration, type
prediction, template selection, instantiation, execution and reflection.

Classes
-------
AgentConfig
    Run configuration, loadable from a JSON file.
AgentDeps
    Graph, embedder, gateway, memory and configuration of an agent.
ValidationVerdict
    Outcome of the reflection checks.
TurnTrace
    Everything a turn did, exportable as JSON.
SealAgent
    The orchestrator.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from time import time_ns
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from config import DEFAULT_MAX_RETRIES, DEFAULT_MIN_LINK_SCORE
from seal.calibration import (CalibrationConfig, CalibrationError,
                              CalibrationResult, Embedder, HashingEmbedder,
                              Linker, LinkingError, calibrate,
                              identity_calibrate)
from seal.clients import LlmGatewayError
from seal.evaluator import EvalResult
from seal.gateway import EXEMPLARS_PER_TEMPLATE, draft_cores, predict_type, select_plan
from seal.kg_store import KnowledgeGraph
from seal.memory import (DialogState, DialogTurn, GlobalMemory,
                         record_success, resolve_question, retrieve_exemplars)
from seal.sexpr import (EntityRef, RelationRef, SExpr, SExprTypeError,
                        iter_nodes, placeholders, print_sexpr, type_check)
from seal.sparql import (SparqlConversionError, SparqlExecutionError,
                         SparqlParseError, execute_sparql, parse_sparql_subset,
                         render, to_sparql)
from seal.templates import (CompositionError, PlanError, QuestionType,
                            ReplacementPlan, Template, candidate_templates,
                            compose_out_of_template, learned_template,
                            refine_type, transform)
from seal.utils import load_json_config

logger = logging.getLogger(__name__)

ABLATIONS = ("no_memory", "no_calibration", "no_core_extraction",
             "no_entity_candidates")
LINKING_FAILURE = "linking_failure"
STRUCTURAL_INVALIDITY = "structural_invalidity"
EMPTY_RESULT = "empty_result"
RETRIES_EXHAUSTED = "retries_exhausted"
DIRECT_TEMPLATE_ID = "direct"


@dataclass(frozen=True)
class AgentConfig:
    max_retries: int = DEFAULT_MAX_RETRIES
    link_k: int = 1
    keep_variants: int = 1
    min_link_score: float = DEFAULT_MIN_LINK_SCORE
    ablations: FrozenSet[str] = frozenset()
    try_inversion: bool = False

    def __post_init__(self):
        if not isinstance(self.max_retries, int) or self.max_retries < 0:
            raise ValueError(f"max_retries must be a non negative integer: "
                             f"{self.max_retries!r}")
        if not 0.0 <= float(self.min_link_score) <= 1.0:
            raise ValueError(f"memory.min_link_score must lie in [0, 1]: "
                             f"{self.min_link_score!r}")
        unknown = sorted(set(self.ablations) - set(ABLATIONS))
        if unknown:
            raise ValueError(f"ablations has unknown entries: {unknown}")
        object.__setattr__(self, "ablations", frozenset(self.ablations))
        self.calibration()

    def calibration(self) -> CalibrationConfig:
        return CalibrationConfig(self.link_k, self.keep_variants, self.try_inversion,
                                 require_core=self.core_extraction)

    @property
    def use_memory(self) -> bool:
        return "no_memory" not in self.ablations

    @property
    def use_calibration(self) -> bool:
        return "no_calibration" not in self.ablations

    @property
    def core_extraction(self) -> bool:
        return "no_core_extraction" not in self.ablations

    @property
    def entity_candidates(self) -> bool:
        return "no_entity_candidates" not in self.ablations

    @classmethod
    def from_dict(cls, data: Dict, **overrides) -> "AgentConfig":
        known = {"max_retries", "link_k", "keep_variants", "memory", "ablations",
                 "try_inversion"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown config keys: {unknown}")
        values = {k: data[k] for k in ("max_retries", "link_k", "keep_variants",
                                       "try_inversion") if k in data}
        memory = data.get("memory", {})
        if not isinstance(memory, dict):
            raise ValueError("memory must be an object")
        if "min_link_score" in memory:
            values["min_link_score"] = memory["min_link_score"]
        if "ablations" in data:
            if not isinstance(data["ablations"], list):
                raise ValueError("ablations must be a list")
            values["ablations"] = frozenset(data["ablations"])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def from_file(cls, path: str, **overrides) -> "AgentConfig":
        return cls.from_dict(load_json_config(path), **overrides)


@dataclass
class AgentDeps:
    graph: KnowledgeGraph
    llm: object
    embedder: Embedder = field(default_factory=HashingEmbedder)
    memory: GlobalMemory = field(default_factory=GlobalMemory)
    config: AgentConfig = field(default_factory=AgentConfig)
    linker: Optional[Linker] = None

    def __post_init__(self):
        if self.linker is None:
            self.linker = Linker(self.graph, self.embedder)


@dataclass(frozen=True)
class ValidationVerdict:
    syntactic_ok: bool
    alignment_ok: bool
    nonempty_ok: bool
    cause: Optional[str] = None

    @property
    def passed(self) -> bool:
        return self.syntactic_ok and self.alignment_ok and self.nonempty_ok


def validate(e: Optional[SExpr], g: KnowledgeGraph,
             result: Optional[EvalResult]) -> ValidationVerdict:
    """Reflection checks of a final expression and its result.

    Booleans and counts always count as answers; sets must be non-empty.
    The cause names the first failing check.
    """
    syntactic = e is not None and not placeholders(e)
    if syntactic:
        try:
            type_check(e)
        except SExprTypeError:
            syntactic = False
    aligned = syntactic and all(
        g.is_entity(n.name) if isinstance(n, EntityRef) else g.is_relation(n.name)
        for n in iter_nodes(e) if isinstance(n, (EntityRef, RelationRef)))
    nonempty = result is not None and not result.is_empty()
    cause = None
    if not syntactic:
        cause = STRUCTURAL_INVALIDITY
    elif not aligned:
        cause = LINKING_FAILURE
    elif not nonempty:
        cause = EMPTY_RESULT
    return ValidationVerdict(syntactic, aligned, nonempty, cause)


@dataclass
class TurnTrace:
    question: str
    resolved_question: str = ""
    drafts: List[str] = field(default_factory=list)
    calibrated: List[Dict] = field(default_factory=list)
    predicted_type: Optional[str] = None
    refined_type: Optional[str] = None
    candidate_templates: List[str] = field(default_factory=list)
    template_id: Optional[str] = None
    template_body: Optional[str] = None
    plan: Optional[Dict] = None
    sexpr: Optional[str] = None
    sparql: Optional[str] = None
    result: Optional[Dict] = None
    verdict: Optional[Dict] = None
    retries: int = 0
    rungs: List[str] = field(default_factory=list)
    stage_errors: Dict[str, str] = field(default_factory=dict)
    failure: Optional[str] = None
    ablations: List[str] = field(default_factory=list)
    probes: int = 0
    memory_written: bool = False
    elapsed: float = 0.0

    def to_json(self) -> Dict:
        return asdict(self)


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: str, detail: str):
        super().__init__(f"{stage}: {detail}")
        self.stage = stage
        self.cause = cause


@dataclass
class _Attempt:
    template: Template
    plan: ReplacementPlan
    final: Optional[SExpr] = None
    result: Optional[EvalResult] = None
    verdict: Optional[ValidationVerdict] = None


class _TurnRun:
    """Mutable state of one turn while the correction ladder runs."""

    def __init__(self, trace: TurnTrace, state: DialogState):
        self.trace = trace
        self.state = state
        self.drafts: List[str] = []
        self.calibrations: List[CalibrationResult] = []
        self.variant: List[int] = []
        self.candidates: List[Template] = []
        self.tried: List[str] = []
        self.exemplars: List = []
        self.qtype: Optional[QuestionType] = None
        self.redrafted = False
        self.attempt: Optional[_Attempt] = None

    def cores(self):
        return [c[i] for c, i in zip(self.calibrations, self.variant)]


class SealAgent:
    """
    Answers dialog turns over a knowledge graph.

    Parameters
    ----------
    deps : AgentDeps
        Graph, gateway, embedder, memory and configuration.
    """
    def __init__(self, deps: AgentDeps):
        self._deps = deps
        self._logger = logging.getLogger(self.__class__.__name__)

    @property
    def deps(self) -> AgentDeps:
        return self._deps

    # -- stages -------------------------------------------------------------
    def _draft(self, run: _TurnRun, cause: Optional[str] = None) -> None:
        cfg = self._deps.config
        question = run.trace.resolved_question
        hints = []
        if cfg.entity_candidates:
            hints = sorted(run.state.mentions)
        if cause is not None:
            question = f"{question}\n[PREVIOUS FAILURE] {cause}"
        try:
            run.drafts = draft_cores(question, (), self._deps.llm, hints)
        except LlmGatewayError as e:
            raise _StageFailure("draft", STRUCTURAL_INVALIDITY, str(e))
        run.trace.drafts = list(run.drafts)

    def _calibrate(self, run: _TurnRun) -> None:
        cfg = self._deps.config
        run.calibrations, run.variant = [], []
        run.trace.calibrated = []
        for draft in run.drafts:
            try:
                if cfg.use_calibration:
                    result = calibrate(draft, self._deps.graph, self._deps.embedder,
                                       cfg.calibration(), self._deps.linker)
                else:
                    result = identity_calibrate(draft, self._deps.graph,
                                                cfg.core_extraction)
            except (CalibrationError, LinkingError) as e:
                self._logger.info(f"Draft '{draft}' dropped: {e}")
                run.trace.calibrated.append({"draft": draft, "error": str(e)})
                continue
            run.trace.probes += result.probes
            run.calibrations.append(result)
            run.variant.append(0)
            run.trace.calibrated.append({
                "draft": draft,
                "variants": [{"sexpr": print_sexpr(v.expr), "nonempty": v.nonempty,
                              "score": round(v.score, 6)} for v in result],
                "probes": result.probes,
                "repairs": list(result.repairs),
            })
        if not run.calibrations:
            raise _StageFailure("calibrate", STRUCTURAL_INVALIDITY,
                                "no draft could be calibrated")

    def _type(self, run: _TurnRun) -> None:
        question = run.trace.resolved_question
        try:
            predicted = predict_type(question, None, self._deps.llm)
        except LlmGatewayError as e:
            raise _StageFailure("type", STRUCTURAL_INVALIDITY, str(e))
        run.qtype = refine_type(predicted, question)
        run.trace.predicted_type = predicted.value
        run.trace.refined_type = run.qtype.value

    def _templates(self, run: _TurnRun) -> None:
        cfg = self._deps.config
        memory = self._deps.memory if cfg.use_memory else None
        run.candidates = candidate_templates(run.qtype, memory)
        composed = compose_out_of_template(run.cores(), run.trace.resolved_question)
        if composed is not None:
            extra = learned_template(run.qtype, composed)
            if all(t.text != extra.text for t in run.candidates):
                run.candidates.append(extra)
        run.exemplars = []
        if memory is not None and len(memory):
            run.exemplars = retrieve_exemplars(
                memory, run.qtype, run.trace.resolved_question,
                EXEMPLARS_PER_TEMPLATE * len(run.candidates))
        run.trace.candidate_templates = [t.id for t in run.candidates]

    def _select(self, run: _TurnRun) -> _Attempt:
        remaining = [t for t in run.candidates if t.id not in run.tried]
        if not remaining:
            raise _StageFailure("select", STRUCTURAL_INVALIDITY,
                                "no candidate template left")
        try:
            template, plan = select_plan(run.trace.resolved_question, remaining,
                                         run.cores(), run.exemplars,
                                         self._deps.llm, run.drafts, run.qtype)
        except (PlanError, LlmGatewayError) as e:
            run.tried.append(remaining[0].id)
            raise _StageFailure("select", STRUCTURAL_INVALIDITY, str(e))
        run.tried.append(template.id)
        return _Attempt(template, plan)

    def _direct(self, run: _TurnRun) -> _Attempt:
        core = run.cores()[0]
        template = Template(DIRECT_TEMPLATE_ID, run.qtype or QuestionType.SIMPLE,
                            core.expr)
        return _Attempt(template, ReplacementPlan())

    def _execute(self, run: _TurnRun, attempt: _Attempt) -> _Attempt:
        trace = run.trace
        trace.template_id = attempt.template.id
        trace.template_body = attempt.template.text
        trace.plan = attempt.plan.to_json()
        trace.sexpr = trace.sparql = trace.result = None
        try:
            if attempt.template.id == DIRECT_TEMPLATE_ID:
                attempt.final = attempt.template.body
            else:
                attempt.final = transform(attempt.template, attempt.plan)
            trace.sexpr = print_sexpr(attempt.final)
            text = render(to_sparql(attempt.final))
            trace.sparql = text
            attempt.result = execute_sparql(parse_sparql_subset(text),
                                            self._deps.graph)
            trace.result = attempt.result.to_json()
        except (PlanError, CompositionError, SparqlConversionError,
                SparqlParseError, SparqlExecutionError) as e:
            trace.stage_errors["execute"] = str(e)
            self._logger.info(f"Execution stage failed: {e}")
        attempt.verdict = validate(attempt.final, self._deps.graph, attempt.result)
        trace.verdict = {**asdict(attempt.verdict), "passed": attempt.verdict.passed}
        run.attempt = attempt
        return attempt

    def _rebind(self, run: _TurnRun, attempt: _Attempt, previous) -> _Attempt:
        current = run.cores()
        variables = {}
        for name, value in attempt.plan.variables.items():
            index = next((i for i, c in enumerate(previous) if c is value), None)
            variables[name] = current[index] if index is not None else value
        plan = ReplacementPlan(variables, dict(attempt.plan.constants),
                               dict(attempt.plan.functions))
        if attempt.template.id == DIRECT_TEMPLATE_ID:
            return self._direct(run)
        return _Attempt(attempt.template, plan)

    # -- correction ladder --------------------------------------------------
    def correction_loop(self, run: _TurnRun) -> TurnTrace:
        """Retry a failed turn: next calibrated variant, then next best
        template, then one re-draft with the failure cause, at most
        ``max_retries`` attempts in total."""
        trace = run.trace
        cfg = self._deps.config
        while trace.retries < cfg.max_retries:
            attempt = run.attempt
            if attempt is not None and attempt.verdict is not None \
                    and attempt.verdict.passed:
                break
            cause = (attempt.verdict.cause if attempt is not None
                     and attempt.verdict is not None else STRUCTURAL_INVALIDITY)
            trace.retries += 1
            try:
                rung = self._next_rung(run, attempt, cause)
            except _StageFailure as e:
                trace.stage_errors[e.stage] = str(e)
                trace.rungs.append(f"{e.stage}: failed")
                run.attempt = None
                continue
            if rung is None:
                trace.retries -= 1
                break
        return trace

    def _next_rung(self, run: _TurnRun, attempt: Optional[_Attempt],
                   cause: str) -> Optional[str]:
        trace = run.trace
        if attempt is not None and cause != STRUCTURAL_INVALIDITY:
            for i, calibration in enumerate(run.calibrations):
                if run.variant[i] + 1 < len(calibration):
                    previous = run.cores()
                    run.variant[i] += 1
                    trace.rungs.append(f"variant: core {i + 1} -> variant "
                                       f"{run.variant[i] + 1}")
                    self._logger.info(trace.rungs[-1])
                    self._execute(run, self._rebind(run, attempt, previous))
                    return "variant"
        if run.calibrations and self._deps.config.core_extraction and \
                any(t.id not in run.tried for t in run.candidates):
            trace.rungs.append("template: next best")
            self._logger.info(trace.rungs[-1])
            self._execute(run, self._select(run))
            return "template"
        if not run.redrafted:
            run.redrafted = True
            trace.rungs.append(f"redraft: {cause}")
            self._logger.info(trace.rungs[-1])
            self._draft(run, cause)
            self._calibrate(run)
            if run.qtype is None:
                self._type(run)
            self._plan_and_run(run, fresh=True)
            return "redraft"
        return None

    def _plan_and_run(self, run: _TurnRun, fresh: bool = False) -> None:
        if not self._deps.config.core_extraction:
            self._execute(run, self._direct(run))
            return
        if fresh:
            run.tried = []
            self._templates(run)
        self._execute(run, self._select(run))

    # -- entry point --------------------------------------------------------
    def answer_turn(self, state: DialogState, question: str
                    ) -> Tuple[Optional[EvalResult], TurnTrace]:
        """Answer one turn and update the dialog state.

        Returns
        -------
        tuple
            The verified result, or None with ``trace.failure`` set.
        """
        start = time_ns()
        cfg = self._deps.config
        trace = TurnTrace(question, ablations=sorted(cfg.ablations))
        trace.resolved_question = resolve_question(state, question, self._deps.llm)
        run = _TurnRun(trace, state)
        try:
            self._draft(run)
            self._calibrate(run)
            self._type(run)
            if cfg.core_extraction:
                self._templates(run)
            self._plan_and_run(run)
        except _StageFailure as e:
            trace.stage_errors[e.stage] = str(e)
            self._logger.info(f"Stage failed, entering correction loop: {e}")
        self.correction_loop(run)

        attempt = run.attempt
        passed = attempt is not None and attempt.verdict is not None \
            and attempt.verdict.passed
        g = self._deps.graph
        turn = DialogTurn(question, resolved_question=trace.resolved_question)
        if passed:
            turn.answer = attempt.result.render(g.label_of)
            turn.logical_form = attempt.final
            state.add_turn(turn, attempt.result, g.label_of)
            self._remember(run, attempt)
        else:
            trace.failure = RETRIES_EXHAUSTED
            state.add_turn(turn)
        end = time_ns()
        trace.elapsed = (end - start)/1e9
        self._logger.info(f"Turn answered in: {trace.elapsed}")
        return (attempt.result if passed else None), trace

    def _remember(self, run: _TurnRun, attempt: _Attempt) -> None:
        cfg = self._deps.config
        if not cfg.use_memory or attempt.template.id == DIRECT_TEMPLATE_ID:
            return
        scores = [c.min_link_score for c in run.cores()]
        if min(scores, default=1.0) < cfg.min_link_score:
            self._logger.debug("Verified turn below the link score threshold, "
                               "not remembered")
            return
        surfaces = [self._deps.graph.label_of(n.name) for n in iter_nodes(attempt.final)
                    if isinstance(n, EntityRef)]
        before = len(self._deps.memory)
        record_success(self._deps.memory, run.qtype, run.trace.resolved_question,
                       attempt.final, attempt.template.id, attempt.verdict, surfaces)
        run.trace.memory_written = len(self._deps.memory) > before


def answer_turn(state: DialogState, question: str, deps: AgentDeps
                ) -> Tuple[Optional[EvalResult], TurnTrace]:
    return SealAgent(deps).answer_turn(state, question)


def export_traces(traces: Sequence[Tuple[int, int, TurnTrace]], directory: str) -> None:
    """Write one JSON document per turn as ``dialog-DDDD-turn-TT.json``."""
    os.makedirs(directory, exist_ok=True)
    for dialog, turn, trace in traces:
        path = os.path.join(directory, f"dialog-{dialog:04d}-turn-{turn:02d}.json")
        with open(path, "w", encoding="utf8") as f:
            json.dump(trace.to_json(), f, indent=2, sort_keys=True)
