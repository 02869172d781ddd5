"""
Calibration of drafted cores against the knowledge graph.

A draft coming from the language model is first repaired syntactically,
then every leaf is linked to graph ids by embedding similarity, and the
linked substitutions are probed against the graph until enough non-empty
variants are found.

Classes
-------
Embedder
    Abstract text embedder.
HashingEmbedder
    Character trigram hashing embedder, the default.
EndpointEmbedder
    Embedder backed by an OpenAI compatible ``/embeddings`` route.
Linker
    Label dictionary ranking by cosine similarity.
CalibrationConfig, CalibratedCore, CalibrationResult, CorrectedCore

Functions
---------
correct_syntax(draft, require_core=True)
cached_linker(g, emb)
link_leaf(surface, kind, g, emb, k)
calibrate(draft, g, emb, cfg)
identity_calibrate(draft, g, require_core=True)
"""
import abc
import hashlib
import itertools
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import requests

from config import EMBEDDING_DIM, LLM_API_KEY_ENV, LLM_BASE_URL, LLM_TIMEOUT
from seal.evaluator import SemanticError, UnresolvedReferenceError, evaluate
from seal.kg_store import ENTITY, RELATION, KnowledgeGraph
from seal.sexpr import (ARITY, CORE_PATTERNS, FUNCTIONS, EntityRef, Function,
                        NumberLiteral, Placeholder, RawAtom, RawList,
                        RelationRef, SExpr, SExprSyntaxError, SExprTypeError,
                        core_skeleton, is_core, iter_nodes, make_leaf, parse,
                        read_forest, slot_roles, tokenize, type_check)

logger = logging.getLogger(__name__)

LINK_K_CHOICES = (1, 3)
KEEP_VARIANTS_CHOICES = (1, 3)
MIN_LEAF_RETENTION = 0.5
_VARIADIC = ("AND", "OR", "ALL")
_ATOMIC_ARGS = ("VALUES", "R", "IS_TRUE")
_FUNCTION_NAMES = {name.upper(): name for name in FUNCTIONS}


class CalibrationError(Exception):
    """Exception raised when a draft cannot be turned into a core.

    The ``repairs`` attribute keeps the repair log up to the failure.
    """

    def __init__(self, message: str, repairs: Sequence[str] = ()):
        super().__init__(message)
        self.repairs = list(repairs)


class LinkingError(Exception):
    """Exception raised when a label dictionary is empty."""
    pass


# -- embedders -------------------------------------------------------------
def normalize_label(text: str) -> str:
    return " ".join(text.replace("_", " ").lower().split())


class Embedder(abc.ABC):
    """Text to unit vector."""

    @property
    @abc.abstractmethod
    def dim(self) -> int:
        pass  # pragma: no cover

    @abc.abstractmethod
    def embed(self, text: str) -> np.ndarray:
        pass  # pragma: no cover

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed(t) for t in texts])


class HashingEmbedder(Embedder):
    """Hash character trigrams of the normalized text into a fixed size
    count vector, then L2-normalize it.

    Text too short to hold a trigram embeds to the zero vector.
    """

    def __init__(self, dim: int = EMBEDDING_DIM):
        if dim < 1:
            raise ValueError(f"Embedding dimension must be positive: {dim}")
        self._dim = dim
        self._cache: Dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def _bucket(self, trigram: str) -> int:
        return int(hashlib.md5(trigram.encode("utf8")).hexdigest(), 16) % self._dim

    def embed(self, text: str) -> np.ndarray:
        if text not in self._cache:
            padded = f"#{normalize_label(text)}#"
            vector = np.zeros(self._dim)
            for i in range(len(padded) - 2):
                vector[self._bucket(padded[i:i + 3])] += 1.0
            norm = np.linalg.norm(vector)
            self._cache[text] = vector / norm if norm > 0 else vector
        return self._cache[text]


class EndpointEmbedder(Embedder):
    """Embedder calling ``POST {base_url}/embeddings``.

    Vectors are L2-normalized and cached per text.
    """

    def __init__(self, model: str, base_url: Optional[str] = None,
                 timeout: float = LLM_TIMEOUT, dim: Optional[int] = None):
        self._base_url = (base_url or LLM_BASE_URL or "").rstrip("/")
        if not self._base_url:
            raise ValueError("An embeddings base URL is required")
        self._model = model
        self._timeout = timeout
        self._dim = dim
        self._cache: Dict[str, np.ndarray] = {}
        self._logger = logging.getLogger(self.__class__.__name__)

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = len(self.embed("dimension probe"))
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        headers = {}
        token = os.getenv(LLM_API_KEY_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._logger.debug(f"Embedding request for {len(text)} characters")
        response = requests.post(f"{self._base_url}/embeddings",
                                 json={"model": self._model, "input": text},
                                 headers=headers, timeout=self._timeout)
        response.raise_for_status()
        vector = np.asarray(response.json()["data"][0]["embedding"], dtype=float)
        norm = np.linalg.norm(vector)
        vector = vector / norm if norm > 0 else vector
        self._cache[text] = vector
        return vector


# -- linking ---------------------------------------------------------------
@dataclass(frozen=True)
class LinkCandidate:
    surface: str
    resolved: str
    score: float


class Linker:
    """Ranks the label dictionary of a graph against surface forms.

    Label matrices are computed once per kind. An exact match of the
    normalized surface on a label, or of the surface on an id, scores 1.0.
    """

    def __init__(self, g: KnowledgeGraph, emb: Embedder):
        self._g = g
        self._emb = emb
        self._tables: Dict[str, Tuple[List[str], List[str], np.ndarray]] = {}

    def _table(self, kind: str):
        if kind not in self._tables:
            rows = self._g.all_labels(kind)
            if not rows:
                raise LinkingError(f"The {kind} label dictionary is empty")
            ids = [token for token, _ in rows]
            labels = [normalize_label(label) for _, label in rows]
            self._tables[kind] = (ids, labels, self._emb.embed_many(labels))
        return self._tables[kind]

    def link(self, surface: str, kind: str, k: int) -> List[LinkCandidate]:
        if k < 1:
            raise ValueError(f"k must be at least 1, got {k}")
        ids, labels, matrix = self._table(kind)
        wanted = normalize_label(surface)
        scores = matrix @ self._emb.embed(wanted)
        best: Dict[str, Tuple[bool, float]] = {}
        for token, label, score in zip(ids, labels, scores):
            exact = label == wanted or token == surface
            score = 1.0 if exact else float(min(1.0, max(-1.0, score)))
            if (exact, score) > best.get(token, (False, -2.0)):
                best[token] = (exact, score)
        ranked = sorted(best.items(),
                        key=lambda item: (not item[1][0], -item[1][1], item[0]))
        return [LinkCandidate(surface, token, score)
                for token, (_, score) in ranked[:k]]


_LINKER_CACHE_SIZE = 8
_linkers: "OrderedDict[Tuple[int, int], Tuple[Tuple[int, int, int], Linker]]" = \
    OrderedDict()
_linkers_lock = threading.Lock()


def cached_linker(g: KnowledgeGraph, emb: Embedder) -> Linker:
    """Linker for ``g`` and ``emb``, reused while the graph keeps its size.

    A graph that gained facts, entities or relations gets a fresh linker.
    """
    key = (id(g), id(emb))
    shape = (len(g), len(g.entities), len(g.relations))
    with _linkers_lock:
        entry = _linkers.get(key)
        if entry is not None and entry[0] == shape:
            _linkers.move_to_end(key)
            return entry[1]
        linker = Linker(g, emb)
        _linkers[key] = (shape, linker)
        _linkers.move_to_end(key)
        while len(_linkers) > _LINKER_CACHE_SIZE:
            _linkers.popitem(last=False)
    return linker


def link_leaf(surface: str, kind: str, g: KnowledgeGraph, emb: Embedder,
              k: int) -> List[LinkCandidate]:
    """Top-``k`` ids of ``kind`` for ``surface`` by cosine score.

    Raises
    ------
    LinkingError
        If the dictionary of ``kind`` is empty.
    """
    return cached_linker(g, emb).link(surface, kind, k)


# -- syntax correction -----------------------------------------------------
@dataclass(frozen=True)
class CorrectedCore:
    expr: SExpr
    repairs: Tuple[str, ...] = ()


class _Unfixable(Exception):
    pass


def _balance(tokens: List[Tuple[str, int]], log: List[str]):
    depth = missing_open = 0
    for token, _ in tokens:
        if token == "(":
            depth += 1
        elif token == ")":
            if depth == 0:
                missing_open += 1
            else:
                depth -= 1
    if missing_open:
        log.append(f"inserted {missing_open} '(' at start")
        tokens = [("(", 0)] * missing_open + tokens
    if depth:
        log.append(f"appended {depth} ')' at end")
        tokens = tokens + [(")", 0)] * depth
    return tokens


def _recast(e: SExpr, role: str) -> SExpr:
    if isinstance(e, NumberLiteral) and role != "value":
        e = EntityRef(str(e.value))
    if isinstance(e, EntityRef) and role == "relation":
        return RelationRef(e.name)
    if isinstance(e, RelationRef) and role != "relation":
        return EntityRef(e.name)
    return e


class _ArityFixer:
    """Bottom-up arity repair. Surplus arguments move up to the parent,
    spliced right after the child that gave them up."""

    def __init__(self, log: List[str]):
        self._log = log

    def fix(self, node, role: str = "value"):
        if isinstance(node, RawAtom):
            return [make_leaf(node.text, role)], []
        if not node.items:
            self._log.append("dropped empty list")
            return [], []
        head = node.items[0]
        if isinstance(head, RawList):
            self._log.append("wrapped headless list in AND")
            name, raw_args = "AND", node.items
        else:
            name = _FUNCTION_NAMES.get(head.text.upper())
            raw_args = node.items[1:]
            if name is None:
                self._log.append(f"removed unknown function '{head.text}'")
                out = []
                for raw in raw_args:
                    kept, offered = self.fix(raw)
                    out += kept + offered
                return [], out
            if name != head.text:
                self._log.append(f"normalized function name '{head.text}' to {name}")
        roles = slot_roles(name, len(raw_args), role)
        args: List[SExpr] = []
        for raw, r in zip(raw_args, roles):
            kept, offered = self.fix(raw, r)
            args += kept
            for item in offered:
                if name in _VARIADIC and not isinstance(item, Function):
                    self._log.append(f"dropped stray leaf '{item}' inside {name}")
                else:
                    args.append(item)
        low, high = ARITY[name]
        excess: List[SExpr] = []
        if name in _ATOMIC_ARGS:
            excess = [a for a in args if isinstance(a, Function)]
            args = [a for a in args if not isinstance(a, Function)]
        if high is not None and len(args) > high:
            excess += args[high:]
            args = args[:high]
        roles = slot_roles(name, len(args), role)
        args = [_recast(a, r) for a, r in zip(args, roles)]
        if len(args) < low:
            if name in ("AND", "OR") and len(args) == 1:
                self._log.append(f"unwrapped single argument {name}")
                return [args[0]], excess
            raise _Unfixable(f"{name} is missing arguments")
        return [Function(name, tuple(args))], excess


def _draft_leaves(forest) -> List[Tuple[str, bool]]:
    """Leaf tokens in order, with a flag telling whether they sat under R."""
    out: List[Tuple[str, bool]] = []

    def visit(node, under_r):
        if isinstance(node, RawAtom):
            if node.text.upper() not in _FUNCTION_NAMES:
                out.append((node.text, under_r))
            return
        head = node.items[0] if node.items else None
        is_r = isinstance(head, RawAtom) and head.text.upper() == "R"
        for item in node.items:
            visit(item, is_r)
    for node in forest:
        visit(node, False)
    return out


def _skeleton_slots(skeleton: SExpr, under_r: bool = False) -> List[Tuple[str, bool]]:
    """Leaf slots of a skeleton as ``(role, under_r)`` pairs."""
    if not isinstance(skeleton, Function):
        role = "relation" if isinstance(skeleton, RelationRef) else "entity"
        return [(role, under_r)]
    slots = []
    for arg in skeleton.args:
        slots += _skeleton_slots(arg, skeleton.name == "R")
    return slots


def _fill(skeleton: SExpr, leaves: List[str]) -> SExpr:
    if not isinstance(skeleton, Function):
        token = leaves.pop(0)
        if isinstance(skeleton, RelationRef):
            return RelationRef(token)
        return EntityRef(token)
    return Function(skeleton.name, tuple(_fill(a, leaves) for a in skeleton.args))


def _snap(forest, log: List[str]) -> SExpr:
    leaves = _draft_leaves(forest)
    best = None
    for pattern_id in sorted(CORE_PATTERNS):
        skeleton = core_skeleton(pattern_id)
        slots = _skeleton_slots(skeleton)
        if not leaves or len(slots) > len(leaves):
            continue
        retention = len(slots) / len(leaves)
        if retention < MIN_LEAF_RETENTION:
            continue
        agreement = sum(1 for (_, slot_r), (_, leaf_r) in zip(slots, leaves)
                        if slot_r and leaf_r)
        candidate = _fill(skeleton, [token for token, _ in leaves[:len(slots)]])
        try:
            type_check(candidate)
        except SExprTypeError:
            continue
        key = (retention, agreement, -pattern_id)
        if best is None or key > best[0]:
            best = (key, pattern_id, candidate)
    if best is None:
        raise CalibrationError("no core pattern retains half of the draft leaves",
                               log)
    log.append(f"snapped to core pattern {best[1]}")
    return best[2]


def correct_syntax(draft: str, require_core: bool = True) -> CorrectedCore:
    """Repair a drafted S-expression.

    Repairs run in order: parentheses are balanced by inserting ``(`` at
    the start and ``)`` at the end; arities are fixed bottom-up by moving
    surplus arguments to the parent or dropping them; a result that is
    still not a well typed core is snapped to the core pattern keeping
    most of the draft leaves.

    Parameters
    ----------
    draft : str
        Drafted text.
    require_core : bool, default=True
        Demand a core. When False any well typed expression is accepted
        and no snapping takes place.

    Returns
    -------
    CorrectedCore
        Expression and repair log; an already valid draft has no repairs.

    Raises
    ------
    CalibrationError
        If no repair yields a valid expression.
    """
    log: List[str] = []
    tokens = tokenize(draft)
    if not tokens:
        raise CalibrationError("empty draft", log)
    tokens = _balance(tokens, log)
    try:
        forest = read_forest(tokens)
    except SExprSyntaxError as e:
        raise CalibrationError(f"unreadable draft: {e}", log)

    if len(forest) > 1:
        log.append(f"wrapped {len(forest)} top level expressions in AND")
        root = RawList([RawAtom("AND", 0)] + forest, 0)
    else:
        root = forest[0]
    expr: Optional[SExpr] = None
    try:
        kept, excess = _ArityFixer(log).fix(root)
        for item in excess:
            log.append(f"dropped extra argument '{item}'")
        expr = kept[0] if kept else None
    except _Unfixable as e:
        log.append(f"arity repair failed: {e}")
    if expr is not None:
        try:
            type_check(expr)
            if is_core(expr) or not require_core:
                for step in log:
                    logger.debug(f"repair: {step}")
                return CorrectedCore(expr, tuple(log))
        except SExprTypeError as e:
            log.append(f"type error after repair: {e}")
    if not require_core:
        raise CalibrationError("draft could not be repaired", log)
    expr = _snap(forest, log)
    for step in log:
        logger.debug(f"repair: {step}")
    return CorrectedCore(expr, tuple(log))


# -- variant generation ----------------------------------------------------
@dataclass(frozen=True)
class CalibrationConfig:
    link_k: int = 1
    keep_variants: int = 1
    try_inversion: bool = False
    require_core: bool = True

    def __post_init__(self):
        if self.link_k not in LINK_K_CHOICES:
            raise ValueError(f"link_k must be one of {LINK_K_CHOICES}: {self.link_k}")
        if self.keep_variants not in KEEP_VARIANTS_CHOICES:
            raise ValueError(
                f"keep_variants must be one of {KEEP_VARIANTS_CHOICES}: "
                f"{self.keep_variants}")


@dataclass(frozen=True)
class CalibratedCore:
    expr: SExpr
    provenance: Tuple[LinkCandidate, ...] = ()
    nonempty: bool = True
    score: float = 1.0

    @property
    def min_link_score(self) -> float:
        return min((c.score for c in self.provenance), default=1.0)


class CalibrationResult(list):
    """Calibrated variants in score order, plus the probe count and the
    repair log of the draft."""

    def __init__(self, variants=(), probes: int = 0, repairs: Sequence[str] = ()):
        super().__init__(variants)
        self.probes = probes
        self.repairs = list(repairs)


def _slots_of(e: SExpr) -> List[Tuple[str, str]]:
    seen: Dict[Tuple[str, str], None] = {}
    for node in iter_nodes(e):
        if isinstance(node, Placeholder):
            raise CalibrationError(f"draft holds placeholder '{node.name}'")
        if isinstance(node, EntityRef):
            seen.setdefault((node.name, ENTITY))
        elif isinstance(node, RelationRef):
            seen.setdefault((node.name, RELATION))
    return list(seen)


def substitute(e: SExpr, mapping: Dict[Tuple[str, str], str]) -> SExpr:
    """Replace leaves by their linked ids."""
    if isinstance(e, EntityRef):
        return EntityRef(mapping.get((e.name, ENTITY), e.name))
    if isinstance(e, RelationRef):
        return RelationRef(mapping.get((e.name, RELATION), e.name))
    if isinstance(e, Function):
        return Function(e.name, tuple(substitute(a, mapping) for a in e.args))
    return e


def _joint_score(combo: Sequence[LinkCandidate]) -> float:
    score = 1.0
    for c in combo:
        score *= (c.score + 1.0) / 2.0
    return score


def flip_join(e: SExpr, index: int) -> Tuple[SExpr, int]:
    """Flip the direction of the ``index``-th JOIN in pre-order.

    Returns the new expression and the number of JOIN nodes still to skip
    (negative once the flip happened).
    """
    if not isinstance(e, Function):
        return e, index
    if e.name == "JOIN":
        if index == 0:
            first = e.args[0]
            if isinstance(first, Function) and first.name == "R":
                flipped = first.args[0]
            else:
                flipped = Function("R", (first,))
            return Function("JOIN", (flipped,) + e.args[1:]), -1
        index -= 1
    args = []
    for a in e.args:
        if index < 0:
            args.append(a)
            continue
        a, index = flip_join(a, index)
        args.append(a)
    return Function(e.name, tuple(args)), index


class _Prober:
    def __init__(self, g: KnowledgeGraph):
        self._g = g
        self.probes = 0

    def nonempty(self, e: SExpr) -> bool:
        self.probes += 1
        try:
            return not evaluate(e, self._g).is_empty()
        except (SemanticError, UnresolvedReferenceError) as err:
            logger.debug(f"probe failed for {e}: {err}")
            return False


def calibrate(draft: str, g: KnowledgeGraph, emb: Embedder,
              cfg: CalibrationConfig = CalibrationConfig(),
              linker: Optional[Linker] = None) -> CalibrationResult:
    """Correct, link and probe a drafted core.

    Substitution combinations of the top-``link_k`` candidates of every
    distinct leaf are probed in descending joint score order, ties broken
    by the resolved ids. Probing stops once ``keep_variants`` non-empty
    variants are found. When none is non-empty the best combination is
    returned flagged ``nonempty=False``, after optional single JOIN
    inversion probes.

    Raises
    ------
    CalibrationError
        If the draft cannot be repaired.
    LinkingError
        If a label dictionary is empty.
    """
    corrected = correct_syntax(draft, cfg.require_core)
    repairs = list(corrected.repairs)
    linker = linker or cached_linker(g, emb)
    slots = _slots_of(corrected.expr)
    candidates = [linker.link(surface, kind, cfg.link_k) for surface, kind in slots]
    combos = sorted(itertools.product(*candidates),
                    key=lambda c: (-_joint_score(c), tuple(x.resolved for x in c)))
    prober = _Prober(g)
    variants: List[CalibratedCore] = []
    seen = set()
    for combo in combos:
        mapping = {slot: c.resolved for slot, c in zip(slots, combo)}
        expr = substitute(corrected.expr, mapping)
        if expr in seen:
            continue
        seen.add(expr)
        if prober.nonempty(expr):
            variants.append(CalibratedCore(expr, tuple(combo), True,
                                           _joint_score(combo)))
            if len(variants) >= cfg.keep_variants:
                break
    if not variants:
        best = combos[0]
        expr = substitute(corrected.expr,
                          {slot: c.resolved for slot, c in zip(slots, best)})
        flipped = None
        if cfg.try_inversion:
            index = 0
            while True:
                candidate, rest = flip_join(expr, index)
                if rest >= 0:
                    break
                if prober.nonempty(candidate):
                    flipped = candidate
                    repairs.append(f"inverted relation direction of JOIN {index + 1}")
                    break
                index += 1
        if flipped is not None:
            variants.append(CalibratedCore(flipped, tuple(best), True,
                                           _joint_score(best)))
        else:
            variants.append(CalibratedCore(expr, tuple(best), False,
                                           _joint_score(best)))
    logger.debug(f"Calibrated '{draft}' with {prober.probes} probes, "
                 f"{len(variants)} variant(s)")
    return CalibrationResult(variants, prober.probes, repairs)


def identity_calibrate(draft: str, g: KnowledgeGraph,
                       require_core: bool = True) -> CalibrationResult:
    """Accept a draft as written: strict parsing, no repair, no linking.

    Raises
    ------
    CalibrationError
        If the draft does not parse or, when required, is not a core.
    """
    try:
        expr = parse(draft)
        type_check(expr)
    except (SExprSyntaxError, SExprTypeError) as e:
        raise CalibrationError(f"draft rejected without calibration: {e}")
    if require_core and not is_core(expr):
        raise CalibrationError(f"draft is not a core: {expr}")
    prober = _Prober(g)
    nonempty = prober.nonempty(expr)
    provenance = tuple(LinkCandidate(surface, surface, 1.0)
                       for surface, _ in _slots_of(expr))
    return CalibrationResult([CalibratedCore(expr, provenance, nonempty)],
                             prober.probes)
