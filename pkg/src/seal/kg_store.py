"""
In-memory knowledge graph store.

The store keeps the fact set together with a forward index
``(head, relation) -> tails``, a reverse index ``(tail, relation) -> heads``
and a per relation pair list. Entity and relation label dictionaries feed
the linker.

Classes
-------
Triple
    A single ``(head, relation, tail)`` fact.
KnowledgeGraph
    Fact store with indexes and label dictionaries.

Functions
---------
load_graph(triples_path, labels_path=None)
    Build a graph from a tab separated triple file and optional labels file.
write_graph(g, triples_path, labels_path)
    Serialize a graph back to the same flat file formats.
"""
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

logger = logging.getLogger(__name__)

ENTITY = "entity"
RELATION = "relation"
_KINDS = (ENTITY, RELATION)


class GraphIngestionError(Exception):
    """Exception raised when graph content violates store invariants.

    Raised for dangling label references and for tokens used both as
    entity and relation ids.
    """
    pass


class GraphParseError(GraphIngestionError):
    """Exception raised for a malformed line in a triple or labels file."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


@dataclass(frozen=True, order=True)
class Triple:
    head: str
    relation: str
    tail: str


class KnowledgeGraph:
    """Fact store ``G = (E, R, T)`` with triple indexes and labels.

    Lookups with unknown ids return empty sets. The graph is meant to be
    filled once and then only read, which makes concurrent reads safe.
    """

    def __init__(self):
        self._entities: Dict[str, List[str]] = {}
        self._relations: Dict[str, List[str]] = {}
        self._facts: Set[Triple] = set()
        self._forward: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
        self._reverse: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
        self._by_relation: Dict[str, Set[Tuple[str, str]]] = defaultdict(set)

    # -- construction -----------------------------------------------------
    def _dictionary(self, kind: str) -> Dict[str, List[str]]:
        if kind == ENTITY:
            return self._entities
        if kind == RELATION:
            return self._relations
        raise ValueError(f"Label kind unknown: {kind}")

    def _register(self, token: str, kind: str) -> None:
        if not token or any(c.isspace() for c in token):
            raise GraphIngestionError(f"Invalid {kind} id: {token!r}")
        other = self._relations if kind == ENTITY else self._entities
        if token in other:
            raise GraphIngestionError(
                f"Token '{token}' is used both as entity and relation id"
            )
        self._dictionary(kind).setdefault(token, [])

    def add_entity(self, entity_id: str, label: Optional[str] = None) -> None:
        self._register(entity_id, ENTITY)
        if label is not None:
            self.add_label(entity_id, ENTITY, label)

    def add_relation(self, relation_id: str, label: Optional[str] = None) -> None:
        self._register(relation_id, RELATION)
        if label is not None:
            self.add_label(relation_id, RELATION, label)

    def add_label(self, token: str, kind: str, label: str) -> None:
        """Attach a label to a known id; the first label is canonical.

        Raises
        ------
        GraphIngestionError
            If ``token`` is not in the dictionary of ``kind``.
        """
        dictionary = self._dictionary(kind)
        if token not in dictionary:
            raise GraphIngestionError(
                f"Label '{label}' references unknown {kind} '{token}'"
            )
        labels = dictionary[token]
        if label and label not in labels:
            labels.append(label)

    def add_fact(self, head: str, relation: str, tail: str) -> bool:
        """Insert a fact; returns False when it was already present."""
        self._register(head, ENTITY)
        self._register(relation, RELATION)
        self._register(tail, ENTITY)
        triple = Triple(head, relation, tail)
        if triple in self._facts:
            return False
        self._facts.add(triple)
        self._forward[(head, relation)].add(tail)
        self._reverse[(tail, relation)].add(head)
        self._by_relation[relation].add((head, tail))
        return True

    # -- lookups ----------------------------------------------------------
    def objects_of(self, head: str, relation: str) -> FrozenSet[str]:
        return frozenset(self._forward.get((head, relation), ()))

    def subjects_of(self, relation: str, tail: str) -> FrozenSet[str]:
        return frozenset(self._reverse.get((tail, relation), ()))

    def has_triple(self, s: str, p: str, o: str) -> bool:
        return Triple(s, p, o) in self._facts

    def pairs_of(self, relation: str) -> FrozenSet[Tuple[str, str]]:
        """All ``(head, tail)`` pairs linked by ``relation``."""
        return frozenset(self._by_relation.get(relation, ()))

    def all_labels(self, kind: str) -> List[Tuple[str, str]]:
        """List ``(id, label)`` rows, one per label and alias.

        Ids without any label contribute a single row labeled by the id.
        Rows are ordered by id and then by label position.
        """
        rows = []
        for token, labels in sorted(self._dictionary(kind).items()):
            for label in labels or [token]:
                rows.append((token, label))
        return rows

    def label_of(self, token: str) -> str:
        """Canonical label of an entity or relation id, or the id itself."""
        labels = self._entities.get(token) or self._relations.get(token)
        return labels[0] if labels else token

    def is_entity(self, token: str) -> bool:
        return token in self._entities

    def is_relation(self, token: str) -> bool:
        return token in self._relations

    @property
    def entities(self) -> FrozenSet[str]:
        return frozenset(self._entities)

    @property
    def relations(self) -> FrozenSet[str]:
        return frozenset(self._relations)

    @property
    def facts(self) -> FrozenSet[Triple]:
        return frozenset(self._facts)

    def rebuild_indexes(self):
        """Recompute the indexes from the fact set alone.

        Returns
        -------
        tuple
            ``(forward, reverse)`` plain dicts of frozensets, comparable with
            :meth:`indexes`.
        """
        forward: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
        reverse: Dict[Tuple[str, str], Set[str]] = defaultdict(set)
        for t in self._facts:
            forward[(t.head, t.relation)].add(t.tail)
            reverse[(t.tail, t.relation)].add(t.head)
        return _freeze(forward), _freeze(reverse)

    def indexes(self):
        return _freeze(self._forward), _freeze(self._reverse)

    def __len__(self) -> int:
        return len(self._facts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self._facts == other._facts
                and self._entities == other._entities
                and self._relations == other._relations)

    def __repr__(self) -> str:
        return (f"KnowledgeGraph(entities={len(self._entities)}, "
                f"relations={len(self._relations)}, facts={len(self._facts)})")


def _freeze(index) -> Dict[Tuple[str, str], FrozenSet[str]]:
    return {key: frozenset(values) for key, values in index.items() if values}


def _data_lines(path: str) -> Iterable[Tuple[int, str]]:
    with open(path, encoding="utf8") as f:
        for number, raw in enumerate(f, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield number, line


def load_graph(triples_path: str, labels_path: Optional[str] = None
               ) -> KnowledgeGraph:
    """Load a graph from flat files.

    Parameters
    ----------
    triples_path : str
        UTF-8 file with one ``head<TAB>relation<TAB>tail`` per line.
        Lines starting with ``#`` are comments.
    labels_path : str, optional
        UTF-8 file with ``id<TAB>kind<TAB>label`` rows where kind is
        ``entity`` or ``relation``; repeated rows add aliases.

    Returns
    -------
    KnowledgeGraph
        Graph with indexes built and duplicate lines collapsed.

    Raises
    ------
    GraphParseError
        If a line does not have exactly three tab separated fields.
    GraphIngestionError
        If a label references an id absent from the triples.
    """
    if not os.path.exists(triples_path):
        raise FileNotFoundError(f"Triple file not found: {triples_path}")
    g = KnowledgeGraph()
    loaded = skipped = 0
    for number, line in _data_lines(triples_path):
        fields = line.split("\t")
        if len(fields) != 3 or not all(fields):
            raise GraphParseError(
                f"expected 3 tab separated fields, got {len(fields)}", number
            )
        try:
            inserted = g.add_fact(*fields)
        except GraphIngestionError as e:
            raise GraphParseError(str(e), number)
        if inserted:
            loaded += 1
        else:
            skipped += 1
    if labels_path is not None:
        for number, line in _data_lines(labels_path):
            fields = line.split("\t")
            if len(fields) != 3 or fields[1] not in _KINDS:
                raise GraphParseError(
                    "expected 'id<TAB>entity|relation<TAB>label'", number
                )
            token, kind, label = fields
            dictionary = g._dictionary(kind)
            if token not in dictionary:
                raise GraphIngestionError(
                    f"line {number}: dangling label reference to {kind} '{token}'"
                )
            g.add_label(token, kind, label)
    logger.info(
        f"Loaded {loaded} facts from {triples_path} ({skipped} duplicate lines skipped)"
    )
    return g


def write_graph(g: KnowledgeGraph, triples_path: str, labels_path: str) -> None:
    """Write a graph as sorted triple and labels files (byte stable)."""
    with open(triples_path, "w", encoding="utf8") as f:
        for t in sorted(g.facts):
            f.write(f"{t.head}\t{t.relation}\t{t.tail}\n")
    with open(labels_path, "w", encoding="utf8") as f:
        for kind in _KINDS:
            for token, labels in sorted(g._dictionary(kind).items()):
                for label in labels:
                    f.write(f"{token}\t{kind}\t{label}\n")
