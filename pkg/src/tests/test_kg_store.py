import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seal.kg_store import (ENTITY, RELATION, GraphIngestionError, GraphParseError,
                           KnowledgeGraph, load_graph, write_graph)


@pytest.fixture
def graph():
    g = KnowledgeGraph()
    g.add_fact("Q1", "P1", "Q2")
    g.add_fact("Q1", "P1", "Q3")
    g.add_fact("Q4", "P2", "Q2")
    g.add_label("Q1", ENTITY, "Ludovico")
    g.add_label("Q1", ENTITY, "Ludovico II")
    g.add_label("P1", RELATION, "child")
    return g


def test_indexes(graph):
    assert graph.objects_of("Q1", "P1") == {"Q2", "Q3"}
    assert graph.subjects_of("P1", "Q2") == {"Q1"}
    assert graph.pairs_of("P2") == {("Q4", "Q2")}
    assert graph.has_triple("Q1", "P1", "Q3")
    assert not graph.has_triple("Q3", "P1", "Q1")
    assert len(graph) == 3


def test_unknown_lookups_are_empty(graph):
    assert graph.objects_of("Q99", "P1") == frozenset()
    assert graph.subjects_of("P99", "Q2") == frozenset()
    assert graph.pairs_of("P99") == frozenset()


def test_duplicate_fact(graph):
    assert graph.add_fact("Q1", "P1", "Q2") is False
    assert len(graph) == 3


def test_labels(graph):
    assert graph.label_of("Q1") == "Ludovico"
    assert graph.label_of("Q2") == "Q2"
    assert graph.all_labels(ENTITY)[:2] == [("Q1", "Ludovico"), ("Q1", "Ludovico II")]
    assert ("Q2", "Q2") in graph.all_labels(ENTITY)
    assert graph.all_labels(RELATION) == [("P1", "child"), ("P2", "P2")]


def test_invariant_violations(graph):
    with pytest.raises(GraphIngestionError, match="both as entity and relation"):
        graph.add_fact("P1", "P2", "Q1")
    with pytest.raises(GraphIngestionError, match="unknown entity"):
        graph.add_label("Q99", ENTITY, "nobody")
    with pytest.raises(GraphIngestionError, match="Invalid entity id"):
        graph.add_entity("two words")
    with pytest.raises(ValueError, match="Label kind unknown"):
        graph.add_label("Q1", "literal", "x")


def test_load_graph(tmp_path):
    triples = tmp_path / "triples.tsv"
    triples.write_text("# comment\nQ1\tP1\tQ2\n\nQ1\tP1\tQ2\nQ2\tP1\tQ3\n")
    labels = tmp_path / "labels.tsv"
    labels.write_text("Q1\tentity\tFirst\nP1\trelation\tnext\n")
    g = load_graph(str(triples), str(labels))
    assert len(g) == 2
    assert g.label_of("Q1") == "First"
    assert g.label_of("P1") == "next"


def test_load_graph_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_graph(str(tmp_path / "none.tsv"))
    triples = tmp_path / "triples.tsv"
    triples.write_text("Q1\tP1\tQ2\nQ1 P1 Q2\n")
    with pytest.raises(GraphParseError, match="line 2"):
        load_graph(str(triples))
    triples.write_text("Q1\tP1\tQ2\n")
    labels = tmp_path / "labels.tsv"
    labels.write_text("Q9\tentity\tGhost\n")
    with pytest.raises(GraphIngestionError, match="dangling label reference"):
        load_graph(str(triples), str(labels))
    labels.write_text("Q1\tliteral\tOne\n")
    with pytest.raises(GraphParseError, match="line 1"):
        load_graph(str(triples), str(labels))


def test_write_graph_is_stable(graph, tmp_path):
    first = (tmp_path / "a.tsv", tmp_path / "a_labels.tsv")
    second = (tmp_path / "b.tsv", tmp_path / "b_labels.tsv")
    write_graph(graph, str(first[0]), str(first[1]))
    reloaded = load_graph(str(first[0]), str(first[1]))
    assert reloaded == graph
    write_graph(reloaded, str(second[0]), str(second[1]))
    assert first[0].read_bytes() == second[0].read_bytes()
    assert first[1].read_bytes() == second[1].read_bytes()


_ids = st.sampled_from([f"Q{i}" for i in range(8)])
_rels = st.sampled_from(["P1", "P2", "P3"])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(_ids, _rels, _ids), max_size=40))
def test_indexes_match_fact_set(facts):
    g = KnowledgeGraph()
    for fact in facts:
        g.add_fact(*fact)
    assert g.indexes() == g.rebuild_indexes()
    assert len(g) == len(set(facts))
