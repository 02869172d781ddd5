"""
Bundled example graphs and the scripted gateways that answer over them.

The family graph is shipped as flat files under ``seal/data/family``; the
narrative location graph is generated, its size being the point of the
example.
"""
import os
from typing import Tuple

from seal.clients import ScriptedGateway
from seal.kg_store import KnowledgeGraph, load_graph

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")

FAMILY_DIALOG: Tuple[str, ...] = (
    "Who are the children of Ludovico II, Marquess of Saluzzo?",
    "Who are siblings of that one?",
    "No, I meant Giovanni Ludovico.",
)
NARRATIVE_QUESTION = ("How many administrative territories are the narrative "
                      "locations of at least 840 applications or works of art?")

# territory -> (works located there, applications located there)
_NARRATIVE_COUNTS = {
    "Florence": (600, 300),
    "Paris": (800, 45),
    "Tuscany": (800, 39),
    "Bavaria": (500, 100),
}
_NARRATIVE_WORKS = 900
_NARRATIVE_APPLICATIONS = 300


def data_path(*parts: str) -> str:
    return os.path.join(DATA_DIR, *parts)


def family_graph() -> KnowledgeGraph:
    return load_graph(data_path("family", "triples.tsv"),
                      data_path("family", "labels.tsv"))


def family_gateway() -> ScriptedGateway:
    return ScriptedGateway.from_directory(data_path("family"))


def narrative_graph() -> KnowledgeGraph:
    """Territories with works of art and applications set in them.

    Florence (900) and Paris (845) reach 840 located items, Tuscany (839)
    and Bavaria (600) do not, and the fictional Atlantis (900) is no
    administrative territorial entity.
    """
    g = KnowledgeGraph()
    g.add_relation("narrative_location", "narrative location")
    g.add_relation("instance_of", "instance of")
    types = {"work_of_art": "work of art", "application": "application",
             "administrative_territorial_entity": "administrative territorial entity",
             "fictional_location": "fictional location"}
    for token, label in types.items():
        g.add_entity(token, label)
    works = [f"work_{i:04d}" for i in range(_NARRATIVE_WORKS)]
    applications = [f"application_{i:04d}" for i in range(_NARRATIVE_APPLICATIONS)]
    for w in works:
        g.add_fact(w, "instance_of", "work_of_art")
    for a in applications:
        g.add_fact(a, "instance_of", "application")
    for territory, (n_works, n_applications) in _NARRATIVE_COUNTS.items():
        g.add_entity(territory, territory)
        g.add_fact(territory, "instance_of", "administrative_territorial_entity")
        for item in works[:n_works] + applications[:n_applications]:
            g.add_fact(item, "narrative_location", territory)
    g.add_entity("Atlantis", "Atlantis")
    g.add_fact("Atlantis", "instance_of", "fictional_location")
    for w in works:
        g.add_fact(w, "narrative_location", "Atlantis")
    return g


def narrative_gateway() -> ScriptedGateway:
    return ScriptedGateway.from_directory(data_path("narrative"))
