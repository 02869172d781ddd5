"""
Module to aggregate SEAL services.

This module provides a class for instantiating language model gateways
and wiring them with a graph, an embedder and a global memory into an
agent.
"""

import logging
import time
from typing import Optional

from config import MEMORY_PATH
from seal.agent import AgentConfig, AgentDeps, SealAgent
from seal.calibration import Embedder, EndpointEmbedder, HashingEmbedder
from seal.clients import (EndpointGateway, ExemplarGatedGateway, GatewayBase,
                          ScriptedGateway, ZMQGateway)
from seal.kg_store import KnowledgeGraph, load_graph
from seal.memory import GlobalMemory, restore

logger = logging.getLogger(__name__)


class SealRuntimeService:
    """Class to instance SEAL services.

    Methods
    -------
    gateway(name, **kwargs):
        Requests a language model gateway by name.
    embedder(name, **kwargs):
        Requests an embedder by name.
    agent(graph, llm, ...):
        Builds an agent over a graph.
    """
    def __init__(self):
        logger.info("SealRuntimeService created")

    def gateway(self, name: str, **kwargs) -> GatewayBase:
        """Method to request a gateway.

        Parameters
        ----------
        name : str
            One of "scripted", "gated", "endpoint" or "zmq". The scripted
            gateways take a ``fixtures`` directory.

        Raises
        ------
        ValueError
            If the requested gateway name is unknown.
        """
        start = time.time_ns()
        try:
            if name == "scripted":
                return ScriptedGateway.from_directory(kwargs["fixtures"])
            if name == "gated":
                return ExemplarGatedGateway.from_directory(kwargs["fixtures"])
            if name == "endpoint":
                return EndpointGateway(**kwargs)
            if name == "zmq":
                return ZMQGateway(**kwargs)
        finally:
            end = time.time_ns()
            logger.info(f"gateway creation time: {(end - start)/1e9}")
        raise ValueError(f"Gateway unknown: {name}")

    def embedder(self, name: str = "hashing", **kwargs) -> Embedder:
        if name == "hashing":
            return HashingEmbedder(**kwargs)
        if name == "endpoint":
            return EndpointEmbedder(**kwargs)
        raise ValueError(f"Embedder unknown: {name}")

    def agent(self, graph: KnowledgeGraph, llm: GatewayBase,
              config: Optional[AgentConfig] = None,
              embedder: Optional[Embedder] = None,
              memory_path: Optional[str] = MEMORY_PATH) -> SealAgent:
        """Wire a graph, a gateway and a global memory into an agent.

        With a ``memory_path`` the memory is restored from that file and
        new records are appended to it.
        """
        memory = restore(memory_path, attach=True) if memory_path else GlobalMemory()
        deps = AgentDeps(graph, llm, embedder or HashingEmbedder(), memory,
                         config or AgentConfig())
        logger.info(f"Agent over {graph!r} with {len(memory)} memory records")
        return SealAgent(deps)

    def load_graph(self, triples_path: str,
                   labels_path: Optional[str] = None) -> KnowledgeGraph:
        return load_graph(triples_path, labels_path)
