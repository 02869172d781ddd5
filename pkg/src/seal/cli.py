"""
Command line surface: ``seal repl|batch|gen|corrupt-bench|evolve-report|templates``.
"""
import argparse
import json
import logging
import random
import sys
from dataclasses import replace
from typing import Callable, Dict, List, Optional

from seal.agent import AgentConfig, AgentDeps, SealAgent, TurnTrace
from seal.calibration import HashingEmbedder
from seal.clients import LlmGatewayError
from seal.harness import (DialogFile, DialogFileError, corruption_table,
                          evolve_table, run_batch, run_corruption_bench,
                          run_evolve_report)
from seal.kg_store import GraphIngestionError, KnowledgeGraph, load_graph
from seal.memory import DialogState, MemoryRestoreError
from seal.services import SealRuntimeService
from seal.synthetic import SyntheticSpec, gen_synthetic, random_graph
from seal.templates import QuestionType, export_catalog
from seal.utils import ConfigFileError

logger = logging.getLogger(__name__)

REPL_HELP = ":why shows the last S-expression and SPARQL, :memory the record count, " \
            ":reset starts a new dialog, :quit leaves"


def _graph_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--triples", required=required, help="Triple file (TSV)")
    p.add_argument("--labels", default=None, help="Labels file (TSV)")


def _agent_args(p: argparse.ArgumentParser, gateway: str = "scripted") -> None:
    _graph_args(p)
    p.add_argument("--gateway", default=gateway,
                   choices=["scripted", "gated", "endpoint", "zmq"],
                   help=f"Language model gateway (default: {gateway})")
    p.add_argument("--fixtures", default=None,
                   help="Response directory of the scripted gateways")
    p.add_argument("--config", default=None, help="JSON run configuration")
    p.add_argument("--memory", default=None, help="Global memory file (JSON lines)")
    p.add_argument("--max-retries", type=int, default=None)
    p.add_argument("--link-k", type=int, default=None, choices=[1, 3])
    p.add_argument("--keep-variants", type=int, default=None, choices=[1, 3])
    p.add_argument("--invert-relations", action="store_true",
                   help="Probe single JOIN inversions when no variant is non-empty")
    for ablation in ("memory", "calibration", "core-extraction", "entity-candidates"):
        p.add_argument(f"--no-{ablation}", action="store_true",
                       help=f"Ablate {ablation.replace('-', ' ')}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seal", description="Conversational question answering over a "
                                 "knowledge graph with S-expression cores")
    sub = parser.add_subparsers(dest="command", required=True)

    repl = sub.add_parser("repl", help="Interactive dialog")
    _agent_args(repl)
    repl.add_argument("--trace", action="store_true", help="Print every turn trace")

    batch = sub.add_parser("batch", help="Evaluate a dialog file")
    _agent_args(batch)
    batch.add_argument("--dialogs", required=True, help="Dialog file (JSON)")
    batch.add_argument("--report", default=None, help="Write the JSON report here")
    batch.add_argument("--traces", default=None, help="Export turn traces here")
    batch.add_argument("--timing", action="store_true",
                       help="Include wall time in the JSON report")

    gen = sub.add_parser("gen", help="Generate a synthetic graph and dialogs")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--entities", type=int, default=60)
    gen.add_argument("--relations", type=int, default=6)
    gen.add_argument("--dialogs", type=int, default=10)
    gen.add_argument("--turns", type=int, default=4)
    gen.add_argument("--mix", default=None,
                     help="Type weights, e.g. simple=2,count=1,verify=1")
    gen.add_argument("--gated", action="store_true",
                     help="Add decoy plans for the exemplar gated gateway")

    bench = sub.add_parser("corrupt-bench", help="Calibration repair benchmark")
    _graph_args(bench, required=False)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--cases", type=int, default=200)
    bench.add_argument("--report", default=None)

    evolve = sub.add_parser("evolve-report", help="Self evolving trend report")
    _agent_args(evolve, gateway="gated")
    evolve.add_argument("--dialogs", required=True)
    evolve.add_argument("--report", default=None)

    sub.add_parser("templates", help="Print the builtin template catalog")
    return parser


# -- wiring ----------------------------------------------------------------
def _config(args) -> AgentConfig:
    ablations = {f"no_{name}" for name in ("memory", "calibration", "core_extraction",
                                           "entity_candidates")
                 if getattr(args, f"no_{name}")}
    overrides = {"max_retries": args.max_retries, "link_k": args.link_k,
                 "keep_variants": args.keep_variants,
                 "try_inversion": args.invert_relations or None}
    if args.config:
        config = AgentConfig.from_file(args.config, **overrides)
    else:
        config = AgentConfig.from_dict({}, **overrides)
    if ablations:
        config = replace(config, ablations=config.ablations | ablations)
    return config


def _agent(args) -> SealAgent:
    service = SealRuntimeService()
    graph = load_graph(args.triples, args.labels)
    if args.gateway in ("scripted", "gated"):
        if not args.fixtures:
            raise ValueError(f"--fixtures is required by the {args.gateway} gateway")
        llm = service.gateway(args.gateway, fixtures=args.fixtures)
    else:
        llm = service.gateway(args.gateway)
    return service.agent(graph, llm, _config(args), memory_path=args.memory)


def _emit(report: Dict, table: str, path: Optional[str]) -> None:
    print(table)
    if path:
        with open(path, "w", encoding="utf8") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")


# -- commands --------------------------------------------------------------
def run_repl(agent: SealAgent, read: Callable[[], str] = input,
             write: Callable[[str], None] = print, show_trace: bool = False) -> None:
    """Read questions until EOF or ``:quit``; answers are printed with
    labels."""
    deps = agent.deps
    state = DialogState()
    last: Optional[TurnTrace] = None
    write(REPL_HELP)
    while True:
        try:
            line = read().strip()
        except EOFError:
            break
        if not line:
            continue
        if line == ":quit":
            break
        if line == ":why":
            if last is None or last.sexpr is None:
                write("No logical form yet")
            else:
                write(f"S-expression: {last.sexpr}")
                write(f"SPARQL: {last.sparql}")
            continue
        if line == ":memory":
            write(f"{len(deps.memory)} memory records")
            continue
        if line == ":reset":
            state = DialogState()
            last = None
            write("Dialog reset")
            continue
        try:
            result, last = agent.answer_turn(state, line)
        except LlmGatewayError as e:
            write(f"Gateway error: {e}")
            continue
        if result is None:
            cause = last.verdict.get("cause") if last.verdict else last.failure
            write(f"No answer ({cause})")
        else:
            write(result.render(deps.graph.label_of))
        if show_trace:
            write(json.dumps(last.to_json(), indent=2, sort_keys=True))
        deps.memory.flush()


def _parse_mix(text: Optional[str]) -> Optional[Dict[QuestionType, float]]:
    if not text:
        return None
    mix = {}
    for item in text.split(","):
        name, _, weight = item.partition("=")
        mix[QuestionType(name.strip())] = float(weight or 1)
    return mix


def _gen(args) -> None:
    mix = _parse_mix(args.mix)
    spec_args = dict(n_entities=args.entities, n_relations=args.relations,
                     n_dialogs=args.dialogs, turns_per_dialog=args.turns,
                     gated=args.gated)
    if mix is not None:
        spec_args["type_mix"] = mix
    paths = gen_synthetic(args.seed, SyntheticSpec(**spec_args), args.out)
    for path in paths:
        print(path)


def _bench(args) -> None:
    if args.triples:
        graph: KnowledgeGraph = load_graph(args.triples, args.labels)
    else:
        graph = random_graph(random.Random(args.seed))
    report = run_corruption_bench(args.seed, graph, HashingEmbedder(), args.cases)
    _emit(report, corruption_table(report), args.report)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "repl":
            run_repl(_agent(args), show_trace=args.trace)
        elif args.command == "batch":
            agent = _agent(args)
            report = run_batch(DialogFile.load(args.dialogs), agent.deps, args.traces)
            _emit(report.to_json(args.timing), report.to_table(), args.report)
        elif args.command == "gen":
            _gen(args)
        elif args.command == "corrupt-bench":
            _bench(args)
        elif args.command == "evolve-report":
            deps: AgentDeps = _agent(args).deps
            report = run_evolve_report(DialogFile.load(args.dialogs), deps)
            _emit(report, evolve_table(report), args.report)
        elif args.command == "templates":
            print(export_catalog())
    except (ConfigFileError, DialogFileError, GraphIngestionError, MemoryRestoreError,
            FileNotFoundError, ValueError) as e:
        logger.error(str(e))
        print(f"seal: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
