import json

import pytest
from unittest.mock import MagicMock

from seal import cli
from seal.agent import AgentDeps, SealAgent
from seal.clients import LlmGatewayError
from seal.fixtures import FAMILY_DIALOG, data_path, family_gateway, family_graph

FAMILY = ["--triples", data_path("family", "triples.tsv"),
          "--labels", data_path("family", "labels.tsv"),
          "--fixtures", data_path("family")]


def _reader(lines):
    pending = list(lines)

    def read():
        if not pending:
            raise EOFError
        return pending.pop(0)
    return read


@pytest.fixture
def dialog_file(tmp_path):
    sons = ["Francesco_of_Saluzzo", "Gian_Gabriele_I_of_Saluzzo",
            "Giovanni_Ludovico_of_Saluzzo", "Michele_Antonio_of_Saluzzo"]
    path = tmp_path / "dialogs.json"
    path.write_text(json.dumps({"dialogs": [{"turns": [
        {"q": FAMILY_DIALOG[0], "qtype": "simple",
         "gold": {"kind": "EntitySet", "value": sons}},
    ]}]}))
    return str(path)


def test_templates_command(capsys):
    assert cli.main(["templates"]) == 0
    out = capsys.readouterr().out
    assert "simple-1" in out
    assert "compare_and_count-3" in out


def test_gen_command(tmp_path, capsys):
    out_dir = str(tmp_path / "suite")
    code = cli.main(["gen", "--seed", "1", "--out", out_dir, "--entities", "30",
                     "--relations", "3", "--dialogs", "2", "--turns", "2",
                     "--mix", "simple=2,count=1"])
    assert code == 0
    printed = capsys.readouterr().out.split()
    assert [p.rsplit("/", 1)[-1] for p in printed] == ["triples.tsv", "labels.tsv",
                                                       "dialogs.json"]
    assert (tmp_path / "suite" / "gateway" / "rules.json").exists()


def test_batch_command(tmp_path, dialog_file, capsys):
    report = tmp_path / "report.json"
    traces = tmp_path / "traces"
    code = cli.main(["batch", *FAMILY, "--dialogs", dialog_file,
                     "--report", str(report), "--traces", str(traces)])
    assert code == 0
    assert "macro-F1" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert data["overall"] == 1.0
    assert "elapsed" not in data
    assert len(list(traces.iterdir())) == 1


def test_batch_command_timing(tmp_path, dialog_file):
    report = tmp_path / "report.json"
    assert cli.main(["batch", *FAMILY, "--dialogs", dialog_file, "--timing",
                     "--report", str(report), "--no-memory"]) == 0
    data = json.loads(report.read_text())
    assert "elapsed" in data
    assert data["ablations"] == ["no_memory"]


def test_batch_command_writes_memory(tmp_path, dialog_file):
    memory = tmp_path / "memory.jsonl"
    assert cli.main(["batch", *FAMILY, "--dialogs", dialog_file,
                     "--memory", str(memory)]) == 0
    assert len(memory.read_text().splitlines()) == 1


def test_corrupt_bench_command(tmp_path, capsys):
    report = tmp_path / "bench.json"
    assert cli.main(["corrupt-bench", "--cases", "5", "--report", str(report)]) == 0
    assert "label_typo" in capsys.readouterr().out
    data = json.loads(report.read_text())
    assert data["cases"] == 5
    assert len(data["probes"]) == 4


def test_missing_fixtures_is_an_error(dialog_file, capsys):
    code = cli.main(["batch", "--triples", data_path("family", "triples.tsv"),
                     "--dialogs", dialog_file])
    assert code == 1
    assert "seal: error: --fixtures is required" in capsys.readouterr().err


def test_missing_graph_is_an_error(tmp_path, dialog_file, capsys):
    code = cli.main(["batch", "--triples", str(tmp_path / "nope.tsv"),
                     "--fixtures", data_path("family"), "--dialogs", dialog_file])
    assert code == 1
    assert "seal: error:" in capsys.readouterr().err


def test_bad_config_is_an_error(tmp_path, dialog_file, capsys):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"retries": 3}))
    code = cli.main(["batch", *FAMILY, "--dialogs", dialog_file,
                     "--config", str(config)])
    assert code == 1
    assert "Unknown config keys" in capsys.readouterr().err


def test_config_flags():
    args = cli.build_parser().parse_args(
        ["batch", *FAMILY, "--dialogs", "d.json", "--link-k", "3",
         "--keep-variants", "3", "--max-retries", "1", "--invert-relations",
         "--no-memory", "--no-entity-candidates"])
    config = cli._config(args)
    assert config.link_k == 3 and config.keep_variants == 3
    assert config.max_retries == 1
    assert config.try_inversion
    assert config.ablations == {"no_memory", "no_entity_candidates"}


def test_config_flags_over_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"max_retries": 5, "ablations": ["no_calibration"]}))
    args = cli.build_parser().parse_args(
        ["repl", *FAMILY, "--config", str(path), "--no-memory"])
    config = cli._config(args)
    assert config.max_retries == 5
    assert config.ablations == {"no_calibration", "no_memory"}


# -- repl ------------------------------------------------------------------
def test_repl_session():
    agent = SealAgent(AgentDeps(family_graph(), family_gateway()))
    out = []
    cli.run_repl(agent, _reader([":why", FAMILY_DIALOG[0], "", ":why", ":memory",
                                 ":reset", ":why", ":quit", "ignored"]),
                 out.append)
    assert out[0] == cli.REPL_HELP
    assert out[1] == "No logical form yet"
    assert out[2] == ("Francesco of Saluzzo, Gian Gabriele I of Saluzzo, "
                      "Giovanni Ludovico of Saluzzo, Michele Antonio of Saluzzo")
    assert out[3].startswith("S-expression: (AND (JOIN (R child)")
    assert out[4].startswith("SPARQL: SELECT")
    assert out[5:] == ["1 memory records", "Dialog reset", "No logical form yet"]


def test_repl_dialog_uses_history():
    agent = SealAgent(AgentDeps(family_graph(), family_gateway()))
    out = []
    cli.run_repl(agent, _reader(FAMILY_DIALOG), out.append)
    assert out[-1] == ("Francesco of Saluzzo, Gian Gabriele I of Saluzzo, "
                       "Michele Antonio of Saluzzo")


def test_repl_shows_traces():
    agent = SealAgent(AgentDeps(family_graph(), family_gateway()))
    out = []
    cli.run_repl(agent, _reader(FAMILY_DIALOG[:1]), out.append, show_trace=True)
    trace = json.loads(out[-1])
    assert trace["template_id"] == "simple-1"


def test_repl_reports_failures():
    llm = MagicMock()
    llm.complete.side_effect = LlmGatewayError("model server down")
    agent = SealAgent(AgentDeps(family_graph(), llm))
    out = []
    cli.run_repl(agent, _reader(["Who?"]), out.append)
    assert out[-1] == "No answer (retries_exhausted)"


def test_repl_survives_gateway_errors(mocker):
    agent = SealAgent(AgentDeps(family_graph(), family_gateway()))
    mocker.patch.object(agent, "answer_turn",
                        side_effect=LlmGatewayError("connection refused"))
    out = []
    cli.run_repl(agent, _reader(["Who?", ":memory"]), out.append)
    assert out[1:] == ["Gateway error: connection refused", "0 memory records"]
