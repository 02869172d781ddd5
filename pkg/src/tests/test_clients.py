import json

import pytest
import requests
from unittest.mock import MagicMock, patch

from seal.clients import (EndpointGateway, ExemplarGatedGateway, LlmGatewayError,
                          LlmTimeoutError, ScriptedGateway, ZMQGateway, prompt_section,
                          request_hash)

PROMPT = "### TASK\nClassify.\n### INPUT\nQuestion: How many rivers?\n"
GATED = "### TASK\nPlan.\n### EXAMPLES\nQuestion: x\n### INPUT\nQuestion: y\n"


def test_prompt_section():
    assert prompt_section(PROMPT, "### INPUT") == "Question: How many rivers?\n"
    assert prompt_section(GATED, "### EXAMPLES") == "Question: x"
    assert prompt_section(PROMPT, "### EXAMPLES") == ""


def test_scripted_gateway_lookup_order():
    rules = [{"task": "type_pred", "match": ["How many"], "response": "count"},
             {"task": "type_pred", "match": [], "response": "simple"}]
    llm = ScriptedGateway({request_hash("type_pred", PROMPT): "exact"}, rules)
    assert llm.complete("type_pred", PROMPT) == "exact"
    assert llm.complete("type_pred", PROMPT.replace("How many", "Which")) == "simple"
    assert llm.complete("type_pred", PROMPT + " ") == "count"
    assert llm.requests_made == 3


def test_scripted_gateway_errors():
    llm = ScriptedGateway(rules=[])
    with pytest.raises(LlmGatewayError, match="No scripted response for coref"):
        llm.complete("coref", PROMPT)
    with pytest.raises(ValueError, match="Task unknown: chat"):
        llm.complete("chat", PROMPT)
    with pytest.raises(ValueError, match="needs 'task' and 'response'"):
        ScriptedGateway(rules=[{"task": "coref"}])
    with pytest.raises(FileNotFoundError):
        ScriptedGateway.from_directory("/nonexistent/fixtures")


def test_scripted_gateway_from_directory(tmp_path):
    (tmp_path / f"{request_hash('coref', PROMPT)}.txt").write_text("exact")
    (tmp_path / "rules.json").write_text(json.dumps(
        [{"task": "coref", "match": [], "response": "rule"}]))
    llm = ScriptedGateway.from_directory(str(tmp_path))
    assert llm.complete("coref", PROMPT) == "exact"
    assert llm.complete("coref", GATED) == "rule"


def test_exemplar_gated_gateway():
    llm = ExemplarGatedGateway(rules=[
        {"task": "plan_gen", "match": [], "response": "good", "fallback": "decoy"}])
    assert llm.complete("plan_gen", GATED) == "good"
    assert llm.complete("plan_gen", PROMPT) == "decoy"


def _response(status=200, content="```type\ncount\n```"):
    response = MagicMock()
    response.status_code = status
    response.text = "error body"
    response.json.return_value = {"choices": [{"message": {"content": content}}]}
    return response


@patch("seal.clients.requests.post")
def test_endpoint_gateway(mock_post, monkeypatch):
    monkeypatch.setenv("SEAL_LLM_API_KEY", "secret")
    mock_post.return_value = _response()
    llm = EndpointGateway("http://localhost:8000/v1/", "small",
                          task_models={"plan_gen": "large"})
    assert llm.complete("type_pred", PROMPT) == "```type\ncount\n```"
    url = mock_post.call_args.args[0]
    body = mock_post.call_args.kwargs["json"]
    assert url == "http://localhost:8000/v1/chat/completions"
    assert body["model"] == "small"
    assert body["temperature"] == 0.0
    assert body["messages"] == [{"role": "user", "content": PROMPT}]
    assert mock_post.call_args.kwargs["headers"] == {"Authorization": "Bearer secret"}
    llm.complete("plan_gen", PROMPT)
    assert mock_post.call_args.kwargs["json"]["model"] == "large"


@patch("seal.clients.sleep")
@patch("seal.clients.requests.post")
def test_endpoint_gateway_retries(mock_post, mock_sleep):
    mock_post.side_effect = [requests.Timeout("slow"), _response(503), _response()]
    llm = EndpointGateway("http://localhost:8000/v1", max_attempts=3)
    assert llm.complete("type_pred", PROMPT).startswith("```type")
    assert mock_post.call_count == 3
    assert [c.args[0] for c in mock_sleep.call_args_list] == [0.5, 1.0]


@patch("seal.clients.sleep")
@patch("seal.clients.requests.post")
def test_endpoint_gateway_failures(mock_post, mock_sleep):
    llm = EndpointGateway("http://localhost:8000/v1", max_attempts=2)
    mock_post.side_effect = requests.Timeout("slow")
    with pytest.raises(LlmTimeoutError, match="timed out"):
        llm.complete("coref", PROMPT)
    mock_post.side_effect = None
    mock_post.return_value = _response(400)
    with pytest.raises(LlmGatewayError, match="answered 400: error body"):
        llm.complete("coref", PROMPT)
    broken = _response()
    broken.json.return_value = {"choices": []}
    mock_post.return_value = broken
    with pytest.raises(LlmGatewayError, match="Malformed completion"):
        llm.complete("coref", PROMPT)


def test_endpoint_gateway_needs_url(monkeypatch):
    monkeypatch.setattr("seal.clients.LLM_BASE_URL", None)
    with pytest.raises(ValueError, match="No endpoint configured"):
        EndpointGateway()


@pytest.fixture
def zmq_gateway(mocker):
    mock_context = mocker.patch("zmq.Context", autospec=True)
    mock_socket = MagicMock()
    mock_context.return_value.socket.return_value = mock_socket
    llm = ZMQGateway(address="tcp://127.0.0.1:5556", model="small", timeout=0.1,
                     max_attempts=2)
    return llm, mock_socket


def test_zmq_initialization(zmq_gateway):
    llm, mock_socket = zmq_gateway
    assert llm._address == "tcp://127.0.0.1:5556"
    mock_socket.connect.assert_called_once_with("tcp://127.0.0.1:5556")


def test_zmq_complete(zmq_gateway):
    llm, mock_socket = zmq_gateway
    mock_socket.poll.return_value = 1
    mock_socket.recv_pyobj.return_value = "```type\nverify\n```"
    assert llm.complete("type_pred", PROMPT) == "```type\nverify\n```"
    mock_socket.send_pyobj.assert_called_once_with(
        {"task": "type_pred", "prompt": PROMPT, "model": "small"})


def test_zmq_timeout_reconnects(zmq_gateway):
    llm, mock_socket = zmq_gateway
    mock_socket.poll.return_value = 0
    with pytest.raises(TimeoutError, match="timed out 2 times"):
        llm.complete("type_pred", PROMPT)
    assert mock_socket.connect.call_count == 3
    assert mock_socket.send_pyobj.call_count == 2


def test_zmq_rejects_non_text(zmq_gateway):
    llm, mock_socket = zmq_gateway
    mock_socket.poll.return_value = 1
    mock_socket.recv_pyobj.return_value = {"text": "x"}
    with pytest.raises(LlmGatewayError, match="Model server sent dict"):
        llm.complete("coref", PROMPT)
