"""
Module for the language model transports

Classes
--------
GatewayBase
    Abstract class every transport implements.

ScriptedGateway
    Deterministic gateway answering from fixture files, used by tests
    and the bundled examples.

ExemplarGatedGateway
    Scripted gateway whose plan answers depend on the presence of
    in-context exemplars.

EndpointGateway
    HTTP chat completions client.

ZMQGateway
    Client of a model server reachable through a ZeroMQ REQ socket.

"""
import abc
import json
import logging
import os
from time import sleep, time_ns
from typing import Dict, List, Optional

import requests
import zmq

from config import (LLM_API_KEY_ENV, LLM_BACKOFF_BASE, LLM_BASE_URL,
                    LLM_MAX_ATTEMPTS, LLM_MODEL, LLM_TIMEOUT, ZMQ_SERVER)
from seal.utils import stable_hash

logger = logging.getLogger(__name__)

TASK_TAGS = ("coref", "core_gen", "type_pred", "plan_gen")
INPUT_HEADER = "### INPUT"
EXAMPLES_HEADER = "### EXAMPLES"
RULES_FILE = "rules.json"
_RETRY_STATUS = (429, 500, 502, 503, 504)


class LlmGatewayError(Exception):
    """Exception raised when a gateway cannot produce a completion."""
    pass


class LlmTimeoutError(LlmGatewayError, TimeoutError):
    """Exception raised when a gateway exceeds its configured timeout."""
    pass


def request_hash(task_tag: str, prompt: str) -> str:
    """Key of a request in scripted fixture tables."""
    return stable_hash(task_tag, prompt)


def prompt_section(prompt: str, header: str) -> str:
    """Text of a ``### `` section of a rendered prompt, or ''."""
    start = prompt.find(header + "\n")
    if start < 0:
        return ""
    start += len(header) + 1
    end = prompt.find("\n### ", start)
    return prompt[start:] if end < 0 else prompt[start:end]


class GatewayBase(abc.ABC):
    """
    Base class of the language model transports.

    Attributes
    ----------
    requests_made : int
        Number of completions requested so far.
    """
    def __init__(self):
        self.requests_made = 0
        self._logger = logging.getLogger(self.__class__.__name__)

    def complete(self, task_tag: str, prompt: str) -> str:
        """Complete ``prompt`` for one of the generation tasks.

        Raises
        ------
        ValueError
            If ``task_tag`` is unknown.
        LlmGatewayError
            If the transport fails.
        """
        if task_tag not in TASK_TAGS:
            raise ValueError(f"Task unknown: {task_tag}")
        self.requests_made += 1
        start = time_ns()
        text = self._complete(task_tag, prompt)
        end = time_ns()
        self._logger.debug(f"{task_tag} completed in: {(end - start)/1e9}")
        return text

    @abc.abstractmethod
    def _complete(self, task_tag: str, prompt: str) -> str:  # pragma: no cover
        pass

    def close(self):
        pass


class ScriptedGateway(GatewayBase):
    """
    Gateway answering from a response table and ordered rules.

    A request is first looked up by :func:`request_hash`. Otherwise the
    first rule whose ``task`` equals the task tag and whose ``match``
    substrings all occur in the INPUT section of the prompt answers.

    Parameters
    ----------
    responses : dict, optional
        ``request hash -> response text``.
    rules : list of dict, optional
        Entries ``{"task", "match", "response", "fallback"?}``.
    """
    def __init__(self, responses: Optional[Dict[str, str]] = None,
                 rules: Optional[List[Dict]] = None):
        super().__init__()
        self._responses = dict(responses or {})
        self._rules = list(rules or [])
        for i, rule in enumerate(self._rules):
            if "task" not in rule or "response" not in rule:
                raise ValueError(f"Rule {i} needs 'task' and 'response' keys")

    @classmethod
    def from_directory(cls, path: str, **kwargs) -> "ScriptedGateway":
        """Load ``<hash>.txt`` response files and an optional rules.json."""
        if not os.path.isdir(path):
            raise FileNotFoundError(f"Fixture directory not found: {path}")
        responses = {}
        for name in sorted(os.listdir(path)):
            if name.endswith(".txt"):
                with open(os.path.join(path, name), encoding="utf8") as f:
                    responses[name[:-4]] = f.read()
        rules = []
        rules_path = os.path.join(path, RULES_FILE)
        if os.path.exists(rules_path):
            with open(rules_path, encoding="utf8") as f:
                rules = json.load(f)
        return cls(responses, rules, **kwargs)

    def _pick(self, rule: Dict, task_tag: str, prompt: str) -> str:
        return rule["response"]

    def _complete(self, task_tag: str, prompt: str) -> str:
        key = request_hash(task_tag, prompt)
        if key in self._responses:
            return self._responses[key]
        payload = prompt_section(prompt, INPUT_HEADER) or prompt
        for rule in self._rules:
            if rule["task"] != task_tag:
                continue
            if all(m in payload for m in rule.get("match", [])):
                return self._pick(rule, task_tag, prompt)
        raise LlmGatewayError(f"No scripted response for {task_tag} request {key}")


class ExemplarGatedGateway(ScriptedGateway):
    """
    Scripted gateway that answers ``plan_gen`` requests with a rule's
    ``response`` only when the prompt carries exemplars, and with its
    ``fallback`` otherwise.
    """
    def _pick(self, rule: Dict, task_tag: str, prompt: str) -> str:
        if task_tag == "plan_gen" and "fallback" in rule:
            if not prompt_section(prompt, EXAMPLES_HEADER).strip():
                return rule["fallback"]
        return rule["response"]


class EndpointGateway(GatewayBase):
    """
    Chat completions client over HTTP.

    Parameters
    ----------
    base_url : str, optional
        Service root, ``SEAL_LLM_BASE_URL`` by default.
    model : str, optional
        Default model name.
    task_models : dict, optional
        Per task model overrides.
    temperature : float, default=0
    timeout : float, optional
        Seconds per request.
    """
    def __init__(self, base_url: Optional[str] = None, model: Optional[str] = None,
                 task_models: Optional[Dict[str, str]] = None,
                 temperature: float = 0.0, timeout: Optional[float] = None,
                 max_attempts: int = LLM_MAX_ATTEMPTS):
        super().__init__()
        self._base_url = (base_url or LLM_BASE_URL or "").rstrip("/")
        if not self._base_url:
            raise ValueError("No endpoint configured, set SEAL_LLM_BASE_URL")
        self._model = model or LLM_MODEL
        self._task_models = dict(task_models or {})
        self._temperature = temperature
        self._timeout = timeout if timeout is not None else LLM_TIMEOUT
        self._max_attempts = max_attempts

    def _headers(self) -> Dict[str, str]:
        token = os.getenv(LLM_API_KEY_ENV)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def _complete(self, task_tag: str, prompt: str) -> str:
        body = {
            "model": self._task_models.get(task_tag, self._model),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self._temperature,
        }
        url = f"{self._base_url}/chat/completions"
        last_error: Exception = LlmGatewayError("no attempt made")
        for attempt in range(self._max_attempts):
            if attempt:
                delay = LLM_BACKOFF_BASE * 2 ** (attempt - 1)
                self._logger.warning(f"Retrying {task_tag} in {delay}s: {last_error}")
                sleep(delay)
            try:
                response = requests.post(url, json=body, headers=self._headers(),
                                         timeout=self._timeout)
            except requests.Timeout as e:
                last_error = LlmTimeoutError(f"{url} timed out after "
                                             f"{self._timeout}s: {e}")
                continue
            except requests.ConnectionError as e:
                last_error = LlmGatewayError(f"Cannot reach {url}: {e}")
                continue
            if response.status_code in _RETRY_STATUS:
                last_error = LlmGatewayError(
                    f"{url} answered {response.status_code}")
                continue
            if response.status_code >= 400:
                raise LlmGatewayError(f"{url} answered {response.status_code}: "
                                      f"{response.text[:200]}")
            try:
                return response.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as e:
                raise LlmGatewayError(f"Malformed completion from {url}: {e}")
        raise last_error


class ZMQGateway(GatewayBase):
    """
    Client of a model server behind a ZeroMQ REP socket.

    Requests are ``{"task", "prompt", "model"}`` dictionaries sent with
    ``send_pyobj``; the reply is the completion text. A request that
    gets no reply within the timeout rebuilds the socket and is sent
    again, up to ``max_attempts`` times.

    Parameters
    ----------
    address : str, optional
        Server endpoint, ``SEAL_ZMQ_SERVER`` by default.
    timeout : float, optional
        Seconds to wait for each reply.

    Attributes
    ----------
    _context : zmq.Context
        The ZeroMQ context for managing sockets.
    _socket : zmq.Socket
        The REQ socket.
    """
    def __init__(self, address: Optional[str] = None, model: Optional[str] = None,
                 timeout: Optional[float] = None,
                 max_attempts: int = LLM_MAX_ATTEMPTS):
        super().__init__()
        self._address = address or ZMQ_SERVER
        if not self._address:
            raise ValueError("No model server configured, set SEAL_ZMQ_SERVER")
        self._model = model or LLM_MODEL
        self._timeout = timeout if timeout is not None else LLM_TIMEOUT
        self._max_attempts = max_attempts
        self._context = zmq.Context()
        self._socket = None
        self._connect()

    def _connect(self):
        self._socket = self._context.socket(zmq.REQ)
        self._socket.setsockopt(zmq.LINGER, 0)
        self._logger.debug(f"Address for ZMQGateway: {self._address}")
        self._socket.connect(self._address)

    def _complete(self, task_tag: str, prompt: str) -> str:
        message = {"task": task_tag, "prompt": prompt, "model": self._model}
        for attempt in range(self._max_attempts):
            start = time_ns()
            self._socket.send_pyobj(message)
            if self._socket.poll(int(self._timeout * 1000), zmq.POLLIN):
                reply = self._socket.recv_pyobj()
                end = time_ns()
                self._logger.info(f"Results received in: {(end - start)/1e9}")
                if not isinstance(reply, str):
                    raise LlmGatewayError(f"Model server sent {type(reply).__name__}")
                return reply
            self._logger.warning(
                f"No reply from {self._address} (attempt {attempt + 1})")
            self._socket.close()
            self._connect()
        raise LlmTimeoutError(
            f"Request to {self._address} timed out {self._max_attempts} times")

    def close(self):
        """Disconnect the link to the socket."""
        socket = getattr(self, "_socket", None)
        if socket is None or socket.closed:
            return
        self._socket.close()
        self._context.destroy()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()

    def __del__(self):
        self.close()
