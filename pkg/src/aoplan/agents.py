"""Expert agent adapters (code, math, search, commonsense) and their tools."""

from __future__ import annotations

import json
import logging
import os
import re
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import httpx

from .errors import (
    BoxedAnswerMissing,
    CodeExecutionError,
    CodeExtractionError,
    EmptyResults,
    SearchUnavailable,
)
from .gateway import Gateway
from .plan import AgentDescriptor, SubTask
from .templates import DEFAULT_TEMPLATES, TemplateSet

logger = logging.getLogger(__name__)


@dataclass
class ExecutionRecord:
    subtask_id: int
    agent_name: str
    response: str
    status: str = "ok"
    artifacts: dict = field(default_factory=dict)
    error: str = ""

    def __post_init__(self):
        if self.status not in ("ok", "failed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "ok" and not self.response.strip():
            raise ValueError("an ok record needs a non-empty response")

    @property
    def answer(self) -> str:
        """Short answer threaded into downstream prompts."""
        return self.artifacts.get("answer") or self.response

    def to_dict(self) -> dict:
        return {
            "subtask_id": self.subtask_id,
            "agent_name": self.agent_name,
            "response": self.response,
            "status": self.status,
            "artifacts": self.artifacts,
            "error": self.error,
        }


def failed(subtask: SubTask, agent_name: str, error: str, **artifacts) -> ExecutionRecord:
    return ExecutionRecord(subtask.id, agent_name, "", "failed", artifacts, error)


class Agent(Protocol):
    name: str

    def run(self, subtask: SubTask, history: str) -> ExecutionRecord: ...


# ---------------------------------------------------------------------------
# code execution


class CodeExecutor(Protocol):
    def run(self, code: str, timeout: float) -> str: ...


# Blocks outbound sockets inside the child interpreter.
_NO_NETWORK_PRELUDE = """\
import socket as _s
def _blocked(*a, **k):
    raise OSError("network access is disabled in the sandbox")
_s.socket.connect = _blocked
_s.socket.connect_ex = _blocked
_s.create_connection = _blocked
del _s, _blocked
"""


class SubprocessExecutor:
    """Runs code in a fresh isolated interpreter inside a temporary directory.

    The child gets a scrubbed environment, no socket connections, and is
    killed after ``timeout`` seconds.
    """

    def __init__(self, timeout: float = 10.0, python: str = sys.executable, block_network: bool = True):
        self.timeout = timeout
        self.python = python
        self.block_network = block_network

    def run(self, code: str, timeout: float | None = None) -> str:
        timeout = self.timeout if timeout is None else timeout
        source = (_NO_NETWORK_PRELUDE if self.block_network else "") + code
        with tempfile.TemporaryDirectory(prefix="aoplan-code-") as tmp:
            script = Path(tmp) / "main.py"
            script.write_text(source, encoding="utf-8")
            env = {"PATH": os.environ.get("PATH", ""), "HOME": tmp, "PYTHONIOENCODING": "utf-8"}
            try:
                proc = subprocess.run(
                    [self.python, "-I", str(script)],
                    cwd=tmp,
                    env=env,
                    capture_output=True,
                    text=True,
                    timeout=timeout,
                    stdin=subprocess.DEVNULL,
                )
            except subprocess.TimeoutExpired:
                raise CodeExecutionError("timeout", f"exceeded {timeout}s") from None
        if proc.returncode != 0:
            raise CodeExecutionError("nonzero_exit", proc.stderr.strip()[-500:])
        if not proc.stdout.strip():
            raise CodeExecutionError("empty_stdout")
        return proc.stdout.strip()


class StubExecutor:
    """Canned stdout for tests: first ``(matcher, stdout)`` whose matcher occurs in the code."""

    def __init__(self, outputs: Sequence[tuple[str, str]] | Callable[[str], str]):
        self.outputs = outputs

    @classmethod
    def from_file(cls, path: str | Path) -> "StubExecutor":
        rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
        return cls([(r["matcher"], r["stdout"]) for r in rows])

    def run(self, code: str, timeout: float | None = None) -> str:
        if callable(self.outputs):
            out = self.outputs(code)
        else:
            out = next((stdout for matcher, stdout in self.outputs if matcher in code), "")
        if not out.strip():
            raise CodeExecutionError("empty_stdout")
        return out.strip()


_FENCE = re.compile(r"```[ \t]*(?:python|py|python3)?[ \t]*\n(.*?)```", re.S | re.I)


def extract_code(text: str) -> str:
    blocks = [b for b in _FENCE.findall(text) if b.strip()]
    if not blocks:
        raise CodeExtractionError("no fenced code block in response")
    return blocks[0]


# ---------------------------------------------------------------------------
# search


@dataclass(frozen=True)
class Snippet:
    title: str
    snippet: str
    url: str = ""


class SearchClient(Protocol):
    def search(self, query: str) -> list[Snippet]: ...


class FixtureSearchClient:
    """Canned results keyed by (normalised) search query.

    The fixture file is JSON-lines ``{"query": ..., "results": [{title, snippet, url}]}``.
    """

    def __init__(self, results: dict[str, list[Snippet]] | None = None):
        self._results = {self._norm(k): v for k, v in (results or {}).items()}

    @staticmethod
    def _norm(q: str) -> str:
        return " ".join(q.lower().split()).strip(" .\"'")

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureSearchClient":
        results = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rec = json.loads(line)
                results[rec["query"]] = [Snippet(**r) for r in rec["results"]]
        return cls(results)

    def search(self, query: str) -> list[Snippet]:
        return list(self._results.get(self._norm(query), []))


class BingSearchClient:
    """Web search over the Bing v7 HTTP API, keyed by ``SEARCH_API_KEY``."""

    def __init__(
        self,
        api_key: str | None = None,
        endpoint: str = "https://api.bing.microsoft.com/v7.0/search",
        count: int = 5,
        client: httpx.Client | None = None,
    ):
        self.api_key = api_key or os.environ.get("SEARCH_API_KEY")
        self.endpoint = endpoint
        self.count = count
        self._client = client or httpx.Client(timeout=30.0)

    def search(self, query: str) -> list[Snippet]:
        if not self.api_key:
            raise SearchUnavailable("SEARCH_API_KEY is not set")
        try:
            resp = self._client.get(
                self.endpoint,
                params={"q": query, "count": self.count},
                headers={"Ocp-Apim-Subscription-Key": self.api_key},
            )
            resp.raise_for_status()
            pages = resp.json().get("webPages", {}).get("value", [])
        except (httpx.HTTPError, ValueError) as exc:
            raise SearchUnavailable(str(exc)) from exc
        return [Snippet(p.get("name", ""), p.get("snippet", ""), p.get("url", "")) for p in pages]


# ---------------------------------------------------------------------------
# agents


class _LLMAgent:
    def __init__(self, name: str, gateway: Gateway, templates: TemplateSet = DEFAULT_TEMPLATES):
        self.name = name
        self.gateway = gateway
        self.templates = templates

    def _chat(self, template: str, tag: str, **values) -> str:
        system, user = self.templates.render(template, **values)
        return self.gateway.chat(system, user, tag=tag)


class CodeAgent(_LLMAgent):
    def __init__(self, name, gateway, executor: CodeExecutor, timeout: float = 10.0, templates=DEFAULT_TEMPLATES):
        super().__init__(name, gateway, templates)
        self.executor = executor
        self.timeout = timeout

    def run(self, subtask: SubTask, history: str) -> ExecutionRecord:
        text = self._chat("code_agent", "code_agent", task=subtask.task, history=history)
        code = extract_code(text)
        output = self.executor.run(code, self.timeout)
        sentence = self._chat("code_rewrite", "code_rewrite", task=subtask.task, code=code, output=output).strip()
        if not sentence:
            return failed(subtask, self.name, "rewrite produced no text", code=code, stdout=output)
        return ExecutionRecord(subtask.id, self.name, sentence, artifacts={"code": code, "stdout": output})


def extract_boxed(text: str) -> str:
    """Contents of the last ``\\boxed{...}``, honouring nested braces."""
    start = text.rfind("\\boxed{")
    if start < 0:
        raise BoxedAnswerMissing("no \\boxed{...} in response")
    i = start + len("\\boxed{")
    depth = 1
    for j in range(i, len(text)):
        if text[j] == "{":
            depth += 1
        elif text[j] == "}":
            depth -= 1
            if depth == 0:
                return text[i:j].strip()
    raise BoxedAnswerMissing("unbalanced braces in \\boxed{...}")


class MathAgent(_LLMAgent):
    def run(self, subtask: SubTask, history: str) -> ExecutionRecord:
        text = self._chat("math_agent", "math_agent", task=subtask.task, history=history)
        try:
            answer = extract_boxed(text)
        except BoxedAnswerMissing:
            hint = history + "\nEnd with 'The answer is \\boxed{ANS}.'"
            text = self._chat("math_agent", "math_agent", task=subtask.task, history=hint)
            answer = extract_boxed(text)
        return ExecutionRecord(subtask.id, self.name, text.strip(), artifacts={"answer": answer})


class SearchAgent(_LLMAgent):
    def __init__(self, name, gateway, client: SearchClient, top_k: int = 5, templates=DEFAULT_TEMPLATES):
        super().__init__(name, gateway, templates)
        self.client = client
        self.top_k = top_k

    def run(self, subtask: SubTask, history: str) -> ExecutionRecord:
        query = self._chat("search_agent", "search_agent", task=subtask.task, history=history)
        query = query.strip().splitlines()[0].strip().strip("\"'") if query.strip() else ""
        if not query:
            return failed(subtask, self.name, "empty search query")
        hits = self.client.search(query)[: self.top_k]
        artifacts = {"query": query, "snippets": [s.__dict__ for s in hits]}
        if not hits:
            return failed(subtask, self.name, EmptyResults.__name__, **artifacts)
        snippets = "\n".join(f"{s.title}: {s.snippet}" for s in hits)
        answer = self._chat("search_rewrite", "search_rewrite", task=subtask.task, snippets=snippets).strip()
        if not answer:
            return failed(subtask, self.name, "rewrite produced no text", **artifacts)
        return ExecutionRecord(subtask.id, self.name, answer, artifacts=artifacts)


class CommonsenseAgent(_LLMAgent):
    def run(self, subtask: SubTask, history: str) -> ExecutionRecord:
        text = self._chat("commonsense_agent", "commonsense_agent", task=subtask.task, history=history)
        if not text.strip():
            return failed(subtask, self.name, "empty response")
        return ExecutionRecord(subtask.id, self.name, text)


def build_agents(
    roster: Sequence[AgentDescriptor],
    gateway: Gateway,
    executor: CodeExecutor | None = None,
    search_client: SearchClient | None = None,
    custom: dict[str, Agent] | None = None,
    templates: TemplateSet = DEFAULT_TEMPLATES,
    code_timeout: float = 10.0,
) -> dict[str, Agent]:
    """Instantiate one adapter per roster entry according to its ``kind``."""
    custom = custom or {}
    agents: dict[str, Agent] = {}
    for a in roster:
        if a.name in custom:
            agents[a.name] = custom[a.name]
        elif a.kind == "code":
            agents[a.name] = CodeAgent(a.name, gateway, executor or SubprocessExecutor(code_timeout), code_timeout, templates)
        elif a.kind == "math":
            agents[a.name] = MathAgent(a.name, gateway, templates)
        elif a.kind == "search":
            agents[a.name] = SearchAgent(a.name, gateway, search_client or BingSearchClient(), templates=templates)
        elif a.kind == "commonsense":
            agents[a.name] = CommonsenseAgent(a.name, gateway, templates)
        else:
            raise ValueError(f"custom agent {a.name!r} needs an implementation")
    return agents
