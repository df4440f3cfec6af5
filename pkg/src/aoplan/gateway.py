"""Chat-completion access: live HTTP client, scripted backend, record/replay.

Every component talks to an LLM through :class:`Gateway`, which adds retry
with exponential backoff and a per-run usage ledger on top of a backend.
A backend is any object with ``complete(request) -> ChatResponse``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import defaultdict, deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import httpx

from .errors import (
    BackendError,
    BackendUnavailable,
    ReplayMiss,
    ScriptMiss,
    TransientBackendError,
)

logger = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_BACKOFF = 1.0


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_tokens: int = 2048
    tag: str = ""

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("system and user prompts must be non-empty")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    def digest(self) -> str:
        """Stable hash over everything that influences the completion (not the tag)."""
        payload = json.dumps(
            [self.system_prompt, self.user_prompt, self.temperature, self.max_tokens],
            ensure_ascii=False,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


# ---------------------------------------------------------------------------
# live backend


class OpenAIChatBackend:
    """OpenAI-compatible ``/chat/completions`` over HTTPS.

    Transport errors, 429 and 5xx responses raise :class:`TransientBackendError`
    (retried by the gateway); everything else raises :class:`BackendError`.
    """

    def __init__(
        self,
        api_base: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
    ):
        self.api_base = (api_base or os.environ.get("LLM_API_BASE") or "").rstrip("/")
        self.api_key = api_key or os.environ.get("LLM_API_KEY")
        self.model = model or os.environ.get("LLM_MODEL") or "gpt-4o"
        if not self.api_base:
            raise BackendError("LLM_API_BASE is not set")
        if not self.api_key:
            raise BackendError("LLM_API_KEY is not set")
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        start = time.monotonic()
        try:
            resp = self._client.post(
                f"{self.api_base}/chat/completions", json=payload, headers=headers
            )
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion payload: {exc}") from exc
        usage = body.get("usage") or {}
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency_ms=int((time.monotonic() - start) * 1000),
        )


# ---------------------------------------------------------------------------
# scripted backend


@dataclass
class ScriptEntry:
    """One canned answer.

    ``matcher`` is a substring of the user prompt, or a regular expression
    when prefixed with ``re:``.  ``tag`` optionally restricts the entry to
    requests carrying that tag.  Token counts are reported as usage.
    """

    matcher: str
    response: str
    max_uses: int | None = None
    tag: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self):
        if not self.matcher:
            raise ValueError("matcher must be non-empty")
        if self.max_uses is not None and self.max_uses < 1:
            raise ValueError("max_uses must be positive")
        self._regex = re.compile(self.matcher[3:], re.S) if self.matcher.startswith("re:") else None

    def matches(self, request: ChatRequest) -> bool:
        if self.tag is not None and self.tag != request.tag:
            return False
        if self._regex is not None:
            return self._regex.search(request.user_prompt) is not None
        return self.matcher in request.user_prompt

    @classmethod
    def from_dict(cls, record: dict) -> "ScriptEntry":
        return cls(
            matcher=record["matcher"],
            response=record["response"],
            max_uses=record.get("max_uses"),
            tag=record.get("tag"),
            prompt_tokens=int(record.get("prompt_tokens", 0)),
            completion_tokens=int(record.get("completion_tokens", 0)),
        )


class ScriptedBackend:
    """Deterministic backend answering from an ordered script; first match wins.

    Entries with ``max_uses`` drop out once used up.  A request that matches
    nothing raises :class:`ScriptMiss` so that tests fail loudly.
    """

    def __init__(self, entries: Iterable[ScriptEntry | dict] = ()):
        self.entries = [e if isinstance(e, ScriptEntry) else ScriptEntry.from_dict(e) for e in entries]
        self._remaining = [e.max_uses for e in self.entries]
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        return cls(read_jsonl(path))

    def add(self, matcher: str, response: str, **kw) -> "ScriptedBackend":
        with self._lock:
            self.entries.append(ScriptEntry(matcher, response, **kw))
            self._remaining.append(self.entries[-1].max_uses)
        return self

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            for i, entry in enumerate(self.entries):
                if self._remaining[i] == 0 or not entry.matches(request):
                    continue
                if self._remaining[i] is not None:
                    self._remaining[i] -= 1
                return ChatResponse(entry.response, entry.prompt_tokens, entry.completion_tokens)
        raise ScriptMiss(
            f"no script entry for tag={request.tag!r}: {request.user_prompt[:160]!r}"
        )


class CallableBackend:
    """Adapter turning ``fn(request) -> str | ChatResponse`` into a backend."""

    def __init__(self, fn: Callable[[ChatRequest], str | ChatResponse]):
        self.fn = fn

    def complete(self, request: ChatRequest) -> ChatResponse:
        out = self.fn(request)
        return out if isinstance(out, ChatResponse) else ChatResponse(text=out)


# ---------------------------------------------------------------------------
# record / replay


class RecordingBackend:
    """Wraps a backend and appends every exchange to a JSONL recording."""

    def __init__(self, inner: Backend, path: str | Path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        response = self.inner.complete(request)
        record = {
            "tag": request.tag,
            "request_hash": request.digest(),
            "request": asdict(request),
            "response": asdict(response),
        }
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        return response


class ReplayBackend:
    """Answers from a recording keyed by request hash; never touches the network.

    Repeated identical requests are served in recorded order.
    """

    def __init__(self, path: str | Path):
        self._queues: dict[str, deque[ChatResponse]] = defaultdict(deque)
        self._lock = threading.Lock()
        for record in read_jsonl(path):
            self._queues[record["request_hash"]].append(ChatResponse(**record["response"]))

    def complete(self, request: ChatRequest) -> ChatResponse:
        key = request.digest()
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise ReplayMiss(f"request {key[:12]} (tag={request.tag!r}) not in recording")
            # keep the last answer for further repeats
            return queue.popleft() if len(queue) > 1 else queue[0]


# ---------------------------------------------------------------------------
# gateway + ledger


@dataclass
class UsageRow:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    calls: int = 0
    wall_time: float = 0.0


@dataclass
class UsageReport:
    rows: dict[str, UsageRow] = field(default_factory=dict)

    @property
    def total(self) -> UsageRow:
        out = UsageRow()
        for row in self.rows.values():
            out.prompt_tokens += row.prompt_tokens
            out.completion_tokens += row.completion_tokens
            out.calls += row.calls
            out.wall_time += row.wall_time
        return out

    def to_dict(self) -> dict:
        return {tag: asdict(row) for tag, row in sorted(self.rows.items())}


class Gateway:
    """Retrying front door to a backend with an exact usage ledger."""

    def __init__(
        self,
        backend: Backend,
        retries: int = DEFAULT_RETRIES,
        backoff: float = DEFAULT_BACKOFF,
        temperature: float = 0.0,
        max_tokens: int = 2048,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.backend = backend
        self.retries = retries
        self.backoff = backoff
        self.temperature = temperature
        self.max_tokens = max_tokens
        self._sleep = sleep
        self._clock = clock
        self._lock = threading.Lock()
        self._rows: dict[str, UsageRow] = {}

    def chat(self, system_prompt: str, user_prompt: str, tag: str = "") -> str:
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            tag=tag,
        )
        return self.complete(request).text

    def complete(self, request: ChatRequest) -> ChatResponse:
        attempt = 0
        start = self._clock()
        while True:
            try:
                response = self.backend.complete(request)
                break
            except TransientBackendError as exc:
                if attempt >= self.retries:
                    raise BackendUnavailable(
                        f"{request.tag or 'request'} failed after {attempt + 1} attempts: {exc}"
                    ) from exc
                delay = self.backoff * (2**attempt)
                logger.warning("transient backend failure (%s); retrying in %.1fs", exc, delay)
                self._sleep(delay)
                attempt += 1
        self._account(request.tag, response, self._clock() - start)
        return response

    def _account(self, tag: str, response: ChatResponse, elapsed: float) -> None:
        with self._lock:
            row = self._rows.setdefault(tag, UsageRow())
            row.prompt_tokens += response.prompt_tokens
            row.completion_tokens += response.completion_tokens
            row.calls += 1
            row.wall_time += elapsed

    def usage_report(self) -> UsageReport:
        with self._lock:
            return UsageReport({tag: UsageRow(**asdict(row)) for tag, row in self._rows.items()})

    def reset_usage(self) -> None:
        with self._lock:
            self._rows.clear()


def read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
