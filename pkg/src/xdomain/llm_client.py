"""Chat-completion access to remote model endpoints, with retries, call
records, and a scripted backend for offline runs."""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")


class LLMError(RuntimeError):
    pass


class TransportError(LLMError):
    """A single attempt failed before a response arrived; retryable."""


class EndpointUnreachableError(LLMError):
    pass


class RemoteError(LLMError):
    def __init__(self, status: int, message: str = ""):
        super().__init__(f"remote returned status {status}: {message}".rstrip(": "))
        self.status = status


class EmptyResponseError(LLMError):
    pass


class ExhaustedScriptError(LLMError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.role != "system" and not self.content:
            raise ValueError(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass(frozen=True)
class ModelEndpoint:
    base_url: str
    model_name: str
    auth_secret_ref: str | None = None
    timeout: float = 120.0
    max_retries: int = 3

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @property
    def endpoint_id(self) -> str:
        return f"{self.model_name}@{self.base_url}"


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.7
    max_output_tokens: int = 4096
    stop_sequences: tuple[str, ...] = ()

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be >= 1")
        object.__setattr__(self, "stop_sequences", tuple(self.stop_sequences))

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "stop_sequences": list(self.stop_sequences),
        }


@dataclass(frozen=True)
class CallTag:
    """Which agent step a call belongs to; keys scripted responses."""

    agent: str
    round: int | None = None
    strategy: str | None = None
    item_id: str | None = None

    def key(self) -> str:
        r = "-" if self.round is None else str(self.round)
        return f"{self.agent}:{r}:{self.strategy or '-'}"

    def candidate_keys(self) -> list[str]:
        base = self.key()
        wild = base.rsplit(":", 1)[0] + ":*"
        keys = []
        if self.item_id is not None:
            keys += [f"{self.item_id}/{base}", f"{self.item_id}/{wild}"]
        return keys + [base, wild]

    def to_dict(self) -> dict:
        return {"agent": self.agent, "round": self.round, "strategy": self.strategy, "item_id": self.item_id}


@dataclass
class CallRecord:
    messages: list[dict]
    params: dict
    response: str | None
    attempts: int
    endpoint_id: str
    latency: float = 0.0
    timestamp: str = ""
    tag: CallTag | None = None
    error: str | None = None

    def to_dict(self, timing: bool = True) -> dict:
        d: dict[str, Any] = {
            "tag": None if self.tag is None else self.tag.to_dict(),
            "endpoint_id": self.endpoint_id,
            "messages": self.messages,
            "params": self.params,
            "response": self.response,
            "attempts": self.attempts,
            "error": self.error,
        }
        if timing:
            d["latency"] = self.latency
            d["timestamp"] = self.timestamp
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> CallRecord:
        tag = d.get("tag")
        return cls(
            messages=list(d["messages"]),
            params=dict(d["params"]),
            response=d.get("response"),
            attempts=int(d["attempts"]),
            endpoint_id=str(d["endpoint_id"]),
            latency=float(d.get("latency", 0.0)),
            timestamp=str(d.get("timestamp", "")),
            tag=None if tag is None else CallTag(**tag),
            error=d.get("error"),
        )


class Backend(Protocol):
    endpoint_id: str
    # True when responses depend on call order (FIFO scripts); callers then serialise.
    requires_order: bool

    def send(self, messages: Sequence[ChatMessage], params: GenerationParams, tag: CallTag | None) -> str: ...


class HttpBackend:
    """OpenAI-style ``/chat/completions`` over HTTP with a bearer token."""

    requires_order = False

    def __init__(self, endpoint: ModelEndpoint, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.endpoint_id = endpoint.endpoint_id
        self._client = client or httpx.Client(timeout=endpoint.timeout)

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        ref = self.endpoint.auth_secret_ref
        if ref:
            token = os.environ.get(ref)
            if not token:
                raise LLMError(f"environment variable {ref} (auth secret) is not set")
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def send(self, messages, params, tag=None) -> str:
        payload = {
            "model": self.endpoint.model_name,
            "messages": [m.to_dict() for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.stop_sequences:
            payload["stop"] = list(params.stop_sequences)
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        try:
            resp = self._client.post(url, json=payload, headers=self._headers(), timeout=self.endpoint.timeout)
        except httpx.HTTPError as exc:
            raise TransportError(f"{type(exc).__name__}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _RetryableStatus(resp.status_code, resp.text[:200])
        if resp.status_code >= 400:
            raise RemoteError(resp.status_code, resp.text[:200])
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise RemoteError(resp.status_code, f"malformed completion body ({exc})") from exc
        return content or ""


class _RetryableStatus(TransportError):
    def __init__(self, status: int, message: str):
        super().__init__(f"status {status}: {message}")
        self.status = status


class ScriptedBackend:
    """Deterministic canned responses.

    ``script`` is either a list (consumed FIFO) or a mapping keyed by
    ``"agent:round:strategy"`` (optionally prefixed ``"item_id/"``; ``*``
    matches any strategy).  A string value answers every matching call; a
    list is consumed in order.  A response that is an ``Exception`` instance, or a dict
    ``{"error": "..."}``, is raised as a transport failure when consumed.
    """

    endpoint_id = "scripted"

    def __init__(self, script: Sequence | Mapping):
        if not script:
            raise ValueError("script must be non-empty")
        self._lock = threading.Lock()
        self.requests: list[tuple[CallTag | None, list[ChatMessage]]] = []
        if isinstance(script, Mapping):
            self.requires_order = False
            self._queue = None
            self._keyed = {k: deque(v) for k, v in script.items() if isinstance(v, list)}
            self._fixed = {k: v for k, v in script.items() if not isinstance(v, list)}
        else:
            self.requires_order = True
            self._queue = deque(script)
            self._keyed = self._fixed = None

    @classmethod
    def from_call_records(cls, records: Iterable[CallRecord]) -> ScriptedBackend:
        """Replay recorded transcripts keyed by item and step."""
        keyed: dict[str, list] = {}
        for rec in records:
            if rec.tag is None or rec.response is None:
                continue
            keyed.setdefault(rec.tag.candidate_keys()[0], []).append(rec.response)
        return cls(keyed)

    @classmethod
    def from_file(cls, path) -> ScriptedBackend:
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def remaining(self) -> int:
        if self._queue is not None:
            return len(self._queue)
        return sum(len(v) for v in self._keyed.values())

    def send(self, messages, params, tag=None) -> str:
        with self._lock:
            self.requests.append((tag, list(messages)))
            if self._queue is not None:
                if not self._queue:
                    raise ExhaustedScriptError(f"script exhausted at call {len(self.requests)} ({tag and tag.key()})")
                item = self._queue.popleft()
            else:
                keys = tag.candidate_keys() if tag else ["-"]
                item = _MISSING
                for k in keys:
                    q = self._keyed.get(k)
                    if q:
                        item = q.popleft()
                        break
                    if k in self._fixed:
                        item = self._fixed[k]
                        break
                if item is _MISSING:
                    raise ExhaustedScriptError(f"no scripted response for {keys[0]}")
        if isinstance(item, BaseException):
            raise item
        if isinstance(item, dict) and "error" in item:
            raise TransportError(str(item["error"]))
        return str(item)


_MISSING = object()


@dataclass
class Backoff:
    """Capped exponential backoff with multiplicative jitter."""

    base: float = 1.0
    factor: float = 2.0
    cap: float = 30.0
    jitter: float = 0.2
    rng: random.Random = field(default_factory=random.Random)

    def delay(self, retry_number: int) -> float:
        raw = min(self.cap, self.base * self.factor ** retry_number)
        return min(self.cap, raw * (1.0 + self.rng.uniform(-self.jitter, self.jitter)))


class ChatClient:
    """Shareable handle: retries, parallelism limit, and call capture."""

    def __init__(self, backend: Backend, *, max_retries: int = 3, parallelism: int = 4,
                 backoff: Backoff | None = None, sleep: Callable[[float], None] = time.sleep,
                 params: GenerationParams | None = None, clock: Callable[[], float] = time.monotonic):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.backend = backend
        self.max_retries = max_retries
        self.backoff = backoff or Backoff()
        self.default_params = params or GenerationParams()
        self._sleep = sleep
        self._clock = clock
        self._slots = threading.BoundedSemaphore(parallelism)
        self.parallelism = parallelism

    @classmethod
    def for_endpoint(cls, endpoint: ModelEndpoint, **kwargs) -> ChatClient:
        return cls(HttpBackend(endpoint), max_retries=endpoint.max_retries, **kwargs)

    @property
    def requires_order(self) -> bool:
        return getattr(self.backend, "requires_order", False)

    def complete(self, messages: Sequence[ChatMessage], params: GenerationParams | None = None,
                 tag: CallTag | None = None) -> tuple[str, CallRecord]:
        """Return ``(text, record)``; on failure the raised error carries ``.record``."""
        if not messages:
            raise ValueError("messages must be non-empty")
        if messages[0].role not in ("system", "user"):
            raise ValueError("first message must be a system or user turn")
        params = params or self.default_params
        record = CallRecord(
            messages=[m.to_dict() for m in messages],
            params=params.to_dict(),
            response=None,
            attempts=0,
            endpoint_id=getattr(self.backend, "endpoint_id", "unknown"),
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
            tag=tag,
        )
        start = self._clock()
        last: Exception | None = None
        with self._slots:
            for attempt in range(self.max_retries + 1):
                record.attempts = attempt + 1
                try:
                    text = self.backend.send(messages, params, tag)
                except TransportError as exc:
                    last = exc
                    log.warning("call %s attempt %d failed: %s", tag and tag.key(), attempt + 1, exc)
                    if attempt < self.max_retries:
                        self._sleep(self.backoff.delay(attempt))
                    continue
                except LLMError as exc:
                    record.error = f"{type(exc).__name__}: {exc}"
                    record.latency = self._clock() - start
                    exc.record = record
                    raise
                record.latency = self._clock() - start
                if not text or not text.strip():
                    record.error = "EmptyResponseError: empty completion"
                    err = EmptyResponseError("endpoint returned an empty completion")
                    err.record = record
                    raise err
                record.response = text
                return text, record
        record.latency = self._clock() - start
        if isinstance(last, _RetryableStatus):
            err: LLMError = RemoteError(last.status, str(last))
        else:
            err = EndpointUnreachableError(f"no response after {record.attempts} attempts: {last}")
        record.error = f"{type(err).__name__}: {err}"
        err.record = record
        raise err
