"""Uniform client for chat-completion and embedding endpoints.

Every call is keyed by a content digest of its canonical request and answered
from an on-disk cache when possible, so a pipeline re-run with a warm cache
issues zero network calls and reproduces its artifacts byte for byte. A
scripted backend (pattern -> response table loaded from a file) is a
first-class endpoint kind used by the offline test suite.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import httpx

from afcbench.prompting import PromptParseError

logger = logging.getLogger(__name__)

CHAT_KIND = "chat"
EMBEDDINGS_KIND = "embeddings"

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    """Terminal failure of a model call (HTTP 4xx, retries exhausted, bad payload)."""


class ScriptedBackendError(GatewayError):
    """The scripted backend has no rule matching a request."""


class ParseRetriesExhausted(GatewayError):
    """A model kept producing unparseable output; raw attempts are retained."""

    def __init__(self, attempts: list[str], cause: Exception):
        super().__init__(f"output unparseable after {len(attempts)} attempt(s): {cause}")
        self.attempts = attempts
        self.cause = cause


@dataclass
class ChatRequest:
    """One chat-completions request; temperature defaults to 0 everywhere."""

    model: str
    messages: list[dict[str, str]]
    temperature: float = 0.0
    max_tokens: int | None = None
    seed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.temperature = float(self.temperature)

    def validate(self) -> None:
        if not self.model:
            raise ValueError("model must be non-empty")
        if not self.messages:
            raise ValueError("messages must be non-empty")
        for message in self.messages:
            if message.get("role") not in ("system", "user", "assistant"):
                raise ValueError(f"invalid message role {message.get('role')!r}")
            if not isinstance(message.get("content"), str):
                raise ValueError("message content must be a string")
        if self.messages[0]["role"] not in ("system", "user"):
            raise ValueError("first message role must be system or user")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive when set")

    def text(self) -> str:
        """All message contents joined; the scripted backend matches on this."""
        return "\n\n".join(message["content"] for message in self.messages)

    def payload(self) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
        }
        if self.max_tokens is not None:
            body["max_tokens"] = self.max_tokens
        if self.seed is not None:
            body["seed"] = self.seed
        body.update(self.extra)
        return body


@dataclass
class ChatResponse:
    content: str
    finish_reason: str = "stop"
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: int = 0
    cached: bool = False


@dataclass
class EmbeddingVector:
    values: list[float]
    model: str

    def validate(self) -> None:
        if not self.values:
            raise ValueError("embedding vector is empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding vector contains non-finite values")


@dataclass(frozen=True)
class CacheKey:
    digest: str


@dataclass
class RequestDefaults:
    """Sampling settings applied to every request a stage composes."""

    temperature: float = 0.0
    max_tokens: int | None = None
    seed: int | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def request(self, model: str, prompt: str, system: str | None = None) -> ChatRequest:
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": prompt})
        return ChatRequest(
            model=model,
            messages=messages,
            temperature=self.temperature,
            max_tokens=self.max_tokens,
            seed=self.seed,
            extra=dict(self.extra),
        )


def canonical_json(value: Any) -> str:
    """Deterministic serialization: sorted keys, compact separators."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def _digest(kind: str, payload: Any) -> str:
    body = canonical_json({"kind": kind, "payload": payload})
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def chat_cache_key(request: ChatRequest) -> CacheKey:
    """Content digest of a chat request; any field change changes the digest."""
    return CacheKey(_digest(CHAT_KIND, request.payload()))


# Operation name used by callers that only ever key chat requests.
cache_key = chat_cache_key


def embedding_cache_key(model: str, text: str) -> CacheKey:
    return CacheKey(_digest(EMBEDDINGS_KIND, {"model": model, "input": text}))


class ResponseCache:
    """Content-addressed response store with 2-hex fan-out subdirectories.

    Writes go to a temp file in the target directory and are renamed into
    place, so a crashed write never leaves a partial entry readable. Safe for
    concurrent readers and writers.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def path_for(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> dict | None:
        path = self.path_for(digest)
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError) as err:
            logger.warning("ignoring unreadable cache entry %s: %s", path, err)
            return None

    def put(self, digest: str, entry: dict) -> None:
        path = self.path_for(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        handle = tempfile.NamedTemporaryFile(
            "w", encoding="utf-8", dir=path.parent, suffix=".tmp", delete=False
        )
        try:
            with handle:
                handle.write(json.dumps(entry, ensure_ascii=False))
            os.replace(handle.name, path)
        except BaseException:
            try:
                os.unlink(handle.name)
            except OSError:
                pass
            raise


class HttpBackend:
    """Chat/embeddings client for /v1/chat/completions-compatible endpoints."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        max_attempts: int = 4,
        backoff_base: float = 0.5,
        transport: httpx.BaseTransport | None = None,
    ):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        delay = self.backoff_base
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(path, json=payload)
            except httpx.HTTPError as err:
                last_error = err
                logger.warning("request to %s failed (attempt %d): %s", path, attempt, err)
            else:
                if response.status_code == 200:
                    return response.json()
                if response.status_code in RETRYABLE_STATUS:
                    last_error = GatewayError(f"HTTP {response.status_code}: {response.text[:500]}")
                    retry_after = response.headers.get("Retry-After")
                    if response.status_code == 429 and retry_after:
                        try:
                            delay = max(delay, float(retry_after))
                        except ValueError:
                            pass
                else:
                    raise GatewayError(
                        f"HTTP {response.status_code} from {path}: {response.text[:2000]}"
                    )
            if attempt < self.max_attempts:
                time.sleep(delay)
                delay *= 2
        raise GatewayError(f"request to {path} failed after {self.max_attempts} attempts: {last_error}")

    def chat(self, request: ChatRequest) -> dict:
        body = self._post("/chat/completions", request.payload())
        try:
            choice = body["choices"][0]
            content = choice["message"]["content"]
            finish_reason = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as err:
            raise GatewayError(f"malformed chat response: {err}") from err
        if content is None:
            if finish_reason == "stop":
                raise GatewayError("chat response finished normally but has no content")
            content = ""
        usage = body.get("usage") or {}
        return {
            "content": content,
            "finish_reason": finish_reason,
            "prompt_tokens": int(usage.get("prompt_tokens", 0)),
            "completion_tokens": int(usage.get("completion_tokens", 0)),
        }

    def embed(self, text: str, model: str) -> list[float]:
        body = self._post("/embeddings", {"model": model, "input": text})
        try:
            return [float(v) for v in body["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError) as err:
            raise GatewayError(f"malformed embeddings response: {err}") from err


class ScriptedBackend:
    """Deterministic pattern -> response table standing in for a live endpoint.

    Chat rules are tried in order; the first rule whose ``requires`` substrings
    all occur in the joined message text wins. Embedding entries match the
    input text exactly (``text``) or by substring (``contains``). An unmatched
    request is an error rather than a silent default, unless ``chat_default``
    or ``embeddings_default`` is set in the table.

    The backend counts calls and tracks the number of simultaneously in-flight
    requests so tests can assert cache hits and the concurrency budget.
    """

    def __init__(self, table: dict, delay: float = 0.0):
        self.chat_rules = table.get("chat", [])
        self.embedding_rules = table.get("embeddings", [])
        self.chat_default = table.get("chat_default")
        self.embeddings_default = table.get("embeddings_default")
        self.delay = delay
        self.chat_calls = 0
        self.embed_calls = 0
        self.max_in_flight = 0
        self.call_log: list[tuple[str, str]] = []
        self._in_flight = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str, delay: float = 0.0) -> "ScriptedBackend":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")), delay=delay)

    @property
    def total_calls(self) -> int:
        return self.chat_calls + self.embed_calls

    def reset_counters(self) -> None:
        with self._lock:
            self.chat_calls = 0
            self.embed_calls = 0
            self.max_in_flight = 0
            self.call_log = []

    def _enter(self, kind: str, text: str) -> None:
        with self._lock:
            if kind == CHAT_KIND:
                self.chat_calls += 1
            else:
                self.embed_calls += 1
            self.call_log.append((kind, text))
            self._in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self._in_flight)
        if self.delay:
            time.sleep(self.delay)

    def _exit(self) -> None:
        with self._lock:
            self._in_flight -= 1

    def chat(self, request: ChatRequest) -> dict:
        text = request.text()
        self._enter(CHAT_KIND, text)
        try:
            for rule in self.chat_rules:
                if all(needle in text for needle in rule["requires"]):
                    content = rule["response"]
                    return {
                        "content": content,
                        "finish_reason": rule.get("finish_reason", "stop"),
                        "prompt_tokens": len(text) // 4,
                        "completion_tokens": len(content) // 4,
                    }
            if self.chat_default is not None:
                return {
                    "content": self.chat_default,
                    "finish_reason": "stop",
                    "prompt_tokens": len(text) // 4,
                    "completion_tokens": len(self.chat_default) // 4,
                }
            raise ScriptedBackendError(f"no scripted rule matches chat request: {text[:160]!r}")
        finally:
            self._exit()

    def embed(self, text: str, model: str) -> list[float]:
        self._enter(EMBEDDINGS_KIND, text)
        try:
            for rule in self.embedding_rules:
                if "text" in rule and rule["text"] == text:
                    return [float(v) for v in rule["vector"]]
            for rule in self.embedding_rules:
                if "contains" in rule and rule["contains"] in text:
                    return [float(v) for v in rule["vector"]]
            if self.embeddings_default is not None:
                return [float(v) for v in self.embeddings_default]
            raise ScriptedBackendError(f"no scripted embedding matches text: {text[:160]!r}")
        finally:
            self._exit()


class LlmGateway:
    """Cache-fronted, budget-limited facade over a chat/embeddings backend."""

    def __init__(self, backend, cache: ResponseCache | None = None, max_in_flight: int = 4):
        self.backend = backend
        self.cache = cache
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def complete(self, request: ChatRequest, bypass_cache: bool = False) -> ChatResponse:
        """Answer a chat request, from cache when the digest is already stored."""
        request.validate()
        digest = chat_cache_key(request).digest
        if self.cache and not bypass_cache:
            entry = self.cache.get(digest)
            if entry is not None:
                return ChatResponse(cached=True, **entry["response"])
        with self._slots:
            started = time.monotonic()
            raw = self.backend.chat(request)
            latency_ms = int((time.monotonic() - started) * 1000)
        stored = dict(raw, latency_ms=latency_ms)
        if self.cache:
            self.cache.put(digest, {"kind": CHAT_KIND, "request": request.payload(), "response": stored})
        return ChatResponse(cached=False, **stored)

    def embed(self, text: str, model: str, bypass_cache: bool = False) -> EmbeddingVector:
        """Embed a text, cached by (model, text) digest; repeats are byte-identical."""
        if not text.strip():
            raise ValueError("cannot embed empty text")
        if not model:
            raise ValueError("embedding model must be non-empty")
        digest = embedding_cache_key(model, text).digest
        if self.cache and not bypass_cache:
            entry = self.cache.get(digest)
            if entry is not None:
                return EmbeddingVector(values=entry["response"]["values"], model=model)
        with self._slots:
            values = self.backend.embed(text, model)
        vector = EmbeddingVector(values=values, model=model)
        vector.validate()
        if self.cache:
            self.cache.put(
                digest,
                {"kind": EMBEDDINGS_KIND, "request": {"model": model, "input": text}, "response": {"values": values}},
            )
        return vector

    def complete_parsed(
        self, request: ChatRequest, parser: Callable[[str], Any], retries: int = 2
    ) -> tuple[Any, ChatResponse]:
        """Call the model and parse its output, retrying on parse failure.

        Retries reuse the identical request but bypass the cache, so a bad
        cached response cannot wedge an item. After the retry budget the raw
        attempts are surfaced via ParseRetriesExhausted for audit records.
        """
        attempts: list[str] = []
        last_error: PromptParseError | None = None
        for attempt in range(retries + 1):
            response = self.complete(request, bypass_cache=attempt > 0)
            attempts.append(response.content)
            try:
                return parser(response.content), response
            except PromptParseError as err:
                last_error = err
                logger.debug("parse failure on attempt %d: %s", attempt + 1, err)
        raise ParseRetriesExhausted(attempts, last_error)
