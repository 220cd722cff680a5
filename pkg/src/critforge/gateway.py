"""Chat-completion gateway: one entry point over live and mock backends.

Responses for deterministic requests (temperature 0, or an explicit seed) are
cached on disk keyed by a digest of the full request; sampled requests without
a seed bypass the cache entirely. Transient backend failures are retried with
exponential backoff, and in-flight calls are limited by a semaphore.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class BackendError(Exception):
    """Base class for gateway failures."""


class TransientBackendFailure(BackendError):
    """Retryable failure: timeouts, connection errors, 429s, 5xx."""


class BackendRefused(BackendError):
    """Non-retryable rejection (4xx other than rate limiting)."""


class BackendExhausted(BackendError):
    """The retry budget ran out on transient failures."""


class MockScriptError(Exception):
    """A mock script is structurally invalid."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: Optional[int] = None
    seed: Optional[int] = None
    purpose_tag: str = ""

    @property
    def cacheable(self) -> bool:
        return self.temperature == 0.0 or self.seed is not None

    def digest(self) -> str:
        """Cache key: model identity plus messages plus sampling parameters."""
        payload = {
            "model_id": self.model_id,
            "messages": [[m.role, m.content] for m in self.messages],
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "seed": self.seed,
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def prompt_text(self) -> str:
        return "\n\n".join(m.content for m in self.messages)


@dataclass
class CompletionResponse:
    text: str
    usage: dict
    latency: float
    cache_hit: bool
    backend_id: str


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class OpenAICompatBackend:
    """Minimal client for an OpenAI-style /chat/completions endpoint.

    transport is injectable for tests; it must behave like requests.post.
    """

    def __init__(self, endpoint: str, api_key: Optional[str] = None,
                 timeout: float = 60.0, transport: Optional[Callable] = None):
        self.endpoint = endpoint.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        if transport is None:
            import requests
            transport = requests.post
        self.transport = transport
        self.backend_id = "openai"

    def complete_once(self, request: CompletionRequest) -> tuple[str, dict]:
        payload: dict = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.max_tokens is not None:
            payload["max_tokens"] = request.max_tokens
        if request.seed is not None:
            payload["seed"] = request.seed
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.transport(
                f"{self.endpoint}/chat/completions",
                json=payload, headers=headers, timeout=self.timeout,
            )
        except Exception as exc:  # connection errors, timeouts
            raise TransientBackendFailure(f"transport error: {exc}") from exc
        status = getattr(resp, "status_code", 0)
        if status == 429 or status >= 500:
            raise TransientBackendFailure(f"backend returned {status}")
        if status >= 400:
            raise BackendRefused(f"backend returned {status}: {getattr(resp, 'text', '')[:200]}")
        body = resp.json()
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransientBackendFailure(f"malformed backend payload: {exc}") from exc
        return text, body.get("usage", {})


_PLACEHOLDER_RE = re.compile(r"<<(\w+)>>")


@dataclass(frozen=True)
class MockRule:
    """One scripted response. All present conditions must match (AND)."""

    response: str
    name: str = ""
    purpose: Optional[str] = None
    contains: Optional[str] = None
    pattern: Optional[str] = None

    def compiled(self) -> Optional[re.Pattern]:
        return re.compile(self.pattern, re.DOTALL) if self.pattern else None

    @property
    def is_default(self) -> bool:
        return self.purpose is None and self.contains is None and self.pattern is None


class MockScript:
    """Ordered matcher rules driving the mock backend.

    Rules are tried in file order; the first whose conditions all hold wins.
    Named groups captured by a rule's pattern are substituted into the
    response wherever <<group>> appears. The script must end in at least one
    unconditional rule so every request gets an answer.
    """

    def __init__(self, rules: list[MockRule]):
        if not rules:
            raise MockScriptError("mock script has no rules")
        if not any(r.is_default for r in rules):
            raise MockScriptError("mock script has no default (unconditional) rule")
        self.rules = rules
        self._compiled = []
        for rule in rules:
            try:
                self._compiled.append(rule.compiled())
            except re.error as exc:
                raise MockScriptError(f"rule {rule.name!r}: bad pattern: {exc}") from exc

    @classmethod
    def from_dict(cls, data: dict) -> "MockScript":
        raw_rules = data.get("rules")
        if not isinstance(raw_rules, list):
            raise MockScriptError("mock script must have a 'rules' list")
        rules = []
        for i, raw in enumerate(raw_rules):
            if not isinstance(raw, dict) or "response" not in raw:
                raise MockScriptError(f"rule #{i} must be an object with a 'response'")
            rules.append(MockRule(
                response=raw["response"],
                name=raw.get("name", f"rule-{i}"),
                purpose=raw.get("purpose"),
                contains=raw.get("contains"),
                pattern=raw.get("pattern"),
            ))
        return cls(rules)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise MockScriptError(f"cannot load mock script {path}: {exc}") from exc
        return cls.from_dict(data)

    def respond(self, request: CompletionRequest) -> str:
        text = request.prompt_text()
        for rule, compiled in zip(self.rules, self._compiled):
            if rule.purpose is not None and rule.purpose != request.purpose_tag:
                continue
            if rule.contains is not None and rule.contains not in text:
                continue
            groups: dict[str, str] = {}
            if compiled is not None:
                m = compiled.search(text)
                if not m:
                    continue
                groups = {k: v for k, v in m.groupdict().items() if v is not None}
            if groups:
                return _PLACEHOLDER_RE.sub(lambda mm: groups.get(mm.group(1), mm.group(0)),
                                           rule.response)
            return rule.response
        raise MockScriptError("no rule matched despite a default rule")  # pragma: no cover


class MockBackend:
    """Deterministic scripted backend for offline runs and tests."""

    def __init__(self, script: MockScript):
        self.script = script
        self.backend_id = "mock"

    def complete_once(self, request: CompletionRequest) -> tuple[str, dict]:
        text = self.script.respond(request)
        usage = {
            "prompt_tokens": len(request.prompt_text().split()),
            "completion_tokens": len(text.split()),
        }
        return text, usage


# ---------------------------------------------------------------------------
# Gateway
# ---------------------------------------------------------------------------

@dataclass
class GatewayStats:
    calls: int = 0
    cache_hits: int = 0
    backend_calls: int = 0
    retries: int = 0
    failures: int = 0
    in_flight: int = 0
    max_in_flight: int = 0

    def to_dict(self) -> dict:
        return {
            "calls": self.calls, "cache_hits": self.cache_hits,
            "backend_calls": self.backend_calls, "retries": self.retries,
            "failures": self.failures, "max_in_flight": self.max_in_flight,
        }


class ModelGateway:
    def __init__(self, backend, cache_dir: Optional[str | Path] = None,
                 max_attempts: int = 5, base_delay: float = 0.5, max_delay: float = 30.0,
                 concurrency: int = 4, sleeper: Callable[[float], None] = time.sleep,
                 default_model_id: str = ""):
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        self.backend = backend
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.max_attempts = max_attempts
        self.base_delay = base_delay
        self.max_delay = max_delay
        self.sleeper = sleeper
        self.default_model_id = default_model_id
        self._semaphore = threading.BoundedSemaphore(concurrency)
        self._lock = threading.Lock()
        self.stats = GatewayStats()

    # -- cache ---------------------------------------------------------------

    def _cache_path(self, digest: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{digest}.json"

    def _cache_read(self, request: CompletionRequest) -> Optional[dict]:
        path = self._cache_path(request.digest())
        if path is None or not path.exists():
            return None
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except (OSError, json.JSONDecodeError):
            logger.warning("dropping unreadable cache entry %s", path)
            return None

    def _cache_write(self, request: CompletionRequest, text: str, usage: dict,
                     backend_id: str) -> None:
        path = self._cache_path(request.digest())
        if path is None:
            return
        record = {
            "request": {
                "model_id": request.model_id,
                "messages": [[m.role, m.content] for m in request.messages],
                "temperature": request.temperature,
                "top_p": request.top_p,
                "max_tokens": request.max_tokens,
                "seed": request.seed,
            },
            "response": {"text": text, "usage": usage, "backend_id": backend_id},
        }
        # concurrent identical requests may write the same entry; unique temp
        # names keep the final atomic replace from racing
        tmp = path.with_name(f"{path.name}.tmp{os.getpid()}.{threading.get_ident()}")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(record, fh, sort_keys=True, ensure_ascii=False)
        os.replace(tmp, path)

    # -- main entry ----------------------------------------------------------

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        with self._semaphore:
            with self._lock:
                self.stats.calls += 1
                self.stats.in_flight += 1
                self.stats.max_in_flight = max(self.stats.max_in_flight, self.stats.in_flight)
            try:
                return self._complete_locked(request)
            finally:
                with self._lock:
                    self.stats.in_flight -= 1

    def _complete_locked(self, request: CompletionRequest) -> CompletionResponse:
        start = time.monotonic()
        if request.cacheable:
            cached = self._cache_read(request)
            if cached is not None:
                with self._lock:
                    self.stats.cache_hits += 1
                resp = cached["response"]
                return CompletionResponse(
                    text=resp["text"], usage=resp.get("usage", {}),
                    latency=time.monotonic() - start, cache_hit=True,
                    backend_id=resp.get("backend_id", "cache"),
                )

        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._lock:
                    self.stats.backend_calls += 1
                text, usage = self.backend.complete_once(request)
            except TransientBackendFailure as exc:
                last_error = exc
                if attempt == self.max_attempts:
                    break
                delay = min(self.base_delay * (2 ** (attempt - 1)), self.max_delay)
                with self._lock:
                    self.stats.retries += 1
                logger.debug("transient backend failure (attempt %d/%d), retrying in %.2fs: %s",
                             attempt, self.max_attempts, delay, exc)
                self.sleeper(delay)
                continue
            if request.cacheable:
                self._cache_write(request, text, usage, self.backend.backend_id)
            return CompletionResponse(
                text=text, usage=usage, latency=time.monotonic() - start,
                cache_hit=False, backend_id=self.backend.backend_id,
            )
        with self._lock:
            self.stats.failures += 1
        raise BackendExhausted(
            f"backend still failing after {self.max_attempts} attempts: {last_error}"
        ) from last_error
