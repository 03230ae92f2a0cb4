"""Provider-agnostic chat with live, record and replay modes.

Replays are keyed by a content digest of (model id, normalized transcript),
so worker scheduling order never invalidates a cassette.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Callable, Mapping, Protocol, Sequence

from .retrieval import estimate_tokens

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
STAGES = ("nl_proof", "formalize", "fix")
MODES = ("live", "record", "replay")


class GatewayError(Exception):
    pass


class ReplayMiss(GatewayError):
    def __init__(self, key: str):
        super().__init__(f"no cassette entry for key {key}")
        self.key = key


class ProviderError(GatewayError):
    def __init__(self, status: int, body: str):
        super().__init__(f"provider returned {status}: {body[:500]}")
        self.status = status
        self.body = body


class RateLimited(ProviderError):
    pass


class BudgetExceeded(GatewayError):
    pass


class CassetteCollision(GatewayError):
    pass


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"bad role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class ChatTranscript:
    messages: tuple[ChatMessage, ...]
    stage_tags: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        msgs = self.messages
        if not msgs or msgs[0].role != "system":
            raise ValueError("transcript must start with a system message")
        rest = [m for m in msgs if m.role != "system"]
        lead = len(msgs) - len(rest)
        if any(m.role == "system" for m in msgs[lead:]):
            raise ValueError("system messages must lead the transcript")
        for i, m in enumerate(rest):
            if m.role != ("user" if i % 2 == 0 else "assistant"):
                raise ValueError("user/assistant roles must alternate")
        for k, v in self.stage_tags.items():
            if v not in STAGES:
                raise ValueError(f"bad stage tag {v!r}")

    def extend(self, *messages: ChatMessage, stage: str | None = None) -> "ChatTranscript":
        tags = dict(self.stage_tags)
        if stage is not None:
            for i in range(len(self.messages), len(self.messages) + len(messages)):
                tags[i] = stage
        return ChatTranscript(self.messages + tuple(messages), tags)

    @property
    def last(self) -> ChatMessage:
        return self.messages[-1]

    def normalized(self) -> list[dict]:
        return [{"role": m.role, "content": "\n".join(l.rstrip() for l in m.content.rstrip().split("\n"))}
                for m in self.messages]


@dataclass(frozen=True)
class GenerationParams:
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


def cassette_key(transcript: ChatTranscript, model_id: str) -> str:
    payload = json.dumps({"model": model_id, "messages": transcript.normalized()},
                         sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CassetteEntry:
    key: str
    request_snapshot: dict
    response: str
    recorded_at: str

    def to_json(self) -> dict:
        return {"key": self.key, "request_snapshot": self.request_snapshot,
                "response": self.response, "recorded_at": self.recorded_at}


class Cassette:
    """Append-only JSON Lines log of request/response pairs."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = path
        self._entries: dict[str, CassetteEntry] = {}
        self._lock = threading.Lock()
        if path is not None and os.path.exists(path):
            with open(path, encoding="utf-8") as f:
                for n, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    d = json.loads(line)
                    self._entries[d["key"]] = CassetteEntry(**d)

    def __contains__(self, key: str) -> bool:
        return key in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self):
        return list(self._entries)

    def get(self, key: str) -> CassetteEntry | None:
        return self._entries.get(key)

    def add(self, entry: CassetteEntry) -> None:
        with self._lock:
            old = self._entries.get(entry.key)
            if old is not None:
                if old.request_snapshot["messages"] != entry.request_snapshot["messages"] or \
                        old.request_snapshot["model_id"] != entry.request_snapshot["model_id"]:
                    raise CassetteCollision(f"digest collision on {entry.key}")
                return
            self._entries[entry.key] = entry
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(entry.to_json(), ensure_ascii=False) + "\n")


class Provider(Protocol):
    def complete(self, transcript: ChatTranscript, params: GenerationParams) -> str: ...


class RateLimiter:
    """Requests-per-minute window plus a concurrent-request cap, shared by all workers."""

    def __init__(self, requests_per_minute: int | None = None, max_concurrent: int = 4,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rpm = requests_per_minute
        self._sem = threading.BoundedSemaphore(max(1, max_concurrent))
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()
        self._clock = clock
        self._sleep = sleep

    def __enter__(self):
        self._sem.acquire()
        if self.rpm:
            while True:
                with self._lock:
                    now = self._clock()
                    while self._stamps and now - self._stamps[0] >= 60.0:
                        self._stamps.popleft()
                    if len(self._stamps) < self.rpm:
                        self._stamps.append(now)
                        break
                    wait = 60.0 - (now - self._stamps[0])
                self._sleep(wait)
        return self

    def __exit__(self, *exc):
        self._sem.release()


class Gateway:
    """Thread-safe chat front end over a provider and a cassette."""

    def __init__(self, provider: Provider | None = None, cassette: Cassette | None = None,
                 mode: str = "replay", token_budget: int | None = None,
                 limiter: RateLimiter | None = None, max_retries: int = 5,
                 backoff_base: float = 1.0, sleep: Callable[[float], None] = time.sleep):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.provider = provider
        self.cassette = cassette if cassette is not None else Cassette()
        self.mode = mode
        self.token_budget = token_budget
        self.limiter = limiter or RateLimiter()
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._lock = threading.Lock()
        self.tokens_used = 0
        self.calls = 0          # responses served, any mode
        self.provider_calls = 0

    def _charge(self, n: int) -> None:
        with self._lock:
            if self.token_budget is not None and self.tokens_used + n > self.token_budget:
                raise BudgetExceeded(f"token budget {self.token_budget} exceeded "
                                     f"({self.tokens_used} used, {n} more requested)")
            self.tokens_used += n

    def _live(self, transcript: ChatTranscript, params: GenerationParams) -> str:
        if self.provider is None:
            raise GatewayError(f"mode {self.mode!r} needs a provider")
        attempt = 0
        while True:
            try:
                with self.limiter:
                    with self._lock:
                        self.provider_calls += 1
                    return self.provider.complete(transcript, params)
            except RateLimited:
                if attempt >= self.max_retries:
                    raise
                self._sleep(self.backoff_base * (2 ** attempt))
                attempt += 1

    def chat(self, transcript: ChatTranscript, params: GenerationParams,
             mode: str | None = None) -> ChatMessage:
        mode = mode or self.mode
        if transcript.last.role != "user":
            raise ValueError("transcript must end with a user message")
        key = cassette_key(transcript, params.model_id)
        request_cost = sum(estimate_tokens(m.content) for m in transcript.messages)
        if mode == "replay":
            entry = self.cassette.get(key)
            if entry is None:
                raise ReplayMiss(key)
            self._charge(request_cost + estimate_tokens(entry.response))
            text = entry.response
        else:
            self._charge(request_cost)
            if mode == "record" and key in self.cassette:
                text = self.cassette.get(key).response
            else:
                text = self._live(transcript, params)
                if mode == "record":
                    self.cassette.add(CassetteEntry(
                        key=key,
                        request_snapshot={"model_id": params.model_id,
                                          "temperature": params.temperature,
                                          "max_output_tokens": params.max_output_tokens,
                                          "messages": transcript.normalized()},
                        response=text,
                        recorded_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                    ))
            self._charge(estimate_tokens(text))
        with self._lock:
            self.calls += 1
        return ChatMessage("assistant", text)


# -- provider adapters -------------------------------------------------------

def _post(url: str, headers: dict, body: dict, timeout: float) -> dict:
    import httpx

    try:
        r = httpx.post(url, headers=headers, json=body, timeout=timeout)
    except httpx.HTTPError as e:
        raise ProviderError(0, str(e)) from e
    if r.status_code == 429:
        raise RateLimited(429, r.text)
    if r.status_code >= 400:
        raise ProviderError(r.status_code, r.text)
    return r.json()


class OpenAIChat:
    """Chat-completions wire format.  Reads ``OPENAI_API_KEY`` and optional ``OPENAI_BASE_URL``."""

    def __init__(self, api_key: str | None = None, base_url: str | None = None, timeout: float = 600.0,
                 post: Callable[[str, dict, dict, float], dict] = _post):
        self.api_key = api_key or os.environ.get("OPENAI_API_KEY")
        self.base_url = (base_url or os.environ.get("OPENAI_BASE_URL") or "https://api.openai.com/v1").rstrip("/")
        self.timeout = timeout
        self._post = post

    def request_body(self, transcript: ChatTranscript, params: GenerationParams) -> dict:
        body = {
            "model": params.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in transcript.messages],
            "max_completion_tokens": params.max_output_tokens,
        }
        # Reasoning models reject an explicit temperature.
        if not params.model_id.startswith(("o1", "o3", "o4")):
            body["temperature"] = params.temperature
        return body

    def complete(self, transcript: ChatTranscript, params: GenerationParams) -> str:
        if not self.api_key:
            raise ProviderError(401, "OPENAI_API_KEY is not set")
        data = self._post(f"{self.base_url}/chat/completions",
                          {"Authorization": f"Bearer {self.api_key}"},
                          self.request_body(transcript, params), self.timeout)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProviderError(200, json.dumps(data)[:2000]) from e


class AnthropicChat:
    """Messages wire format.  Reads ``ANTHROPIC_API_KEY`` and optional ``ANTHROPIC_BASE_URL``."""

    def __init__(self, api_key: str | None = None, base_url: str | None = None, timeout: float = 600.0,
                 post: Callable[[str, dict, dict, float], dict] = _post):
        self.api_key = api_key or os.environ.get("ANTHROPIC_API_KEY")
        self.base_url = (base_url or os.environ.get("ANTHROPIC_BASE_URL") or "https://api.anthropic.com").rstrip("/")
        self.timeout = timeout
        self._post = post

    def request_body(self, transcript: ChatTranscript, params: GenerationParams) -> dict:
        system = "\n\n".join(m.content for m in transcript.messages if m.role == "system")
        return {
            "model": params.model_id,
            "system": system,
            "messages": [{"role": m.role, "content": m.content}
                         for m in transcript.messages if m.role != "system"],
            "max_tokens": params.max_output_tokens,
            "temperature": params.temperature,
        }

    def complete(self, transcript: ChatTranscript, params: GenerationParams) -> str:
        if not self.api_key:
            raise ProviderError(401, "ANTHROPIC_API_KEY is not set")
        data = self._post(f"{self.base_url}/v1/messages",
                          {"x-api-key": self.api_key, "anthropic-version": "2023-06-01"},
                          self.request_body(transcript, params), self.timeout)
        try:
            return "".join(b["text"] for b in data["content"] if b.get("type") == "text")
        except (KeyError, TypeError) as e:
            raise ProviderError(200, json.dumps(data)[:2000]) from e


class RoutingProvider:
    """Dispatch on model id: ``claude*`` goes to Anthropic, everything else to OpenAI."""

    def __init__(self, anthropic: Provider | None = None, openai: Provider | None = None):
        self.anthropic = anthropic or AnthropicChat()
        self.openai = openai or OpenAIChat()

    def complete(self, transcript: ChatTranscript, params: GenerationParams) -> str:
        target = self.anthropic if params.model_id.startswith("claude") else self.openai
        return target.complete(transcript, params)


def transcript_from_messages(pairs: Sequence[tuple[str, str]], stage_tags: Mapping[int, str] | None = None) -> ChatTranscript:
    return ChatTranscript(tuple(ChatMessage(r, c) for r, c in pairs), dict(stage_tags or {}))
