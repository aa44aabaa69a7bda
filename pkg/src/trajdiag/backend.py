"""Chat-model backends and the retry loop that wraps every model call.

Two backends share one interface: ``HttpBackend`` talks to any
OpenAI-style chat-completions endpoint, and ``MockBackend`` replays scripted
responses so whole pipeline runs are deterministic and offline. The retry
loop treats transport errors and unparseable responses identically, backing
off exponentially with seedable jitter.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import threading
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import requests

from .extraction import ExtractionError

logger = logging.getLogger(__name__)

STAGES = ("segment", "diagnose", "summarize", "seg_quality", "baseline")

# Stages whose requests must stay text-only.
IMAGE_FREE_STAGES = frozenset({"segment", "summarize"})


class TransportError(Exception):
    """Network- or provider-level failure of a single model call."""


class RetriesExhausted(Exception):
    """Every attempt allowed by the retry policy failed.

    Carries the per-attempt records, one reason string per attempt, and the
    raw text of the last response that was received (None if every attempt
    died in transport).
    """

    def __init__(self, stage_tag: str, attempts: list["AttemptRecord"], last_text: str | None):
        self.stage_tag = stage_tag
        self.attempts = attempts
        self.reasons = [f"attempt {a.attempt}: {a.outcome}: {a.detail}" for a in attempts]
        self.last_text = last_text
        super().__init__(
            f"stage {stage_tag!r}: no valid response after {len(attempts)} attempts "
            f"(last: {self.reasons[-1] if self.reasons else 'none'})"
        )


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatRequest:
    """One model call: a stage tag, a system message, and ordered user parts."""

    stage_tag: str
    system_text: str
    user_parts: tuple[Part, ...]
    temperature: float | None = None
    max_output: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_parts", tuple(self.user_parts))
        if self.stage_tag not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage_tag!r}")
        if not self.user_parts:
            raise ValueError("a request needs at least one user part")
        if self.stage_tag in IMAGE_FREE_STAGES and any(
            isinstance(p, ImagePart) for p in self.user_parts
        ):
            raise ValueError(f"stage {self.stage_tag!r} does not accept image parts")

    @property
    def image_parts(self) -> tuple[ImagePart, ...]:
        return tuple(p for p in self.user_parts if isinstance(p, ImagePart))

    @property
    def text_parts(self) -> tuple[TextPart, ...]:
        return tuple(p for p in self.user_parts if isinstance(p, TextPart))

    def joined_text(self) -> str:
        return "\n".join(p.text for p in self.text_parts)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict[str, int] | None = None
    latency: float = 0.0


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff with a cap and uniform multiplicative jitter."""

    max_attempts: int = 10
    base_delay: float = 1.0
    factor: float = 2.0
    max_delay: float = 60.0
    jitter_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.base_delay > self.max_delay:
            raise ValueError("base_delay must not exceed max_delay")
        if not 0.0 <= self.jitter_fraction <= 1.0:
            raise ValueError("jitter_fraction must be in [0, 1]")

    def delay_before(self, attempt: int) -> float:
        """Pre-jitter sleep before the 1-based ``attempt`` (0 for the first)."""
        if attempt <= 1:
            return 0.0
        return min(self.max_delay, self.base_delay * self.factor ** (attempt - 2))


@dataclass(frozen=True)
class AttemptRecord:
    attempt: int
    outcome: str  # "ok" | "transport_error" | "invalid"
    detail: str
    planned_delay: float
    slept: float


def request_fingerprint(request: ChatRequest) -> str:
    """Stable identity of a request's content (system text, texts, image digests)."""
    h = hashlib.sha256()
    h.update(request.system_text.encode("utf-8"))
    h.update(b"\x00")
    for part in request.user_parts:
        if isinstance(part, TextPart):
            h.update(b"t")
            h.update(part.text.encode("utf-8"))
        else:
            h.update(b"i")
            h.update(hashlib.sha256(part.data).digest())
        h.update(b"\x00")
    return h.hexdigest()[:16]


class Backend(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


# --- transcript sinks --------------------------------------------------------


class TranscriptSink(Protocol):
    def write(self, entry: dict[str, Any]) -> None: ...


class ListTranscript:
    """In-memory sink, mostly for tests and per-run stats."""

    def __init__(self) -> None:
        self.entries: list[dict[str, Any]] = []
        self._lock = threading.Lock()

    def write(self, entry: dict[str, Any]) -> None:
        with self._lock:
            self.entries.append(entry)


class JsonlTranscript:
    """Append-only audit file, one JSON line per model attempt."""

    def __init__(self, path: str | Path) -> None:
        self._path = Path(path)
        self._lock = threading.Lock()

    def write(self, entry: dict[str, Any]) -> None:
        line = json.dumps(entry, sort_keys=True)
        with self._lock, open(self._path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")


class CompositeSink:
    def __init__(self, *sinks: TranscriptSink) -> None:
        self._sinks = [s for s in sinks if s is not None]

    def write(self, entry: dict[str, Any]) -> None:
        for sink in self._sinks:
            sink.write(entry)


def record_transcript(
    sink: TranscriptSink | None,
    request: ChatRequest,
    response: ChatResponse | None,
    attempt: AttemptRecord,
) -> None:
    """Append one audit entry for a backend attempt. Never raises."""
    if sink is None:
        return
    entry: dict[str, Any] = {
        "stage": request.stage_tag,
        "fingerprint": request_fingerprint(request),
        "attempt": attempt.attempt,
        "outcome": attempt.outcome,
        "detail": attempt.detail,
        "planned_delay": attempt.planned_delay,
    }
    if response is not None:
        entry["latency"] = response.latency
        if response.usage:
            entry["usage"] = dict(response.usage)
    try:
        sink.write(entry)
    except Exception:
        logger.warning("transcript sink write failed; continuing", exc_info=True)


# --- the retry loop ----------------------------------------------------------


def complete_with_retry(
    backend: Backend,
    request: ChatRequest,
    policy: RetryPolicy,
    validator: Callable[[ChatResponse], Any],
    *,
    rng: random.Random | None = None,
    sleep: Callable[[float], None] = time.sleep,
    sink: TranscriptSink | None = None,
) -> Any:
    """Call ``backend`` until ``validator`` accepts a response.

    The validator maps a ChatResponse to a parsed value and signals rejection
    by raising ExtractionError (or any subclass, e.g. SchemaViolation).
    Transport errors and validator rejections both consume an attempt.
    Attempt k (k >= 2) is preceded by a sleep of
    min(max_delay, base_delay * factor**(k-2)) scaled by a jitter factor
    drawn uniformly from [1-j, 1+j] using ``rng``.

    Returns the validated value; raises RetriesExhausted when the budget
    runs out.
    """
    rng = rng if rng is not None else random.Random()
    attempts: list[AttemptRecord] = []
    last_text: str | None = None
    for attempt in range(1, policy.max_attempts + 1):
        planned = policy.delay_before(attempt)
        slept = 0.0
        if planned > 0.0:
            jitter = 1.0
            if policy.jitter_fraction > 0.0:
                jitter = rng.uniform(1.0 - policy.jitter_fraction, 1.0 + policy.jitter_fraction)
            slept = planned * jitter
            sleep(slept)
        try:
            response = backend.complete(request)
        except TransportError as exc:
            record = AttemptRecord(attempt, "transport_error", str(exc), planned, slept)
            attempts.append(record)
            record_transcript(sink, request, None, record)
            continue
        last_text = response.text
        try:
            value = validator(response)
        except ExtractionError as exc:
            record = AttemptRecord(attempt, "invalid", str(exc), planned, slept)
            attempts.append(record)
            record_transcript(sink, request, response, record)
            continue
        record = AttemptRecord(attempt, "ok", "", planned, slept)
        attempts.append(record)
        record_transcript(sink, request, response, record)
        return value
    raise RetriesExhausted(request.stage_tag, attempts, last_text)


# --- mock backend -------------------------------------------------------------


class MockBackend:
    """Deterministic scripted backend.

    Responses are looked up by (stage_tag, request fingerprint) in ``script``,
    falling back to ``stage_defaults[stage_tag]``, which may be a plain string
    or a callable of the request (so one entry can serve many requests while
    staying a pure function of request content). ``fail_first`` makes the
    first m calls for a key raise TransportError; keys are either a
    (stage_tag, fingerprint) pair or a bare stage tag. Counters decrement
    under a lock so concurrent use stays deterministic per key.
    """

    name = "mock"

    def __init__(
        self,
        script: Mapping[tuple[str, str], str] | None = None,
        stage_defaults: Mapping[str, str | Callable[[ChatRequest], str]] | None = None,
        fail_first: Mapping[Any, int] | None = None,
        latency: float = 0.0,
    ) -> None:
        self._script = dict(script or {})
        self._stage_defaults = dict(stage_defaults or {})
        self._faults = dict(fail_first or {})
        self._latency = latency
        self._lock = threading.Lock()
        self.requests: list[ChatRequest] = []

    @property
    def calls(self) -> list[tuple[str, str]]:
        return [(r.stage_tag, request_fingerprint(r)) for r in self.requests]

    def call_count(self, stage_tag: str | None = None) -> int:
        if stage_tag is None:
            return len(self.requests)
        return sum(1 for r in self.requests if r.stage_tag == stage_tag)

    def complete(self, request: ChatRequest) -> ChatResponse:
        fingerprint = request_fingerprint(request)
        key = (request.stage_tag, fingerprint)
        with self._lock:
            self.requests.append(request)
            fault_key = key if key in self._faults else request.stage_tag
            remaining = self._faults.get(fault_key, 0)
            if remaining > 0:
                self._faults[fault_key] = remaining - 1
                raise TransportError(
                    f"scripted fault for {fault_key!r} ({remaining} remaining)"
                )
        text = self._script.get(key)
        if text is None:
            default = self._stage_defaults.get(request.stage_tag)
            if default is None:
                # An unscripted request is a harness bug, not a model hiccup:
                # fail loudly instead of burning the retry budget.
                raise LookupError(
                    f"mock has no response for stage {request.stage_tag!r} "
                    f"fingerprint {fingerprint}"
                )
            text = default(request) if callable(default) else default
        return ChatResponse(text=text, latency=self._latency)

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockBackend":
        """Build a mock from a JSON file.

        Layout: {"stage_defaults": {stage: text}, "script": [{"stage": ...,
        "fingerprint": ..., "text": ...}], "fail_first": {key: m}} where a
        fail_first key is either a stage tag or "stage:fingerprint".
        """
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        script = {
            (entry["stage"], entry["fingerprint"]): entry["text"]
            for entry in raw.get("script", [])
        }
        faults: dict[Any, int] = {}
        for key, count in raw.get("fail_first", {}).items():
            if ":" in key:
                stage, fingerprint = key.split(":", 1)
                faults[(stage, fingerprint)] = int(count)
            else:
                faults[key] = int(count)
        return cls(
            script=script,
            stage_defaults=raw.get("stage_defaults", {}),
            fail_first=faults,
            latency=float(raw.get("latency", 0.0)),
        )


# --- live backend --------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for an OpenAI-style chat-completions endpoint."""

    endpoint: str
    model: str
    auth_env: str = "TRAJDIAG_API_KEY"  # name of the env var holding the token
    temperatures: Mapping[str, float] = field(default_factory=dict)  # per-stage
    timeout: float = 120.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "endpoint": self.endpoint,
            "model": self.model,
            "auth_env": self.auth_env,
            "temperatures": dict(self.temperatures),
            "timeout": self.timeout,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "BackendConfig":
        return cls(
            endpoint=data["endpoint"],
            model=data["model"],
            auth_env=data.get("auth_env", "TRAJDIAG_API_KEY"),
            temperatures=dict(data.get("temperatures", {})),
            timeout=float(data.get("timeout", 120.0)),
        )


def build_chat_payload(request: ChatRequest, config: BackendConfig) -> dict[str, Any]:
    """Pure request-body builder, unit-testable without any network."""
    content: list[dict[str, Any]] = []
    for part in request.user_parts:
        if isinstance(part, TextPart):
            content.append({"type": "text", "text": part.text})
        else:
            encoded = base64.b64encode(part.data).decode("ascii")
            content.append(
                {
                    "type": "image_url",
                    "image_url": {"url": f"data:{part.media_type};base64,{encoded}"},
                }
            )
    messages: list[dict[str, Any]] = []
    if request.system_text:
        messages.append({"role": "system", "content": request.system_text})
    messages.append({"role": "user", "content": content})
    payload: dict[str, Any] = {"model": config.model, "messages": messages}
    temperature = request.temperature
    if temperature is None:
        temperature = config.temperatures.get(request.stage_tag)
    if temperature is not None:
        payload["temperature"] = temperature
    if request.max_output is not None:
        payload["max_tokens"] = request.max_output
    return payload


class HttpBackend:
    """Live client for provider endpoints speaking the chat-completions shape.

    Safe for concurrent ``complete`` calls; the auth token is read from the
    configured environment variable at call time.
    """

    def __init__(self, config: BackendConfig, session: requests.Session | None = None):
        self._config = config
        self._session = session or requests.Session()

    @property
    def name(self) -> str:
        return f"http:{self._config.model}"

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self._config.auth_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = build_chat_payload(request, self._config)
        started = time.perf_counter()
        try:
            http_response = self._session.post(
                self._config.endpoint,
                json=payload,
                headers=self._headers(),
                timeout=self._config.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        latency = time.perf_counter() - started
        if http_response.status_code != 200:
            raise TransportError(
                f"HTTP {http_response.status_code}: {http_response.text[:300]}"
            )
        try:
            body = http_response.json()
            text = body["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed provider response: {exc}") from exc
        usage_raw = body.get("usage") or {}
        usage = {k: v for k, v in usage_raw.items() if isinstance(v, int)}
        return ChatResponse(text=text, usage=usage or None, latency=latency)
