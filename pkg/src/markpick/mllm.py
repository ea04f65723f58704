"""Chat-with-image client: prompt construction, reply parsing, wire transport.

The wire format is OpenAI-compatible chat completions. Prompt builders are
pure functions (temperature pinned to 0.0 by default) so identical inputs
produce byte-identical requests, which keeps request fingerprints and cache
keys stable.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import requests

from . import templates
from .errors import (
    AuthenticationError,
    MalformedResponseError,
    RetriesExhaustedError,
    SubjectParseError,
    TransientTransportError,
    TransportError,
)

# parse_selection statuses
PARSE_OK = "ok"
PARSE_OUT_OF_RANGE = "out_of_range"
PARSE_UNPARSEABLE = "unparseable"
PARSE_REFUSED = "refused"

DEFAULT_REFUSAL_PATTERNS = (
    "cannot",
    "can't",
    "unable to determine",
    "not able to",
    "no suitable",
)

SUBJECT_SEPARATOR = " ."


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    data: bytes


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]


@dataclass(frozen=True)
class ChatRequest:
    """One chat-completions call. At most one inline image per request."""

    model_id: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 256

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")
        images = sum(
            1 for m in self.messages for p in m.parts if isinstance(p, ImagePart)
        )
        if images > 1:
            raise ValueError(f"at most one image part per request, got {images}")

    def text_content(self) -> str:
        """All text parts joined; used for cache keys and mock matching."""
        return "\n".join(
            p.text for m in self.messages for p in m.parts if isinstance(p, TextPart)
        )

    def fingerprint(self) -> str:
        """Stable content hash; image parts contribute their byte hash only."""
        payload = {
            "model": self.model_id,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [
                {
                    "role": m.role,
                    "parts": [
                        {"text": p.text}
                        if isinstance(p, TextPart)
                        else {
                            "image_sha256": hashlib.sha256(p.data).hexdigest(),
                            "media_type": p.media_type,
                        }
                        for p in m.parts
                    ],
                }
                for m in self.messages
            ],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_wire(self) -> dict:
        """OpenAI-compatible request body (images as base64 data URLs)."""
        messages = []
        for m in self.messages:
            if all(isinstance(p, TextPart) for p in m.parts) and len(m.parts) == 1:
                content = m.parts[0].text
            else:
                content = []
                for p in m.parts:
                    if isinstance(p, TextPart):
                        content.append({"type": "text", "text": p.text})
                    else:
                        b64 = base64.b64encode(p.data).decode("ascii")
                        content.append(
                            {
                                "type": "image_url",
                                "image_url": {"url": f"data:{p.media_type};base64,{b64}"},
                            }
                        )
            messages.append({"role": m.role, "content": content})
        return {
            "model": self.model_id,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class SubjectSet:
    """Ordered subject phrases extracted from a referring expression."""

    subjects: tuple[str, ...]
    raw_reply: str

    def __post_init__(self):
        if not self.subjects:
            raise ValueError("a SubjectSet needs at least one subject")
        for s in self.subjects:
            if not s or s != s.strip():
                raise ValueError(f"subject phrase must be non-empty and trimmed: {s!r}")
            if SUBJECT_SEPARATOR in s:
                raise ValueError(f"subject phrase contains the separator token: {s!r}")

    def detector_prompt(self) -> str:
        """Joined form for detector backends that take a single prompt."""
        return " . ".join(self.subjects)


@dataclass(frozen=True)
class SelectionReply:
    """Parsed choice reply; parse_status encodes every failure mode."""

    chosen_mark: Optional[int]
    raw_reply: str
    parse_status: str

    def __post_init__(self):
        has_mark = self.chosen_mark is not None
        should_have = self.parse_status in (PARSE_OK, PARSE_OUT_OF_RANGE)
        if has_mark != should_have:
            raise ValueError(
                f"chosen_mark must be present iff status is ok/out_of_range "
                f"(status={self.parse_status}, mark={self.chosen_mark})"
            )


def build_tase_prompt(
    expression: str,
    *,
    model_id: str = "gpt-4o",
    temperature: float = 0.0,
    max_tokens: int = 256,
) -> ChatRequest:
    """Text-only request asking for subject phrases separated by " ."."""
    if not expression.strip():
        raise ValueError("expression must be non-empty")
    text = templates.SUBJECT_EXTRACTION_TEMPLATE.format(expression=expression)
    return ChatRequest(
        model_id=model_id,
        messages=(Message("user", (TextPart(text),)),),
        temperature=temperature,
        max_tokens=max_tokens,
    )


def parse_subjects(raw_reply: str) -> SubjectSet:
    """Split a reply on the " ." separator (and a terminal period).

    Preserves order and the model's casing; trims each phrase and drops
    empties. Raises SubjectParseError when nothing survives, which callers
    translate into the full-expression fallback.
    """
    text = raw_reply.strip()
    if text.endswith(".") and not text.endswith(SUBJECT_SEPARATOR):
        text = text[:-1]
    phrases = [p.strip() for p in text.split(SUBJECT_SEPARATOR)]
    phrases = [p for p in phrases if p]
    if not phrases:
        raise SubjectParseError(f"no subject phrase in reply: {raw_reply!r}")
    return SubjectSet(tuple(phrases), raw_reply)


def build_moos_prompt(
    expression: str,
    marked_image,
    mark_count: int,
    *,
    model_id: str = "gpt-4o",
    temperature: float = 0.0,
    max_tokens: int = 64,
) -> ChatRequest:
    """Choice request over a marked image; valid answers are [1]..[mark_count]."""
    if mark_count < 1:
        raise ValueError(f"mark_count must be >= 1, got {mark_count}")
    bracket_list = ", ".join(f"[{k}]" for k in range(1, mark_count + 1))
    text = templates.CHOICE_SELECTION_TEMPLATE.format(
        expression=expression, bracket_list=bracket_list
    )
    parts: tuple[Part, ...] = (
        TextPart(text),
        ImagePart("image/png", marked_image.image_png),
    )
    return ChatRequest(
        model_id=model_id,
        messages=(Message("user", parts),),
        temperature=temperature,
        max_tokens=max_tokens,
    )


_FIRST_INT = re.compile(r"\d+")


def parse_selection(
    raw_reply: str,
    mark_count: int,
    refusal_patterns: Sequence[str] = DEFAULT_REFUSAL_PATTERNS,
) -> SelectionReply:
    """Total parse of a choice reply.

    The first integer token (bracketed or not) decides ok/out_of_range; the
    refusal pattern list only applies when no integer is present at all, so
    every string maps to exactly one status.
    """
    if mark_count < 1:
        raise ValueError(f"mark_count must be >= 1, got {mark_count}")
    match = _FIRST_INT.search(raw_reply)
    if match:
        k = int(match.group())
        status = PARSE_OK if 1 <= k <= mark_count else PARSE_OUT_OF_RANGE
        return SelectionReply(k, raw_reply, status)
    lowered = raw_reply.lower()
    if any(pat in lowered for pat in refusal_patterns):
        return SelectionReply(None, raw_reply, PARSE_REFUSED)
    return SelectionReply(None, raw_reply, PARSE_UNPARSEABLE)


class MLLMTransport(Protocol):
    def send(self, request: ChatRequest) -> str: ...


class RateLimiter:
    """Process-wide token bucket gating outbound calls (requests per minute).

    A rate of 0 disables gating. Thread-safe; shared by all workers holding
    the same transport.
    """

    def __init__(self, requests_per_minute: int, clock=time.monotonic, sleep=time.sleep):
        self.rate = requests_per_minute
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._tokens = float(requests_per_minute)
        self._last = clock()

    def acquire(self) -> None:
        if self.rate <= 0:
            return
        per_second = self.rate / 60.0
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(float(self.rate), self._tokens + (now - self._last) * per_second)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / per_second
            self._sleep(wait)


class HTTPMLLMTransport:
    """Speaks the chat-completions wire protocol to a live endpoint."""

    def __init__(
        self,
        endpoint: str,
        api_key: str = "",
        timeout: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout
        self.session = session or requests.Session()

    def send(self, request: ChatRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                self.endpoint, json=request.to_wire(), headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise TransientTransportError(f"request to {self.endpoint} failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"endpoint rejected credentials (HTTP {resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientTransportError(f"HTTP {resp.status_code} from {self.endpoint}")
        if resp.status_code != 200:
            raise TransportError(f"HTTP {resp.status_code} from {self.endpoint}: {resp.text[:200]}")
        try:
            body = resp.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected chat-completions payload: {exc}") from exc
        if not isinstance(content, str):
            raise MalformedResponseError(f"reply content is not text: {type(content).__name__}")
        return content


class MockMLLMTransport:
    """In-process transport backed by a fixture map.

    Lookup order: exact request fingerprint, then ordered substring rules
    matched against the request's text parts (used where image bytes cannot
    be known up front, e.g. live-detector smoke runs). An optional failure
    schedule raises scripted transient errors before a fingerprint succeeds.
    """

    def __init__(
        self,
        fixtures: Optional[dict[str, str]] = None,
        rules: Optional[Sequence[tuple[str, str]]] = None,
        failure_schedule: Optional[dict[str, list[str]]] = None,
    ):
        self.fixtures = dict(fixtures or {})
        self.rules = list(rules or [])
        self.failure_schedule = {k: list(v) for k, v in (failure_schedule or {}).items()}
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | Path) -> "MockMLLMTransport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        rules = [(r["contains"], r["reply"]) for r in data.get("rules", [])]
        return cls(fixtures=data.get("exact", {}), rules=rules)

    def send(self, request: ChatRequest) -> str:
        fp = request.fingerprint()
        with self._lock:
            self.calls += 1
            pending = self.failure_schedule.get(fp)
            if pending:
                kind = pending.pop(0)
                if kind == "transient":
                    raise TransientTransportError("scripted transient failure")
                if kind == "auth":
                    raise AuthenticationError("scripted auth failure")
                raise TransportError(f"scripted failure: {kind}")
        if fp in self.fixtures:
            return self.fixtures[fp]
        text = request.text_content()
        for needle, reply in self.rules:
            if needle in text:
                return reply
        raise TransportError(f"no fixture for request fingerprint {fp[:12]}…")


@dataclass(frozen=True)
class CompletionResult:
    text: str
    retries: int


def chat_complete(
    request: ChatRequest,
    transport: MLLMTransport,
    *,
    max_retries: int = 3,
    backoff_base: float = 0.5,
    backoff_cap: float = 8.0,
    rate_limiter: Optional[RateLimiter] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> CompletionResult:
    """Send a request, retrying transient failures with exponential backoff.

    max_retries counts retries beyond the first attempt. Terminal errors
    (auth, malformed payload) propagate immediately; persistent transient
    failures raise RetriesExhaustedError.
    """
    last_exc: Optional[Exception] = None
    for attempt in range(max_retries + 1):
        if rate_limiter is not None:
            rate_limiter.acquire()
        try:
            text = transport.send(request)
            return CompletionResult(text=text, retries=attempt)
        except TransientTransportError as exc:
            last_exc = exc
            if attempt < max_retries:
                sleep(min(backoff_cap, backoff_base * (2**attempt)))
    raise RetriesExhaustedError(
        f"still failing after {max_retries} retries: {last_exc}"
    ) from last_exc
