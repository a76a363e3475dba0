"""Client for OpenAI-compatible chat-completion endpoints.

One ``Gateway`` is shared by every worker: it bounds in-flight requests,
optionally throttles the request rate, retries transient failures and writes
each attempt to an append-only JSONL audit log.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import math
import os
import re
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import httpx
from PIL import Image

from .retry import RetryPolicy

ENDPOINT_ENV = "EXPOSOME_LLM_ENDPOINT"
API_KEY_ENV = "EXPOSOME_LLM_API_KEY"
STUB_ENV = "EXPOSOME_STUB"

# per-stage sampling temperatures used for the published runs
STAGE_TEMPERATURES = {
    "extract": 0.1,
    "condense": 0.0,
    "cluster": 0.0,
    "rate": 0.6,
    "rate_replication": 0.7,
}


class GatewayError(Exception):
    pass


class TransportError(GatewayError):
    """Retries exhausted on network errors, 5xx or 429."""

    def __init__(self, message: str, attempts: int, status: int | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class NonRetryableError(GatewayError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body


class StructuredOutputError(GatewayError):
    """The reply could not be parsed into the schema, even after a re-prompt."""

    def __init__(self, diagnostic: str, raw: str, attempts: int = 0):
        super().__init__(diagnostic)
        self.diagnostic = diagnostic
        self.raw = raw
        self.attempts = attempts


@dataclass(frozen=True)
class ModelProfile:
    endpoint: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 120.0
    api_key: str | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (isinstance(self.temperature, (int, float)) and math.isfinite(self.temperature)
                and self.temperature >= 0):
            raise ValueError(f"temperature must be a finite number >= 0, got {self.temperature!r}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")

    def with_env(self) -> "ModelProfile":
        """Endpoint and key from the environment take precedence."""
        return replace(
            self,
            endpoint=os.environ.get(ENDPOINT_ENV) or self.endpoint,
            api_key=os.environ.get(API_KEY_ENV) or self.api_key,
        )


_FORMATS = {"image/jpeg": "JPEG", "image/png": "PNG"}


@dataclass(frozen=True)
class ImagePayload:
    data_b64: str = field(repr=False)
    media_type: str

    def __post_init__(self):
        if self.media_type not in _FORMATS:
            raise ValueError(f"unsupported media type {self.media_type!r}")
        try:
            raw = base64.b64decode(self.data_b64, validate=True)
            with Image.open(io.BytesIO(raw)) as im:
                fmt = im.format
                im.verify()
        except Exception as exc:
            raise ValueError(f"image payload does not decode: {exc}") from exc
        if fmt != _FORMATS[self.media_type]:
            raise ValueError(f"payload is {fmt}, declared {self.media_type}")

    @classmethod
    def from_path(cls, path: str | os.PathLike, max_edge: int = 1024) -> "ImagePayload":
        return cls.from_bytes(Path(path).read_bytes(), max_edge)

    @classmethod
    def from_bytes(cls, raw: bytes, max_edge: int = 1024) -> "ImagePayload":
        """Encode an image, downscaling so its longest edge is at most ``max_edge``."""
        with Image.open(io.BytesIO(raw)) as im:
            fmt = "PNG" if im.format == "PNG" else "JPEG"
            if im.format in ("PNG", "JPEG") and max(im.size) <= max_edge:
                data = raw
            else:
                im = im.copy()
                im.thumbnail((max_edge, max_edge), Image.Resampling.LANCZOS)
                if fmt == "JPEG" and im.mode not in ("RGB", "L"):
                    im = im.convert("RGB")
                buf = io.BytesIO()
                im.save(buf, format=fmt, **({"quality": 90} if fmt == "JPEG" else {}))
                data = buf.getvalue()
        media = "image/png" if fmt == "PNG" else "image/jpeg"
        return cls(base64.b64encode(data).decode("ascii"), media)

    @property
    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{self.data_b64}"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.data_b64.encode("ascii")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    system: str
    user: str
    profile: ModelProfile
    image: ImagePayload | None = None

    def messages(self) -> list[dict]:
        if self.image is None:
            user: Any = self.user
        else:
            user = [
                {"type": "text", "text": self.user},
                {"type": "image_url", "image_url": {"url": self.image.data_url}},
            ]
        return [{"role": "system", "content": self.system}, {"role": "user", "content": user}]


@dataclass
class CompletionResult:
    text: str
    parsed: dict | None = None
    latency: float = 0.0
    attempts: int = 0
    error: GatewayError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


# -- structured output ------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    """One schema field.  ``kind`` is number, integer, string, array or object."""

    name: str
    kind: str = "number"
    lo: float | None = None
    hi: float | None = None
    choices: tuple[str, ...] | None = None
    max_words: int | None = None
    required: bool = True


_FENCE = re.compile(r"```[a-zA-Z]*\s*")


def extract_json_object(text: str) -> dict | None:
    """First JSON object embedded in ``text`` (code fences and prose ignored)."""
    cleaned = _FENCE.sub("", text)
    dec = json.JSONDecoder()
    for m in re.finditer(r"\{", cleaned):
        try:
            obj, _ = dec.raw_decode(cleaned, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _check(value, f: Field) -> str:
    if f.kind in ("number", "integer"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return f"{f.name}: expected a number, got {value!r}"
        if not math.isfinite(value):
            return f"{f.name}: not finite"
        if f.kind == "integer" and value != int(value):
            return f"{f.name}: expected an integer, got {value!r}"
        if (f.lo is not None and value < f.lo) or (f.hi is not None and value > f.hi):
            return f"{f.name}: {value!r} outside [{f.lo}, {f.hi}]"
    elif f.kind == "string":
        if not isinstance(value, str):
            return f"{f.name}: expected a string, got {value!r}"
        if f.choices is not None and value not in f.choices:
            return f"{f.name}: {value!r} not one of {list(f.choices)}"
        if f.max_words is not None and len(value.split()) > f.max_words:
            return f"{f.name}: more than {f.max_words} words"
    elif f.kind == "array":
        if not isinstance(value, list):
            return f"{f.name}: expected an array"
    elif f.kind == "object":
        if not isinstance(value, dict):
            return f"{f.name}: expected an object"
    else:
        return f"{f.name}: unknown kind {f.kind!r}"
    return ""


def parse_structured(text: str, schema: Sequence[Field]) -> tuple[dict | None, str]:
    """Return (record, "") or (None, diagnostic)."""
    obj = extract_json_object(text)
    if obj is None:
        return None, "no JSON object in reply"
    out = {}
    for f in schema:
        if f.name not in obj:
            if f.required:
                return None, f"missing field {f.name!r}"
            continue
        problem = _check(obj[f.name], f)
        if problem:
            return None, problem
        out[f.name] = obj[f.name]
    return out, ""


# -- gateway ------------------------------------------------------------------------


class _Throttle:
    def __init__(self, rps: float | None, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / rps if rps else 0.0
        self.clock, self.sleep = clock, sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self):
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            self.sleep(slot - now)


def _retryable_status(code: int) -> bool:
    return code == 429 or code >= 500


def _reply_text(payload: dict) -> str:
    content = payload["choices"][0]["message"]["content"]
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise TypeError("message content is not text")
    return content


class Gateway:
    def __init__(
        self,
        *,
        transport: httpx.BaseTransport | None = None,
        retry: RetryPolicy = RetryPolicy(),
        max_in_flight: int = 16,
        rps: float | None = None,
        audit_path: str | os.PathLike | None = None,
    ):
        self.http = httpx.Client(transport=transport)
        self.retry = retry
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._throttle = _Throttle(rps)
        self.audit_path = Path(audit_path) if audit_path else None
        self._audit_lock = threading.Lock()

    @classmethod
    def from_env(cls, **kwargs) -> "Gateway":
        """Use the deterministic stub when ``EXPOSOME_STUB`` is set to a true value."""
        if os.environ.get(STUB_ENV, "").strip().lower() in ("1", "true", "yes", "on"):
            from .stub import stub_transport

            kwargs.setdefault("transport", stub_transport())
        return cls(**kwargs)

    def close(self):
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _audit(self, entry: dict) -> None:
        if self.audit_path is None:
            return
        entry = {"ts": datetime.now(timezone.utc).isoformat(), **entry}
        line = json.dumps(entry, sort_keys=True, ensure_ascii=False) + "\n"
        with self._audit_lock:
            self.audit_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(line)

    @staticmethod
    def _audit_messages(messages: list[dict]) -> list[dict]:
        out = []
        for m in messages:
            content = m["content"]
            if isinstance(content, list):
                content = [
                    {"type": "image_url", "sha256": hashlib.sha256(
                        p["image_url"]["url"].encode()).hexdigest()}
                    if p.get("type") == "image_url" else p
                    for p in content
                ]
            out.append({"role": m["role"], "content": content})
        return out

    def _post(self, profile: ModelProfile, messages: list[dict]) -> tuple[str, int]:
        url = profile.endpoint.rstrip("/") + "/v1/chat/completions"
        body = {
            "model": profile.model,
            "messages": messages,
            "temperature": profile.temperature,
            "max_tokens": profile.max_tokens,
        }
        headers = {"Authorization": f"Bearer {profile.api_key}"} if profile.api_key else {}
        request_id = uuid.uuid4().hex
        last = ""
        status = None
        for attempt in range(1, self.retry.max_attempts + 1):
            if attempt > 1:
                self.retry.wait(attempt - 1)
            self._throttle.acquire()
            entry = {"request_id": request_id, "attempt": attempt, "model": profile.model,
                     "endpoint": url, "temperature": profile.temperature,
                     "messages": self._audit_messages(messages)}
            t0 = time.perf_counter()
            try:
                with self._slots:
                    resp = self.http.post(url, json=body, headers=headers, timeout=profile.timeout)
            except httpx.TransportError as exc:
                last, status = f"{type(exc).__name__}: {exc}", None
                self._audit({**entry, "error": last, "latency": time.perf_counter() - t0})
                continue
            latency = time.perf_counter() - t0
            status = resp.status_code
            self._audit({**entry, "status": status, "response": resp.text, "latency": latency})
            if _retryable_status(status):
                last = f"HTTP {status}"
                continue
            if status >= 400:
                raise NonRetryableError(status, resp.text)
            try:
                return _reply_text(resp.json()), attempt
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                last = f"malformed completion body: {exc}"
        raise TransportError(f"{url}: {last} after {self.retry.max_attempts} attempts",
                             self.retry.max_attempts, status)

    def complete(self, req: ChatRequest) -> CompletionResult:
        t0 = time.perf_counter()
        text, attempts = self._post(req.profile, req.messages())
        return CompletionResult(text, latency=time.perf_counter() - t0, attempts=attempts)

    def complete_structured(self, req: ChatRequest, schema: Sequence[Field]) -> CompletionResult:
        t0 = time.perf_counter()
        messages = req.messages()
        text, attempts = self._post(req.profile, messages)
        record, problem = parse_structured(text, schema)
        if record is None:
            repair = messages + [
                {"role": "assistant", "content": text},
                {"role": "user", "content": (
                    f"That reply could not be used ({problem}). Answer again with a single "
                    "JSON object containing only the requested keys.")},
            ]
            text, more = self._post(req.profile, repair)
            attempts += more
            record, problem = parse_structured(text, schema)
            if record is None:
                raise StructuredOutputError(problem, text, attempts)
        return CompletionResult(text, record, time.perf_counter() - t0, attempts)

    def run_repeated(self, req: ChatRequest, k: int,
                     schema: Sequence[Field] | None = None) -> list[CompletionResult]:
        """``k`` independent calls in order; a failed run carries its error."""
        if k < 1:
            raise ValueError("k must be >= 1")
        out = []
        for _ in range(k):
            try:
                res = self.complete_structured(req, schema) if schema else self.complete(req)
            except GatewayError as exc:
                res = CompletionResult(getattr(exc, "raw", ""), error=exc,
                                       attempts=getattr(exc, "attempts", 0))
            out.append(res)
        return out
