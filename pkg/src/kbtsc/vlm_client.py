"""Multimodal model transport: remote chat-completions endpoint and scripted stand-ins."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx

from .errors import (
    AuthOrQuotaError,
    MalformedOutput,
    RoleFailure,
    SchemaError,
    ScriptExhausted,
    TransportError,
)

log = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.2
DEFAULT_R_NET = 3
DEFAULT_R_SCHEMA = 2
DEFAULT_MAX_OUTPUT = 4096


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()


@dataclass(frozen=True)
class VlmRequest:
    parts: tuple  # str text segments and ImagePart images, in prompt order
    request_tag: str = "untagged"
    temperature: float = DEFAULT_TEMPERATURE
    max_output: int = DEFAULT_MAX_OUTPUT

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not any(isinstance(p, str) for p in self.parts):
            raise ValueError("a request needs at least one text part")
        if not all(isinstance(p, (str, ImagePart)) for p in self.parts):
            raise TypeError("parts must be str or ImagePart")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    @property
    def text(self) -> str:
        return "".join(p if isinstance(p, str) else "<image>" for p in self.parts)

    @property
    def images(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]

    def with_text(self, extra: str, tag_suffix: str | None = None) -> "VlmRequest":
        tag = f"{self.request_tag}/{tag_suffix}" if tag_suffix else self.request_tag
        return replace(self, parts=self.parts + (extra,), request_tag=tag)


@dataclass(frozen=True)
class VlmResponse:
    raw_text: str
    latency_ms: int = 0
    attempt: int = 1


class TranscriptLog:
    """JSON-lines record of every send: tag, prompt, image hashes, raw reply."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, request: VlmRequest, response: VlmResponse | None, error: str | None = None):
        rec = {
            "request_tag": request.request_tag,
            "prompt": request.text,
            "image_sha256": [im.sha256 for im in request.images],
            "temperature": request.temperature,
            "raw_response": response.raw_text if response else None,
            "attempt": response.attempt if response else None,
            "latency_ms": response.latency_ms if response else None,
        }
        if error:
            rec["error"] = error
        with self._lock:
            self.records.append(rec)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")

    def tags(self) -> list[str]:
        return [r["request_tag"] for r in self.records]


class VlmClient:
    """Base transport; subclasses implement `_send`."""

    def __init__(self, transcript: TranscriptLog | None = None):
        self.transcript = transcript if transcript is not None else TranscriptLog()
        self.calls = 0

    def send(self, request: VlmRequest) -> VlmResponse:
        self.calls += 1
        try:
            response = self._send(request)
        except Exception as exc:
            self.transcript.write(request, None, f"{type(exc).__name__}: {exc}")
            raise
        self.transcript.write(request, response)
        return response

    def _send(self, request: VlmRequest) -> VlmResponse:
        raise NotImplementedError


def tag_fallbacks(tag: str) -> list[str]:
    """The tag itself, then each shorter '/'-prefix: "a/b/c" -> ["a/b/c", "a/b", "a"]."""
    parts = tag.split("/")
    return ["/".join(parts[:i]) for i in range(len(parts), 0, -1)]


class ScriptedClient(VlmClient):
    """Replays canned responses, FIFO per request tag.

    A request is answered from the queue of its exact tag or, failing that,
    of the longest '/'-prefix of the tag that still has entries; tags are laid
    out as ``role/phase/step[/repairN]`` so scripts can address a single
    call or a whole role. Entries with ``repeat`` set are never consumed.
    """

    def __init__(self, script: Iterable = (), transcript: TranscriptLog | None = None):
        super().__init__(transcript)
        self.queues: dict[str, deque] = defaultdict(deque)
        for entry in script:
            if isinstance(entry, str):
                entry = {"request_tag": "", "response": entry}
            self.add(entry.get("request_tag", ""), entry["response"], bool(entry.get("repeat", False)))

    def add(self, tag: str, response, repeat: bool = False) -> None:
        if not isinstance(response, str):
            response = json.dumps(response)
        self.queues[tag].append((response, repeat))

    @classmethod
    def from_jsonl(cls, path, transcript: TranscriptLog | None = None) -> "ScriptedClient":
        entries = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    entries.append(json.loads(line))
        return cls(entries, transcript)

    def remaining(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def _send(self, request: VlmRequest) -> VlmResponse:
        for key in tag_fallbacks(request.request_tag) + [""]:
            queue = self.queues.get(key)
            if queue:
                text, repeat = queue[0]
                if not repeat:
                    queue.popleft()
                return VlmResponse(text, 0, 1)
        raise ScriptExhausted(f"no scripted response left for {request.request_tag!r}")


class FunctionClient(VlmClient):
    """Answers each request with a deterministic Python callable."""

    def __init__(self, responder: Callable[[VlmRequest], str], transcript: TranscriptLog | None = None):
        super().__init__(transcript)
        self.responder = responder

    def _send(self, request: VlmRequest) -> VlmResponse:
        return VlmResponse(self.responder(request), 0, 1)


@dataclass
class RemoteConfig:
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-4o"
    api_key_env: str = "VLM_API_KEY"
    timeout_s: float = 120.0
    r_net: int = DEFAULT_R_NET
    backoff_s: float = 1.0
    backoff_max_s: float = 30.0
    extra_headers: dict = field(default_factory=dict)


class RemoteClient(VlmClient):
    """OpenAI-compatible chat-completions client with inline base64 images."""

    def __init__(self, config: RemoteConfig, transcript=None, transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        super().__init__(transcript)
        self.config = config
        self._sleep = sleep
        headers = {"Content-Type": "application/json", **config.extra_headers}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=config.base_url.rstrip("/"), headers=headers, timeout=config.timeout_s, transport=transport
        )

    def body(self, request: VlmRequest) -> dict:
        content = []
        for p in request.parts:
            if isinstance(p, str):
                content.append({"type": "text", "text": p})
            else:
                b64 = base64.b64encode(p.data).decode("ascii")
                content.append({"type": "image_url", "image_url": {"url": f"data:{p.media_type};base64,{b64}"}})
        return {
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        }

    def _send(self, request: VlmRequest) -> VlmResponse:
        body = self.body(request)
        last = None
        for attempt in range(1, self.config.r_net + 1):
            t0 = time.monotonic()
            try:
                resp = self._http.post("/chat/completions", json=body)
            except httpx.HTTPError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    text = _completion_text(resp)
                    return VlmResponse(text, int((time.monotonic() - t0) * 1000), attempt)
                if resp.status_code in (401, 403):
                    raise AuthOrQuotaError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                if 400 <= resp.status_code < 500 and resp.status_code not in (408, 429):
                    raise AuthOrQuotaError(f"HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
                last = f"HTTP {resp.status_code}"
                if resp.status_code == 429 and attempt == self.config.r_net:
                    raise AuthOrQuotaError(f"rate limited after {attempt} attempts", 429)
            log.warning("send %s attempt %d failed: %s", request.request_tag, attempt, last)
            if attempt < self.config.r_net:
                self._sleep(min(self.config.backoff_s * 2 ** (attempt - 1), self.config.backoff_max_s))
        raise TransportError(f"{request.request_tag}: gave up after {self.config.r_net} attempts ({last})")

    def close(self):
        self._http.close()


def _completion_text(resp: httpx.Response) -> str:
    try:
        doc = resp.json()
        content = doc["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"unexpected completion payload: {resp.text[:200]}") from exc
    if isinstance(content, list):  # some providers return content parts
        content = "".join(c.get("text", "") for c in content if isinstance(c, dict))
    if not content:
        raise TransportError("empty completion")
    return content


def extract_json(raw_text: str, required_keys: Sequence[str] = ()) -> dict:
    """First balanced JSON object in `raw_text`, ignoring prose and code fences."""
    decoder = json.JSONDecoder()
    doc = None
    idx = raw_text.find("{")
    while idx != -1:
        try:
            candidate, _ = decoder.raw_decode(raw_text, idx)
        except json.JSONDecodeError:
            idx = raw_text.find("{", idx + 1)
            continue
        if isinstance(candidate, dict):
            doc = candidate
            break
        idx = raw_text.find("{", idx + 1)
    if doc is None:
        raise MalformedOutput("no parseable JSON object in reply")
    for key in required_keys:
        if key not in doc:
            raise SchemaError(key)
    return doc


def repair_instruction(required_keys: Sequence[str], problem: str) -> str:
    keys = ", ".join(required_keys)
    return (
        f"\n\nYour previous reply was not valid JSON with keys {keys}; reply with JSON only. "
        f"Problem: {problem}"
    )


def call_with_repair(
    client: VlmClient,
    request: VlmRequest,
    required_keys: Sequence[str],
    r_schema: int = DEFAULT_R_SCHEMA,
    validate: Callable[[dict], dict] | None = None,
) -> dict:
    """send -> extract_json (-> validate), re-asking up to `r_schema` times on bad output.

    Transport errors are not repaired here; they surface as RoleFailure.
    """
    raws = []
    current = request
    for attempt in range(r_schema + 1):
        try:
            raw = client.send(current).raw_text
        except TransportError as exc:
            raise RoleFailure(f"{request.request_tag}: transport failed: {exc}", raws) from exc
        raws.append(raw)
        try:
            doc = extract_json(raw, required_keys)
            return validate(doc) if validate else doc
        except MalformedOutput as exc:
            log.info("%s: malformed reply (attempt %d): %s", request.request_tag, attempt + 1, exc)
            current = request.with_text(repair_instruction(required_keys, str(exc)), f"repair{attempt + 1}")
    raise RoleFailure(f"{request.request_tag}: no valid reply after {r_schema + 1} attempts", raws)
