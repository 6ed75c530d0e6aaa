"""Clients for the external models behind the pipeline.

One wire protocol covers every role (captioner, merger, QA answerer, NLI
judge): the standard chat-completions JSON protocol, with image content
parts for multimodal requests; embeddings use the matching
``/embeddings``-style protocol.  Any server speaking those protocols can
stand in for any model family.

Errors are split into three categories so callers can react sensibly:

* ``TransportError`` - could not reach the server or it failed
  transiently (connect, timeout, 5xx/429); retried with exponential
  backoff and jitter.
* ``ProtocolError`` - the server answered with something malformed
  (bad status, unparsable body, missing fields); not retried.
* ``ContentError`` - a well-formed but unusable completion (empty text,
  unparsable NLI label, zero embedding).

Requests are identified by a stable fingerprint (sha-256 of a canonical
serialization with sorted keys and whitespace-normalized strings), which
keys both the scripted mock and the on-disk response cache.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import requests

__all__ = [
    "BackendError",
    "TransportError",
    "ProtocolError",
    "ContentError",
    "MockScriptError",
    "BackendConfig",
    "ChatMessage",
    "Completion",
    "NliLabel",
    "MockBackend",
    "FunctionBackend",
    "HttpTransport",
    "ResponseCache",
    "Client",
    "fingerprint_request",
    "DEFAULT_REFUSAL_PHRASES",
]


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """Could not reach the backend, or it failed transiently."""


class ProtocolError(BackendError):
    """The backend answered with a malformed or rejected response."""


class ContentError(BackendError):
    """The backend answered cleanly but the content is unusable."""


class MockScriptError(BackendError):
    """A mock received a request its script does not cover."""


#: Phrases that mark an answer as a refusal; over-conservative judges
#: tend to produce these instead of guessing.
DEFAULT_REFUSAL_PHRASES = ("cannot determine", "not sure")

_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class BackendConfig:
    """Connection settings for one backend role.

    ``api_key_env`` names an environment variable; the key itself is
    read at request time and never stored or logged.
    ``assistant_prefix_mode`` selects how a generation prefix reaches
    the server: as a trailing assistant message ("message", for servers
    that continue it) or appended to the user message as an output cue
    ("cue").  Either way an echoed prefix is stripped from the response.
    """

    endpoint_url: str
    model_id: str
    api_key_env: str = ""
    timeout: float = 60.0
    max_in_flight: int = 4
    max_retries: int = 2
    assistant_prefix_mode: str = "message"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.timeout > 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_in_flight < 1:
            raise ValueError(f"max_in_flight must be >= 1, got {self.max_in_flight}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.assistant_prefix_mode not in ("message", "cue"):
            raise ValueError(
                f"assistant_prefix_mode must be 'message' or 'cue', "
                f"got {self.assistant_prefix_mode!r}"
            )
        object.__setattr__(self, "params", dict(self.params))

    @property
    def backend_id(self) -> str:
        """Stable identifier used to partition the response cache."""
        slug = re.sub(r"[^A-Za-z0-9_.-]+", "-", self.model_id) or "model"
        tag = hashlib.sha256(self.endpoint_url.encode("utf-8")).hexdigest()[:8]
        return f"{slug}-{tag}"


@dataclass(frozen=True)
class ChatMessage:
    """One chat turn; image attachments are only legal on user turns."""

    role: str
    content: str
    image: bytes | None = None

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if self.image is not None and self.role != "user":
            raise ValueError("image attachments are only allowed on user messages")


@dataclass(frozen=True)
class Completion:
    """A completion plus bookkeeping the evaluator needs."""

    text: str
    refused: bool = False
    retries: int = 0
    cached: bool = False

    def __str__(self) -> str:
        return self.text


class NliLabel(enum.Enum):
    ENTAILMENT = "entailment"
    NEUTRAL = "neutral"
    CONTRADICTION = "contradiction"


def _canonical(value):
    if isinstance(value, Mapping):
        return {k: _canonical(value[k]) for k in sorted(value)}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, bytes):
        return base64.b64encode(value).decode("ascii")
    if isinstance(value, str):
        return " ".join(value.split())
    return value


def fingerprint_request(body: Mapping[str, Any]) -> str:
    """Stable request identity: canonical JSON, hashed.

    Key order and incidental whitespace differences do not change the
    fingerprint, so it is reproducible across runs and processes.
    """
    canonical = json.dumps(_canonical(body), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _wire_messages(messages: Sequence[ChatMessage]) -> list[dict]:
    wire = []
    for m in messages:
        if m.image is None:
            wire.append({"role": m.role, "content": m.content})
        else:
            url = "data:image/png;base64," + base64.b64encode(m.image).decode("ascii")
            wire.append(
                {
                    "role": m.role,
                    "content": [
                        {"type": "text", "text": m.content},
                        {"type": "image_url", "image_url": {"url": url}},
                    ],
                }
            )
    return wire


class HttpTransport:
    """POSTs request bodies to a chat-completions style endpoint."""

    def __init__(self, cfg: BackendConfig):
        self.cfg = cfg

    def complete(self, body: Mapping[str, Any]) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.cfg.api_key_env:
            key = os.environ.get(self.cfg.api_key_env)
            if not key:
                raise TransportError(
                    f"environment variable {self.cfg.api_key_env} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        url = self.cfg.endpoint_url
        if body.get("kind") == "embeddings":
            # accept a chat endpoint, a bare API root, or the embeddings
            # route itself
            base = url.rstrip("/")
            if base.endswith("/chat/completions"):
                base = base[: -len("/chat/completions")]
            if not base.endswith("/embeddings"):
                base = base + "/embeddings"
            url = base
        wire = {k: v for k, v in body.items() if k != "kind"}
        try:
            resp = requests.post(
                url, json=wire, headers=headers, timeout=self.cfg.timeout
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransportError(f"request to {url} failed: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"{url} returned HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"{url} returned HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise ProtocolError(f"non-JSON response from {url}: {exc}") from exc


def _as_response(response) -> dict:
    if isinstance(response, str):
        return {"choices": [{"message": {"content": response}}]}
    return response


class MockBackend:
    """Scripted transport: request fingerprint -> canned response.

    An unknown fingerprint raises ``MockScriptError`` rather than
    falling through, so a test can never silently hit the network.  The
    call log is append-only.
    """

    def __init__(self, script: Mapping[str, Any] | None = None):
        self._script = dict(script or {})
        self.calls: list[str] = []

    def script(self, body: Mapping[str, Any], response) -> str:
        """Register a canned response; returns the fingerprint."""
        fp = fingerprint_request(body)
        self._script[fp] = response
        return fp

    def complete(self, body: Mapping[str, Any]) -> dict:
        fp = fingerprint_request(body)
        self.calls.append(fp)
        if fp not in self._script:
            raise MockScriptError(
                f"unscripted request {fp[:12]}... "
                f"(kind={body.get('kind', 'chat')!r}); "
                f"{len(self._script)} responses scripted"
            )
        return _as_response(self._script[fp])

    @property
    def call_count(self) -> int:
        return len(self.calls)


class FunctionBackend:
    """Transport double that computes responses from the request.

    Used where a finite script is impractical (synthetic end-to-end
    suites, the CLI's --mock mode).  Still deterministic as long as the
    supplied function is.
    """

    def __init__(self, fn: Callable[[Mapping[str, Any]], Any]):
        self._fn = fn
        self.calls: list[str] = []

    def complete(self, body: Mapping[str, Any]) -> dict:
        self.calls.append(fingerprint_request(body))
        return _as_response(self._fn(body))

    @property
    def call_count(self) -> int:
        return len(self.calls)


class ResponseCache:
    """Content-addressed on-disk response cache, one file per fingerprint.

    Layout: ``<root>/<backend_id>/<fingerprint>.json`` plus an
    append-only ``index.jsonl`` per backend.  Writes are serialized by a
    process-local lock (single-writer).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._lock = threading.Lock()

    def _path(self, backend_id: str, fp: str) -> Path:
        return self.root / backend_id / f"{fp}.json"

    def get(self, backend_id: str, fp: str) -> dict | None:
        path = self._path(backend_id, fp)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, backend_id: str, fp: str, response: Mapping[str, Any]) -> None:
        with self._lock:
            path = self._path(backend_id, fp)
            path.parent.mkdir(parents=True, exist_ok=True)
            if path.exists():
                return
            path.write_text(json.dumps(response, sort_keys=True), encoding="utf-8")
            index = path.parent / "index.jsonl"
            with index.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"fingerprint": fp, "file": path.name}) + "\n")


_BACKOFF_BASE = 0.25
_BACKOFF_CAP = 8.0


class Client:
    """Bounded, retrying client for one backend role.

    Shareable across threads; a semaphore keeps at most
    ``cfg.max_in_flight`` requests outstanding.  When a cache is
    attached, hits bypass the transport entirely.
    """

    def __init__(
        self,
        cfg: BackendConfig,
        transport=None,
        cache: ResponseCache | None = None,
        refusal_phrases: Sequence[str] = DEFAULT_REFUSAL_PHRASES,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.cfg = cfg
        self.transport = transport if transport is not None else HttpTransport(cfg)
        self.cache = cache
        self.refusal_phrases = tuple(p.lower() for p in refusal_phrases)
        self._sleep = sleep
        self._sem = threading.BoundedSemaphore(cfg.max_in_flight)
        self._embed_dim: int | None = None
        self._embed_lock = threading.Lock()

    # -- transport plumbing -------------------------------------------------

    def _request(self, body: Mapping[str, Any]) -> tuple[dict, int, bool]:
        fp = fingerprint_request(body)
        if self.cache is not None:
            hit = self.cache.get(self.cfg.backend_id, fp)
            if hit is not None:
                return hit, 0, True
        attempt = 0
        while True:
            try:
                with self._sem:
                    response = self.transport.complete(body)
                break
            except TransportError:
                if attempt >= self.cfg.max_retries:
                    raise
                delay = min(_BACKOFF_CAP, _BACKOFF_BASE * 2**attempt)
                self._sleep(delay * (0.5 + random.random() / 2))
                attempt += 1
        if self.cache is not None:
            self.cache.put(self.cfg.backend_id, fp, response)
        return response, attempt, False

    @staticmethod
    def _first_choice_text(response: Mapping[str, Any]) -> str:
        try:
            text = response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc!r}") from exc
        if not isinstance(text, str):
            raise ProtocolError(
                f"completion content is {type(text).__name__}, expected str"
            )
        return text

    # -- role operations ----------------------------------------------------

    def chat_complete(
        self,
        messages: Sequence[ChatMessage],
        assistant_prefix: str | None = None,
        params: Mapping[str, Any] | None = None,
    ) -> Completion:
        """Single-shot chat completion.

        The optional generation prefix is delivered per the config's
        prefix mode and stripped from the response if echoed (once).
        """
        if not messages:
            raise ValueError("messages must be non-empty")
        messages = list(messages)
        if assistant_prefix:
            if self.cfg.assistant_prefix_mode == "message":
                messages.append(ChatMessage("assistant", assistant_prefix))
            else:
                last = messages[-1]
                if last.role != "user":
                    raise ValueError("cue mode needs a trailing user message")
                messages[-1] = ChatMessage(
                    "user", f"{last.content}\n\n{assistant_prefix}", image=last.image
                )
        body = {
            "kind": "chat",
            "model": self.cfg.model_id,
            "messages": _wire_messages(messages),
            **dict(self.cfg.params),
            **dict(params or {}),
        }
        response, retries, cached = self._request(body)
        text = self._first_choice_text(response).strip()
        if assistant_prefix and text.startswith(assistant_prefix):
            text = text[len(assistant_prefix) :].strip()
        if not text:
            raise ContentError("backend returned an empty completion")
        lowered = text.lower()
        refused = any(p in lowered for p in self.refusal_phrases)
        return Completion(text=text, refused=refused, retries=retries, cached=cached)

    def caption_image(self, image: bytes, prompt: str) -> Completion:
        """Caption one image payload with the given instruction."""
        if not image:
            raise ContentError("empty image payload")
        return self.chat_complete([ChatMessage("user", prompt, image=image)])

    def embed(self, payload: str | bytes) -> np.ndarray:
        """Embed a text or image payload; returns a unit-norm vector."""
        if not payload:
            raise ContentError("empty embedding payload")
        if isinstance(payload, bytes):
            wire_input = "data:image/png;base64," + base64.b64encode(payload).decode(
                "ascii"
            )
        else:
            wire_input = payload
        body = {"kind": "embeddings", "model": self.cfg.model_id, "input": wire_input}
        response, _, _ = self._request(body)
        try:
            vec = np.asarray(response["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed embedding response: {exc!r}") from exc
        if vec.ndim != 1 or vec.size == 0:
            raise ProtocolError("embedding must be a non-empty vector")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ContentError("backend returned a zero embedding")
        with self._embed_lock:
            if self._embed_dim is None:
                self._embed_dim = vec.size
            elif vec.size != self._embed_dim:
                raise ContentError(
                    f"embedding dimension changed mid-run: "
                    f"{vec.size} vs {self._embed_dim}"
                )
        return vec / norm

    def nli_judge(self, premise: str, hypothesis: str) -> NliLabel:
        """Three-way entailment judgment via a fixed classification prompt."""
        if not premise.strip() or not hypothesis.strip():
            raise ValueError("premise and hypothesis must be non-empty")
        from poca.prompts import NLI_SYSTEM, NLI_USER_TEMPLATE

        completion = self.chat_complete(
            [
                ChatMessage("system", NLI_SYSTEM),
                ChatMessage(
                    "user",
                    NLI_USER_TEMPLATE.format(premise=premise, hypothesis=hypothesis),
                ),
            ]
        )
        found = {
            label
            for label in NliLabel
            if re.search(rf"\b{label.value}\b", completion.text, re.IGNORECASE)
        }
        if len(found) != 1:
            raise ContentError(
                f"cannot parse NLI label from response: {completion.text!r}"
            )
        return found.pop()
