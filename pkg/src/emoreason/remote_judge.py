"""Judge backed by an OpenAI-compatible ``/chat/completions`` endpoint.

Network access is opt-in. Tests and offline runs use ``FixtureTransport``,
which replays recorded request/response pairs.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx

from .errors import ConfigurationError, JudgeError
from .rewards import COHERENCE_PROMPT, CONSISTENCY_PROMPT, Verdict, normalize_emotion_reply, normalize_yes_no
from .taxonomy import NO_MATCH, EmotionTaxonomy

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "EMOREASON_JUDGE_API_KEY"
_RETRYABLE_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class RemoteJudgeConfig:
    base_url: str
    model_name: str
    api_key_env: str = DEFAULT_API_KEY_ENV
    timeout_ms: int = 30_000
    max_retries: int = 2
    temperature: float = 0.0
    max_in_flight: int = 4
    image_mode: str = "caption"  # or "image_url"
    backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if not self.base_url:
            raise ConfigurationError("remote judge needs a base_url")
        if self.timeout_ms <= 0:
            raise ConfigurationError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ConfigurationError("max_in_flight must be >= 1")
        if self.image_mode not in ("caption", "image_url"):
            raise ConfigurationError(f"unknown image_mode {self.image_mode!r}")

    @property
    def api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")

    @classmethod
    def from_dict(cls, d: dict) -> "RemoteJudgeConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown remote judge fields: {sorted(unknown)}")
        return cls(**d)


def _image_part(scene_ref: Any, mode: str) -> dict:
    if isinstance(scene_ref, str):
        ref = scene_ref
    else:
        ref = getattr(scene_ref, "caption", None) or getattr(scene_ref, "id", None)
        if ref is None:
            raise ConfigurationError("remote judging needs a caption, image URL or manifest record")
    if mode == "image_url":
        return {"type": "image_url", "image_url": {"url": ref}}
    return {"type": "text", "text": f"Image description: {ref}"}


def consistency_messages(scene_ref: Any, s1: str, image_mode: str = "caption") -> list[dict]:
    return [
        {
            "role": "user",
            "content": [
                _image_part(scene_ref, image_mode),
                {"type": "text", "text": f"{s1}\n\n{CONSISTENCY_PROMPT} Answer Yes or No."},
            ],
        }
    ]


def coherence_messages(s12: str, taxonomy: EmotionTaxonomy) -> list[dict]:
    options = ", ".join(taxonomy.labels)
    return [
        {
            "role": "user",
            "content": [
                {"type": "text", "text": f"{s12}\n\n{COHERENCE_PROMPT} Options: {options}. Answer with one option."},
            ],
        }
    ]


class RemoteJudge:
    """Chat-completion judge with bounded retries and an in-flight limit."""

    concurrent_safe = True

    def __init__(
        self,
        config: RemoteJudgeConfig,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self._sleep = sleep
        headers = {"Content-Type": "application/json"}
        if config.api_key:
            headers["Authorization"] = f"Bearer {config.api_key}"
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"),
            headers=headers,
            timeout=config.timeout_ms / 1000.0,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self.requests_sent = 0
        self._count_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def __enter__(self) -> "RemoteJudge":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _post_once(self, body: dict) -> str:
        with self._count_lock:
            self.requests_sent += 1
        with self._slots:
            resp = self._client.post("/chat/completions", json=body)
        if resp.status_code in _RETRYABLE_STATUS:
            raise _Retryable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise JudgeError(f"judge endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError):
            raise _Retryable("malformed chat-completion response") from None

    def _ask(self, messages: list[dict], accept: Callable[[str], Any]) -> Any:
        """Send until ``accept`` returns non-None; at most 1 + max_retries requests."""
        body = {"model": self.config.model_name, "messages": messages, "temperature": self.config.temperature}
        attempts = 1 + self.config.max_retries
        last = "no attempt made"
        for attempt in range(attempts):
            if attempt:
                self._sleep(self.config.backoff_s * attempt)
            try:
                reply = self._post_once(body)
            except (_Retryable, httpx.TransportError) as exc:
                last = str(exc) or type(exc).__name__
                log.warning("judge request %d/%d failed: %s", attempt + 1, attempts, last)
                continue
            value = accept(reply)
            if value is not None:
                return value
            last = f"unusable reply {reply!r}"
        raise JudgeError(f"judge failed after {attempts} request(s): {last}")

    def remote_yes_no(self, scene_ref: Any, s1: str) -> Verdict:
        return self._ask(consistency_messages(scene_ref, s1, self.config.image_mode), normalize_yes_no)

    def remote_emotion(self, s12: str, taxonomy: EmotionTaxonomy) -> str:
        replies: list[str] = []

        def accept(reply: str) -> str:
            replies.append(reply)
            return normalize_emotion_reply(reply, taxonomy)

        label = self._ask(coherence_messages(s12, taxonomy), accept)
        if label == NO_MATCH:
            log.info("coherence reply %r maps to no label", replies[-1])
        return label

    # Judge protocol
    def judge_yes_no(self, scene_ref: Any, text: str, prompt: str) -> str:
        if prompt != CONSISTENCY_PROMPT:
            raise ConfigurationError("unexpected consistency prompt")
        return self.remote_yes_no(scene_ref, text).value

    def judge_emotion(self, text: str, prompt: str, taxonomy: EmotionTaxonomy) -> str:
        if prompt != COHERENCE_PROMPT:
            raise ConfigurationError("unexpected coherence prompt")
        return self.remote_emotion(text, taxonomy)


class _Retryable(Exception):
    pass


def remote_yes_no(config: RemoteJudgeConfig, caption_or_image_ref: Any, s1: str, transport: httpx.BaseTransport | None = None) -> Verdict:
    with RemoteJudge(config, transport) as judge:
        return judge.remote_yes_no(caption_or_image_ref, s1)


def remote_emotion(config: RemoteJudgeConfig, s12: str, taxonomy: EmotionTaxonomy, transport: httpx.BaseTransport | None = None) -> str:
    with RemoteJudge(config, transport) as judge:
        return judge.remote_emotion(s12, taxonomy)


# -- fixtures ----------------------------------------------------------------


@dataclass
class FixtureTransport(httpx.BaseTransport):
    """Replays recorded responses in order and keeps the request bodies sent.

    Each fixture is ``{"request": {...}, "response": {"status": int, "json": {...}}}``;
    the ``request`` part documents what was recorded and is not enforced.
    """

    fixtures: Sequence[dict]
    requests: list[dict] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureTransport":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data if isinstance(data, list) else data["exchanges"])

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        with self._lock:
            idx = len(self.requests)
            self.requests.append(json.loads(request.content or b"null"))
        if idx >= len(self.fixtures):
            raise httpx.ConnectError("fixture transport exhausted", request=request)
        resp = self.fixtures[idx]["response"]
        if "json" in resp:
            return httpx.Response(resp.get("status", 200), json=resp["json"], request=request)
        return httpx.Response(resp.get("status", 200), text=resp.get("text", ""), request=request)


def chat_response(content: str) -> dict:
    """Minimal chat-completion response body carrying ``content``."""
    return {
        "id": "chatcmpl-fixture",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    }
