"""Model backends behind one interface, with record/replay for offline runs.

Every request is keyed by a digest of (backend, prompt text, settings). In
replay mode the reply is looked up by that digest alone and the network is
never touched. Live exchanges are appended to a JSONL log, flushed and synced
before ``complete`` returns, so a crashed run keeps everything it paid for.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

from repoctx.tokenizer import get_tokenizer

log = logging.getLogger(__name__)


class BudgetExceededError(ValueError):
    pass


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackendProfile:
    name: str
    input_budget: int
    output_budget: int
    temperature: float = 0.0
    endpoint: str | None = None
    api: str = "openai-chat"  # openai-chat | palm-text
    model: str | None = None
    auth: str | None = None  # environment variable holding the credential
    tokenizer: str = "approx"

    def __post_init__(self):
        if self.input_budget <= 0 or self.output_budget <= 0:
            raise ValueError(f"{self.name}: token budgets must be positive")
        if self.temperature < 0:
            raise ValueError(f"{self.name}: temperature must be >= 0")

    @property
    def credential_env(self) -> str:
        return self.auth or re.sub(r"[^A-Z0-9]+", "_", self.name.upper()).strip("_") + "_API_KEY"

    def settings(self) -> dict:
        return {"temperature": self.temperature, "max_output_tokens": self.output_budget,
                "model": self.model or self.name}


PROFILES: dict[str, BackendProfile] = {
    p.name: p
    for p in (
        BackendProfile("gpt-3.5-turbo", 4096, 1024, endpoint="https://api.openai.com/v1/chat/completions"),
        BackendProfile("gpt-4-0613", 8192, 1024, endpoint="https://api.openai.com/v1/chat/completions"),
        BackendProfile(
            "text-bison-001", 8192, 1024, api="palm-text",
            endpoint="https://generativelanguage.googleapis.com/v1beta2/models/text-bison-001:generateText",
        ),
    )
}


def load_profiles(path: str | Path) -> dict[str, BackendProfile]:
    """Extra profiles from an INI file, one ``[backend:<name>]`` section each."""
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    out = {}
    for section in parser.sections():
        if not section.startswith("backend:"):
            continue
        s = parser[section]
        name = section.split(":", 1)[1]
        out[name] = BackendProfile(
            name=name,
            input_budget=s.getint("input_budget"),
            output_budget=s.getint("output_budget"),
            temperature=s.getfloat("temperature", 0.0),
            endpoint=s.get("endpoint"),
            api=s.get("api", "openai-chat"),
            model=s.get("model"),
            auth=s.get("auth"),
            tokenizer=s.get("tokenizer", "approx"),
        )
    return out


def get_profile(name: str, extra: Mapping[str, BackendProfile] | None = None) -> BackendProfile:
    profiles = {**PROFILES, **(extra or {})}
    if name not in profiles:
        raise ValueError(f"unknown backend {name!r}; known: {', '.join(sorted(profiles))}")
    return profiles[name]


def count_tokens(text: str, profile: BackendProfile | None = None) -> int:
    return get_tokenizer(profile.tokenizer if profile else None).count(text)


def request_hash(backend: str, prompt: str, settings: Mapping) -> str:
    payload = json.dumps({"backend": backend, "prompt": prompt, "settings": dict(settings)},
                         sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class Exchange:
    request_hash: str
    backend: str
    prompt: str
    reply: str
    timestamp: str
    latency_ms: int
    mode: str  # live | replay
    settings: dict = field(default_factory=dict)
    token_count: int | None = None
    failed: bool = False
    error: str | None = None
    attempts: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: Mapping) -> Exchange:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def read_exchanges(path: str | Path) -> list[Exchange]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(Exchange.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: not an exchange record: {exc}") from exc
    return out


class Transport(Protocol):
    def send(self, profile: BackendProfile, prompt: str, api_key: str | None) -> str: ...


class HttpTransport:
    """Minimal clients for OpenAI-style chat and PaLM text endpoints."""

    def __init__(self, timeout: float = 120.0):
        self.timeout = timeout

    def send(self, profile: BackendProfile, prompt: str, api_key: str | None) -> str:
        import httpx

        if not profile.endpoint:
            raise TransportError(f"{profile.name}: no endpoint configured")
        if profile.api == "openai-chat":
            body = {
                "model": profile.model or profile.name,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": profile.temperature,
                "max_tokens": profile.output_budget,
            }
            headers = {"Authorization": f"Bearer {api_key}"}
            params = None
        elif profile.api == "palm-text":
            body = {
                "prompt": {"text": prompt},
                "temperature": profile.temperature,
                "maxOutputTokens": profile.output_budget,
            }
            headers = {}
            params = {"key": api_key}
        else:
            raise TransportError(f"{profile.name}: unsupported api {profile.api!r}")
        try:
            resp = httpx.post(profile.endpoint, json=body, headers=headers, params=params, timeout=self.timeout)
            resp.raise_for_status()
            data = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            if profile.api == "openai-chat":
                return data["choices"][0]["message"]["content"] or ""
            return data["candidates"][0]["output"]
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected response shape: {exc}") from exc


class CallableTransport:
    """Wrap ``fn(profile, prompt) -> reply``; used for tests and dry runs."""

    def __init__(self, fn: Callable[[BackendProfile, str], str]):
        self.fn = fn

    def send(self, profile: BackendProfile, prompt: str, api_key: str | None) -> str:
        return self.fn(profile, prompt)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Gateway:
    def __init__(
        self,
        profile: BackendProfile,
        *,
        replay: str | Path | Iterable[Exchange] | None = None,
        log_path: str | Path | None = None,
        transport: Transport | None = None,
        retries: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        min_interval: float = 0.0,
        require_credential: bool = True,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.profile = profile
        self.name = profile.name
        self.mode = "replay" if replay is not None else "live"
        self._replay: dict[str, Exchange] = {}
        if replay is not None:
            records = read_exchanges(replay) if isinstance(replay, (str, Path)) else list(replay)
            for ex in records:
                self._replay.setdefault(ex.request_hash, ex)
        self.log_path = Path(log_path) if log_path else None
        self.transport = transport or HttpTransport()
        self.retries = retries
        self.backoff = backoff
        self.min_interval = min_interval
        self.require_credential = require_credential
        self._sleep = sleep
        self._tokenizer = get_tokenizer(profile.tokenizer)
        self._pool = threading.BoundedSemaphore(max_in_flight)
        self._log_lock = threading.Lock()
        self._rate_lock = threading.Lock()
        self._last_start = 0.0

    def count_tokens(self, text: str) -> int:
        return self._tokenizer.count(text)

    def _persist(self, ex: Exchange) -> None:
        if self.log_path is None:
            return
        with self._log_lock:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(ex.to_json() + "\n")
                fh.flush()
                os.fsync(fh.fileno())

    def _throttle(self) -> None:
        if self.min_interval <= 0:
            return
        with self._rate_lock:
            wait = self._last_start + self.min_interval - time.monotonic()
            if wait > 0:
                self._sleep(wait)
            self._last_start = time.monotonic()

    def complete_text(self, text: str, meta: Mapping | None = None) -> Exchange:
        tokens = self.count_tokens(text)
        if tokens > self.profile.input_budget:
            raise BudgetExceededError(
                f"prompt has {tokens} tokens; {self.profile.name} accepts at most {self.profile.input_budget}"
            )
        settings = self.profile.settings()
        digest = request_hash(self.profile.name, text, settings)
        base = Exchange(digest, self.profile.name, text, "", _now(), 0, self.mode, settings, tokens,
                        meta=dict(meta or {}))
        if self.mode == "replay":
            recorded = self._replay.get(digest)
            if recorded is None:
                ex = replace(base, failed=True, error="no recorded reply for this request")
            else:
                ex = replace(base, reply=recorded.reply, failed=recorded.failed, error=recorded.error,
                             attempts=recorded.attempts)
            self._persist(ex)
            return ex
        ex = self._live(base, text)
        self._persist(ex)
        return ex

    def _live(self, base: Exchange, text: str) -> Exchange:
        api_key = os.environ.get(self.profile.credential_env)
        if self.require_credential and not api_key:
            return replace(base, failed=True, error=f"missing credential: set {self.profile.credential_env}")
        error = None
        for attempt in range(1, self.retries + 1):
            with self._pool:
                self._throttle()
                started = time.monotonic()
                try:
                    reply = self.transport.send(self.profile, text, api_key)
                except TransportError as exc:
                    error = str(exc)
                    log.warning("%s attempt %d/%d failed: %s", self.profile.name, attempt, self.retries, exc)
                else:
                    latency = int((time.monotonic() - started) * 1000)
                    return replace(base, reply=reply, latency_ms=latency, attempts=attempt)
            if attempt < self.retries:
                self._sleep(self.backoff * 2 ** (attempt - 1))
        return replace(base, failed=True, error=error, attempts=self.retries)

    def complete(self, prompt, meta: Mapping | None = None) -> Exchange:
        """Send a rendered prompt; over-budget prompts are rejected before any I/O."""
        if prompt.token_count > self.profile.input_budget:
            raise BudgetExceededError(
                f"prompt has {prompt.token_count} tokens; "
                f"{self.profile.name} accepts at most {self.profile.input_budget}"
            )
        return self.complete_text(prompt.text, meta)

    def summarize(self, prompt: str) -> tuple[str, bool]:
        try:
            ex = self.complete_text(prompt, {"purpose": "summary"})
        except BudgetExceededError:
            return "", True
        return ex.reply, ex.failed


def complete(prompt, profile: BackendProfile, **gateway_kwargs) -> Exchange:
    return Gateway(profile, **gateway_kwargs).complete(prompt)
