"""Model backends: a chat-completions HTTP client and deterministic mocks.

Every backend exposes ``complete(bundle, params, run=0) -> str``.  ``run``
distinguishes repeated evaluation runs of the same prompt; mocks fold it into
their seed so stochastic mocks can differ between runs while staying
reproducible.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional

import httpx

from .expr import NON_STANDARD, STANDARD, PrecedencePolicy, evaluate, parse, skeleton
from .prompt import PromptBundle
from .rng import SplitMix64

log = logging.getLogger(__name__)

KINDS = ("http_chat", "oracle", "standard_bias", "flaky_oracle", "shot_aware")

_TARGET = re.compile(r"Simplify the following expression (.+?) where \+ has priority over \*\.")
_SHOT_EXPR = re.compile(r"^Expression: (.+?)\s*$", re.MULTILINE)


class BackendError(Exception):
    """Base class; not retryable unless a subclass says so."""

    retryable = False


class TransportError(BackendError):
    retryable = True


class RateLimitError(BackendError):
    retryable = True

    def __init__(self, message: str, retry_after: Optional[float] = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class AuthError(BackendError):
    pass


class MalformedResponseError(BackendError):
    pass


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 1024
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")

    def to_json(self) -> dict:
        return {"temperature": self.temperature, "max_tokens": self.max_tokens, "extra": dict(self.extra)}

    @classmethod
    def from_json(cls, data: dict) -> "DecodingParams":
        return cls(**data)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "oracle"
    endpoint: Optional[str] = None
    model_name: str = ""
    api_key_env: Optional[str] = None
    request_timeout: float = 60.0
    max_retries: int = 5
    backoff: float = 1.0
    seed: int = 0
    flake_prob: float = 0.0
    audit_log: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"backend kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "http_chat" and not self.endpoint:
            raise ValueError("http_chat backend needs an endpoint")
        if not 0.0 <= self.flake_prob <= 1.0:
            raise ValueError("flake_prob must be in [0, 1]")
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    @property
    def backend_id(self) -> str:
        if self.kind == "http_chat":
            return f"http_chat:{self.model_name}@{self.endpoint}"
        if self.kind == "flaky_oracle":
            return f"flaky_oracle(p={self.flake_prob},seed={self.seed})"
        return self.kind

    def to_json(self) -> dict:
        # api_key_env is a variable name, never the secret itself
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, data: dict) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**data)


class Backend:
    def __init__(self, config: BackendConfig) -> None:
        self.config = config
        self._lock = threading.Lock()
        self.calls = 0

    @property
    def backend_id(self) -> str:
        return self.config.backend_id

    def complete(self, bundle: PromptBundle, params: DecodingParams, run: int = 0) -> str:
        with self._lock:
            self.calls += 1
        return self._complete(bundle, params, run)

    def _complete(self, bundle: PromptBundle, params: DecodingParams, run: int) -> str:
        raise NotImplementedError


# --------------------------------------------------------------------------
# Mocks


def extract_target(bundle: PromptBundle) -> str:
    m = _TARGET.search(bundle.user)
    if m is None:
        raise MalformedResponseError("prompt has no target expression")
    return m.group(1)


def shot_expressions(bundle: PromptBundle) -> list[str]:
    return _SHOT_EXPR.findall(bundle.user)


def answer_text(expression: str, policy: PrecedencePolicy, bump: int = 0) -> str:
    """Line-separated steps, then the final value alone on the last line."""
    trace = evaluate(parse(expression), policy)
    lines = ["Steps:"] + trace.step_strings() + [str(trace.final + bump)]
    return "\n".join(lines)


class OracleBackend(Backend):
    policy = NON_STANDARD

    def _complete(self, bundle: PromptBundle, params: DecodingParams, run: int) -> str:
        return answer_text(extract_target(bundle), self.policy)


class StandardBiasBackend(OracleBackend):
    """Answers with ordinary precedence, as a model stuck on its priors would."""

    policy = STANDARD


class FlakyOracleBackend(Backend):
    def _complete(self, bundle: PromptBundle, params: DecodingParams, run: int) -> str:
        rng = SplitMix64.from_key(self.config.seed, run, bundle.digest())
        bump = 1 if rng.random() < self.config.flake_prob else 0
        return answer_text(extract_target(bundle), NON_STANDARD, bump)


class ShotAwareBackend(Backend):
    """Correct exactly when some shot shares the target's shape skeleton."""

    def _complete(self, bundle: PromptBundle, params: DecodingParams, run: int) -> str:
        target = extract_target(bundle)
        wanted = skeleton(parse(target))
        seen = {skeleton(parse(e)) for e in shot_expressions(bundle)}
        policy = NON_STANDARD if wanted in seen else STANDARD
        return answer_text(target, policy)


# --------------------------------------------------------------------------
# HTTP


class HttpChatBackend(Backend):
    """Chat-completions client with bounded retries.

    ``sleep`` and ``client`` are injectable so tests run without a network
    and without waiting.
    """

    def __init__(
        self,
        config: BackendConfig,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        super().__init__(config)
        self.client = client or httpx.Client(timeout=config.request_timeout)
        self.sleep = sleep
        self.attempts = 0
        self._audit_lock = threading.Lock()

    def _api_key(self) -> str:
        env = self.config.api_key_env
        if not env:
            return ""
        key = os.environ.get(env)
        if not key:
            raise AuthError(f"environment variable {env} is not set")
        return key

    def _request_body(self, bundle: PromptBundle, params: DecodingParams) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": bundle.system},
                {"role": "user", "content": bundle.user},
            ],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        }
        body.update(params.extra)
        return body

    def _complete(self, bundle: PromptBundle, params: DecodingParams, run: int) -> str:
        key = self._api_key()
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        body = self._request_body(bundle, params)
        delay = self.config.backoff
        last: Optional[BackendError] = None
        for attempt in range(1, self.config.max_retries + 1):
            with self._lock:
                self.attempts += 1
            try:
                text = self._post(body, headers)
                self._audit(body, text, None)
                log.debug("request succeeded on attempt %d", attempt)
                return text
            except BackendError as exc:
                self._audit(body, None, exc)
                if not exc.retryable:
                    raise
                last = exc
                if attempt == self.config.max_retries:
                    break
                wait = delay
                if isinstance(exc, RateLimitError) and exc.retry_after is not None:
                    wait = exc.retry_after
                log.warning("attempt %d failed (%s); retrying in %.2fs", attempt, exc, wait)
                self.sleep(wait)
                delay *= 2
        log.error("giving up after %d attempts", self.config.max_retries)
        assert last is not None
        raise last

    def _post(self, body: dict, headers: dict) -> str:
        try:
            resp = self.client.post(self.config.endpoint, json=body, headers=headers)  # type: ignore[arg-type]
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        status = resp.status_code
        if status in (401, 403):
            raise AuthError(f"HTTP {status}")
        if status == 429:
            raise RateLimitError("HTTP 429", _retry_after(resp.headers.get("retry-after")))
        if status >= 500:
            raise TransportError(f"HTTP {status}")
        if status >= 400:
            raise BackendError(f"HTTP {status}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError(f"unexpected response shape: {resp.text[:200]}") from exc

    def _audit(self, body: dict, text: Optional[str], error: Optional[Exception]) -> None:
        if not self.config.audit_log:
            return
        row = {"request": body, "response": text, "error": None if error is None else repr(error)}
        line = _redact(json.dumps(row, ensure_ascii=False), self.config.api_key_env)
        with self._audit_lock:
            path = Path(self.config.audit_log)
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def _retry_after(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


def _redact(text: str, env: Optional[str]) -> str:
    secret = os.environ.get(env) if env else None
    if secret:
        text = text.replace(secret, "[REDACTED]")
    return text


_MOCKS: dict[str, type[Backend]] = {
    "oracle": OracleBackend,
    "standard_bias": StandardBiasBackend,
    "flaky_oracle": FlakyOracleBackend,
    "shot_aware": ShotAwareBackend,
}


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "http_chat":
        return HttpChatBackend(config)
    return _MOCKS[config.kind](config)


def as_backend(backend: "Backend | BackendConfig") -> Backend:
    return backend if isinstance(backend, Backend) else make_backend(backend)


def complete(
    backend: "Backend | BackendConfig",
    bundle: PromptBundle,
    params: Optional[DecodingParams] = None,
    run: int = 0,
) -> str:
    return as_backend(backend).complete(bundle, params or DecodingParams(), run)
