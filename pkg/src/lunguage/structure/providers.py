"""Completion providers: an HTTP client, a scripted replay provider, and a
shared token-bucket rate limiter."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from pathlib import Path
from typing import Mapping

import httpx

from ..errors import ProviderUnavailable

logger = logging.getLogger(__name__)


def prompt_hash(system: str, user: str) -> str:
    """Key used by transcripts to look up a recorded response."""
    return hashlib.sha256((system + "\x00" + user).encode("utf-8")).hexdigest()


class RateLimiter:
    """Thread-safe token bucket: ``rate`` requests per second, ``burst`` at once."""

    def __init__(self, rate: float, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0 or burst < 1:
            raise ValueError("rate must be positive and burst at least 1")
        self.rate = rate
        self.burst = burst
        self._tokens = float(burst)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.burst, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            self._sleep(wait)


class CompletionProvider:
    name = "completion"

    def complete(self, system: str, user: str, temperature: float = 0.0, max_tokens: int = 4096) -> str:
        raise NotImplementedError


class HttpCompletionProvider(CompletionProvider):
    """Client for ``POST /complete``.

    Request ``{"system", "user", "temperature", "max_tokens"}`` plus
    ``"model"`` when one is configured; response ``{"text": str}``.
    Timeouts, transport errors, 429 and 5xx are retried with exponential
    backoff.
    """

    def __init__(
        self,
        endpoint: str,
        model: str | None = None,
        timeout: float = 120.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        rate_limiter: RateLimiter | None = None,
        client: httpx.Client | None = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.name = model or "http"
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.rate_limiter = rate_limiter
        self.retries = 0
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep

    def _url(self):
        return self.endpoint if self.endpoint.endswith("/complete") else self.endpoint + "/complete"

    def complete(self, system, user, temperature=0.0, max_tokens=4096):
        payload = {"system": system, "user": user, "temperature": temperature, "max_tokens": max_tokens}
        if self.model:
            payload["model"] = self.model
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.retries += 1
                logger.warning("completion retry %d/%d after %s", attempt, self.max_retries, last_exc)
                self._sleep(self.backoff * 2 ** (attempt - 1))
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                resp = self._client.post(self._url(), json=payload, timeout=self.timeout)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_exc = exc
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_exc = ProviderUnavailable(f"HTTP {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProviderUnavailable(f"{self._url()}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["text"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderUnavailable(f"{self._url()}: malformed response: {exc}") from None
            if not isinstance(text, str):
                raise ProviderUnavailable(f"{self._url()}: 'text' must be a string")
            return text
        raise ProviderUnavailable(f"{self._url()}: gave up after {self.max_retries} retries: {last_exc}")


class ScriptedProvider(CompletionProvider):
    """Replays recorded responses keyed by :func:`prompt_hash`.

    An unknown prompt raises :class:`ProviderUnavailable`, so a hermetic
    test fails loudly when a prompt drifts. ``calls`` counts requests.
    """

    name = "scripted"

    def __init__(self, responses: Mapping[str, str]):
        self.responses = dict(responses)
        self.calls = 0
        self._lock = threading.Lock()

    @classmethod
    def from_exchanges(cls, exchanges) -> "ScriptedProvider":
        """Build from ``(system, user, response)`` triples."""
        return cls({prompt_hash(s, u): r for s, u, r in exchanges})

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ScriptedProvider":
        """Load a transcript: a ``{hash: response}`` object, or a list of
        ``{"system", "user", "response"}`` objects."""
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            return cls(data)
        return cls.from_exchanges((e["system"], e["user"], e["response"]) for e in data)

    def add(self, system: str, user: str, response: str) -> None:
        self.responses[prompt_hash(system, user)] = response

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.responses, indent=1, sort_keys=True), encoding="utf-8")

    def complete(self, system, user, temperature=0.0, max_tokens=4096):
        with self._lock:
            self.calls += 1
        key = prompt_hash(system, user)
        try:
            return self.responses[key]
        except KeyError:
            raise ProviderUnavailable(f"scripted provider has no response for prompt {key[:12]}") from None


def completion_from_env(environ: Mapping[str, str] | None = None, **kwargs) -> HttpCompletionProvider | None:
    """HTTP provider from ``LUNGUAGE_LLM_URL``/``LUNGUAGE_LLM_MODEL``, or None."""
    env = os.environ if environ is None else environ
    url = env.get("LUNGUAGE_LLM_URL")
    if not url:
        return None
    return HttpCompletionProvider(url, env.get("LUNGUAGE_LLM_MODEL") or None, **kwargs)
