"""Text embeddings and clamped cosine similarity.

Providers turn texts into unit-norm vectors. A :class:`SimilarityEnsemble`
averages clamped cosine similarity over one or more providers and fixes
two conventions every consumer relies on: an empty string is 0-similar to
everything, and identical non-empty strings are exactly 1-similar.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import httpx
import numpy as np

from .errors import DimensionMismatch, ProviderUnavailable

logger = logging.getLogger(__name__)

__all__ = [
    "EmbeddingProvider",
    "HttpEmbeddingProvider",
    "DeterministicProvider",
    "PairTableProvider",
    "CachedProvider",
    "SimilarityEnsemble",
    "make_http_provider",
    "make_deterministic_provider",
    "make_fixture_provider",
    "ensemble_from_env",
    "cosine",
    "similarity",
]


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


class EmbeddingProvider:
    """Base class: subclasses implement :meth:`_embed` returning raw vectors."""

    name = "provider"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dim)`` array of unit-norm rows."""
        texts = list(texts)
        if not texts:
            return np.zeros((0, getattr(self, "dim", 0) or 0))
        return _normalize_rows(np.asarray(self._embed(texts), dtype=float))

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError

    def cosine_matrix(self, left: Sequence[str], right: Sequence[str]) -> np.ndarray:
        """Raw (unclamped) cosine similarity between every left/right pair."""
        uniq = list(dict.fromkeys([*left, *right]))
        if not uniq:
            return np.zeros((len(left), len(right)))
        vecs = self.embed(uniq)
        index = {t: i for i, t in enumerate(uniq)}
        a = vecs[[index[t] for t in left]]
        b = vecs[[index[t] for t in right]]
        return a @ b.T


class DeterministicProvider(EmbeddingProvider):
    """Hermetic bag-of-tokens encoder.

    Each lowercased whitespace token gets a pseudo-random unit vector seeded
    from ``(seed, token)``; a text is the normalized sum of its token
    vectors. Token vectors are summed in sorted order so word order never
    changes the result, not even in the last bit.
    """

    def __init__(self, seed: int = 0, dim: int = 256):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.seed = seed
        self.dim = dim
        self.name = f"deterministic-{seed}-{dim}"
        self._tokens: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def _token_vector(self, token: str) -> np.ndarray:
        with self._lock:
            vec = self._tokens.get(token)
            if vec is None:
                digest = hashlib.sha256(f"{self.seed}\x00{token}".encode()).digest()
                rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
                vec = rng.standard_normal(self.dim)
                vec /= np.linalg.norm(vec)
                self._tokens[token] = vec
            return vec

    def _embed(self, texts):
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok in sorted(text.lower().split()):
                out[i] += self._token_vector(tok)
        return out


class PairTableProvider(EmbeddingProvider):
    """Similarity source backed by a lookup table instead of vectors.

    The table is closed under symmetry; identical strings score 1.0 and
    every unlisted pair scores 0.0. It has no vectors, so only
    :meth:`cosine_matrix` is meaningful.
    """

    def __init__(self, table: Mapping[tuple[str, str], float], name: str = "fixture"):
        self.name = name
        self.table: dict[tuple[str, str], float] = {}
        for (a, b), v in table.items():
            self.table[(a, b)] = float(v)
            self.table.setdefault((b, a), float(v))

    def embed(self, texts):
        raise TypeError("PairTableProvider has no embeddings; use cosine_matrix")

    def cosine_matrix(self, left, right):
        out = np.zeros((len(left), len(right)))
        for i, a in enumerate(left):
            for j, b in enumerate(right):
                out[i, j] = 1.0 if a == b else self.table.get((a, b), 0.0)
        return out


class HttpEmbeddingProvider(EmbeddingProvider):
    """Client for an embedding service speaking ``POST /embed``.

    Request ``{"model": str, "texts": [str]}``, response
    ``{"embeddings": [[float]]}``. Texts are sent in batches; timeouts,
    connection errors and 5xx/429 responses are retried with exponential
    backoff, anything else fails immediately.
    """

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        batch_size: int = 64,
        client: httpx.Client | None = None,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.batch_size = batch_size
        self.dim: int | None = None
        self.retries = 0
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep
        self._lock = threading.Lock()

    def _url(self):
        return self.endpoint if self.endpoint.endswith("/embed") else self.endpoint + "/embed"

    def _post(self, texts: list[str]) -> list[list[float]]:
        payload = {"model": self.model_name, "texts": texts}
        last_exc: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                with self._lock:
                    self.retries += 1
                delay = self.backoff * 2 ** (attempt - 1)
                logger.warning("embed retry %d/%d after %s", attempt, self.max_retries, last_exc)
                self._sleep(delay)
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
                embeddings = resp.json()["embeddings"]
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderUnavailable(f"{self._url()}: malformed response: {exc}") from None
            if len(embeddings) != len(texts):
                raise ProviderUnavailable(
                    f"{self._url()}: asked for {len(texts)} embeddings, got {len(embeddings)}"
                )
            return embeddings
        raise ProviderUnavailable(f"{self._url()}: gave up after {self.max_retries} retries: {last_exc}")

    def _embed(self, texts):
        rows = []
        for start in range(0, len(texts), self.batch_size):
            for vec in self._post(texts[start : start + self.batch_size]):
                width = len(vec)
                with self._lock:
                    if self.dim is None:
                        self.dim = width
                    elif width != self.dim:
                        raise DimensionMismatch(
                            f"{self.name}: got a {width}-dim vector, expected {self.dim}"
                        )
                rows.append(vec)
        return np.asarray(rows, dtype=float)


class CachedProvider(EmbeddingProvider):
    """Memoizing wrapper keyed by ``(provider name, exact text)``.

    Holds at most ``maxsize`` vectors in memory (LRU). With ``path`` set, the
    cache is loaded from and :meth:`save`-d to a JSON sidecar.
    """

    def __init__(self, provider: EmbeddingProvider, path: str | os.PathLike | None = None, maxsize: int = 100_000):
        self.provider = provider
        self.name = provider.name
        self.path = Path(path) if path else None
        self.maxsize = maxsize
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = self.misses = 0
        if self.path and self.path.exists():
            self._load()

    @property
    def dim(self):
        return getattr(self.provider, "dim", None)

    def _load(self):
        data = json.loads(self.path.read_text(encoding="utf-8"))
        for text, vec in data.get(self.name, {}).items():
            self._cache[text] = np.asarray(vec, dtype=float)

    def save(self):
        if not self.path:
            return
        with self._lock:
            data = {}
            if self.path.exists():
                data = json.loads(self.path.read_text(encoding="utf-8"))
            data[self.name] = {t: v.tolist() for t, v in self._cache.items()}
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp.write_text(json.dumps(data), encoding="utf-8")
            tmp.replace(self.path)

    def embed(self, texts):
        texts = list(texts)
        with self._lock:
            missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            vecs = self.provider.embed(missing)
            with self._lock:
                for t, v in zip(missing, vecs):
                    self._cache[t] = v
        with self._lock:
            self.misses += len(missing)
            self.hits += len(texts) - len(missing)
            rows = []
            for t in texts:
                self._cache.move_to_end(t)
                rows.append(self._cache[t])
            while len(self._cache) > self.maxsize:
                self._cache.popitem(last=False)
        if not rows:
            return np.zeros((0, self.dim or 0))
        return np.vstack(rows)


class SimilarityEnsemble:
    """Mean clamped cosine similarity over several providers."""

    def __init__(self, providers: Iterable[EmbeddingProvider]):
        self.providers = list(providers)
        if not self.providers:
            raise ValueError("an ensemble needs at least one provider")

    @property
    def name(self) -> str:
        return "+".join(p.name for p in self.providers)

    def pairwise(self, left: Sequence[str], right: Sequence[str]) -> np.ndarray:
        """``len(left) x len(right)`` matrix of similarities in [0, 1]."""
        left, right = list(left), list(right)
        if not left or not right:
            return np.zeros((len(left), len(right)))
        total = np.zeros((len(left), len(right)))
        for p in self.providers:
            total += np.clip(p.cosine_matrix(left, right), 0.0, 1.0)
        sim = total / len(self.providers)
        left_arr = np.asarray(left, dtype=object)
        right_arr = np.asarray(right, dtype=object)
        same = left_arr[:, None] == right_arr[None, :]
        empty = (left_arr == "")[:, None] | (right_arr == "")[None, :]
        sim[same] = 1.0
        sim[empty] = 0.0
        return sim

    def similarity(self, a: str, b: str) -> float:
        return float(self.pairwise([a], [b])[0, 0])

    def __repr__(self):
        return f"SimilarityEnsemble({self.name})"


def similarity(ensemble: SimilarityEnsemble, a: str, b: str) -> float:
    return ensemble.similarity(a, b)


def make_http_provider(
    endpoint: str,
    model_name: str,
    timeout: float = 30.0,
    max_retries: int = 3,
    backoff: float = 0.5,
    **kwargs,
) -> HttpEmbeddingProvider:
    return HttpEmbeddingProvider(endpoint, model_name, timeout, max_retries, backoff, **kwargs)


def make_deterministic_provider(seed: int = 0, dim: int = 256) -> DeterministicProvider:
    return DeterministicProvider(seed, dim)


def make_fixture_provider(pair_table: Mapping[tuple[str, str], float]) -> SimilarityEnsemble:
    return SimilarityEnsemble([PairTableProvider(pair_table)])


def ensemble_from_env(environ: Mapping[str, str] | None = None) -> SimilarityEnsemble | None:
    """Build an HTTP-backed ensemble from ``LUNGUAGE_EMBED_*`` variables.

    Returns None when ``LUNGUAGE_EMBED_URL`` is unset.
    """
    env = os.environ if environ is None else environ
    url = env.get("LUNGUAGE_EMBED_URL")
    if not url:
        return None
    models = [m.strip() for m in env.get("LUNGUAGE_EMBED_MODELS", "").split(",") if m.strip()]
    if not models:
        raise ValueError("LUNGUAGE_EMBED_MODELS must name at least one model")
    cache = env.get("LUNGUAGE_EMBED_CACHE")
    providers = []
    for m in models:
        p: EmbeddingProvider = HttpEmbeddingProvider(url, m)
        if cache:
            p = CachedProvider(p, cache)
        providers.append(p)
    return SimilarityEnsemble(providers)
