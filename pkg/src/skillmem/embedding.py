"""Shared text embedding space for spans, memories, queries and skills."""
from __future__ import annotations

import hashlib
import json
import logging
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 64

_TOKEN_RE = re.compile(r"[a-z0-9_]+")

STOPWORDS = frozenset(
    """a an and are as at be but by for from has have he her his i if in into is it
    its me my of on or our she so that the their them they this to was we were
    what when where which who will with you your""".split()
)


class EmbeddingError(Exception):
    """Base class for embedding failures."""


class EmbeddingTransportError(EmbeddingError):
    """The endpoint could not be reached; safe to retry later."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempt(s))")
        self.attempts = attempts
        self.retryable = True


class EmbeddingProtocolError(EmbeddingError):
    """The endpoint answered with something that violates the wire contract."""


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.findall(text.lower()) if t not in STOPWORDS]


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale to unit L2 norm; the all-zero vector is returned as-is."""
    v = np.asarray(v, dtype=np.float64)
    scale = np.max(np.abs(v)) if v.size else 0.0
    if scale == 0.0:
        return v.copy()
    # pre-scaling keeps tiny or huge entries from under/overflowing the norm
    v = v / scale
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@lru_cache(maxsize=65536)
def _token_slot(token: str, dim: int) -> tuple[int, float]:
    raw = token.encode("utf-8")
    index = int.from_bytes(hashlib.blake2b(raw, digest_size=8, person=b"skm-index").digest(), "little")
    sign = hashlib.blake2b(raw, digest_size=1, person=b"skm-sign").digest()[0] & 1
    return index % dim, 1.0 if sign else -1.0


def hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Signed feature-hashing bag-of-tokens embedding, L2-normalised."""
    if dim < 2:
        raise ValueError("dim must be >= 2")
    v = np.zeros(dim)
    for tok in tokenize(text):
        idx, sign = _token_slot(tok, dim)
        v[idx] += sign
    return normalize(v)


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class HashEmbedder:
    """Deterministic offline embedder; see :func:`hash_embed`."""

    dim: int = DEFAULT_DIM

    def embed(self, text: str) -> np.ndarray:
        return _cached_hash_embed(text, self.dim).copy()

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


@lru_cache(maxsize=16384)
def _cached_hash_embed(text: str, dim: int) -> np.ndarray:
    v = hash_embed(text, dim)
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    model: str = "embedding"
    api_key: str | None = None
    timeout: float = 30.0
    max_attempts: int = 3
    backoff: float = 0.5


def _post_json(url: str, payload: dict, api_key: str | None, timeout: float) -> dict:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    req = urllib.request.Request(url, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


def post_with_retries(url: str, payload: dict, *, api_key: str | None, timeout: float,
                      max_attempts: int, backoff: float, error_cls=None) -> dict:
    """POST JSON, retrying transport-level failures with linear backoff."""
    last: Exception | None = None
    for attempt in range(1, max_attempts + 1):
        try:
            return _post_json(url, payload, api_key, timeout)
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = exc
            log.warning("POST %s failed (attempt %d/%d): %s", url, attempt, max_attempts, exc)
            if attempt < max_attempts and backoff > 0:
                time.sleep(backoff * attempt)
    cls = error_cls or EmbeddingTransportError
    raise cls(f"POST {url} failed: {last}", attempts=max_attempts)


def remote_embed(texts: Sequence[str], config: EndpointConfig) -> list[np.ndarray]:
    """Embed a batch through an OpenAI-style ``/embeddings`` endpoint."""
    if not texts:
        raise ValueError("remote_embed needs a non-empty batch")
    body = post_with_retries(
        config.url,
        {"model": config.model, "input": list(texts)},
        api_key=config.api_key,
        timeout=config.timeout,
        max_attempts=config.max_attempts,
        backoff=config.backoff,
    )
    try:
        data = sorted(body["data"], key=lambda d: int(d["index"]))
        vectors = [np.asarray(d["embedding"], dtype=np.float64) for d in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise EmbeddingProtocolError(f"malformed embedding response: {exc}") from exc
    if len(vectors) != len(texts):
        raise EmbeddingProtocolError(f"expected {len(texts)} embeddings, got {len(vectors)}")
    if [int(d["index"]) for d in data] != list(range(len(texts))):
        raise EmbeddingProtocolError("response indices do not cover the request")
    dims = {v.shape for v in vectors}
    if len(dims) != 1 or vectors[0].ndim != 1:
        raise EmbeddingProtocolError(f"inconsistent embedding dimensions: {sorted(dims)}")
    if not all(np.all(np.isfinite(v)) for v in vectors):
        raise EmbeddingProtocolError("non-finite values in embedding response")
    return [normalize(v) for v in vectors]


@dataclass
class RemoteEmbedder:
    """HTTP embedder with a per-text cache.  ``dim`` is learned from the first reply."""

    config: EndpointConfig
    dim: int = 0
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        if missing:
            for text, vec in zip(missing, remote_embed(missing, self.config)):
                if self.dim and vec.shape[0] != self.dim:
                    raise EmbeddingProtocolError(f"dimension changed from {self.dim} to {vec.shape[0]}")
                self.dim = vec.shape[0]
                self._cache[text] = vec
        return [self._cache[t].copy() for t in texts]
