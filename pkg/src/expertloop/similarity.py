"""Semantic similarity: pluggable embedder with a deterministic offline fallback.

The fallback embeds text as a hashed term-frequency vector: lowercase, split
on runs of non-alphanumeric characters, hash each token into one of 4096
buckets. Hashing uses blake2b keyed with a fixed seed so vectors are
identical across processes and platforms. One similarity function serves
both conflict-candidate search and retrieval relevance.
"""

from __future__ import annotations

import hashlib
import re
import threading
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .errors import DimensionMismatch, TransportError

EMBED_DIM = 4096
# Fixed hash seed for the fallback embedder; changing it invalidates every
# recorded similarity fixture.
HASH_SEED = b"expertloop-tf-v1"

_TOKEN_SPLIT = re.compile(r"[^a-z0-9]+")

Embedder = Callable[[str], np.ndarray]


def tokenize(text: str) -> list[str]:
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def _bucket(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=HASH_SEED).digest()
    return int.from_bytes(digest, "big") % EMBED_DIM


def embed_fallback(text: str) -> np.ndarray:
    """Deterministic hashed term-frequency embedding (zero vector iff no tokens)."""
    vec = np.zeros(EMBED_DIM, dtype=np.float64)
    for token in tokenize(text):
        vec[_bucket(token)] += 1.0
    return vec


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Clamped cosine similarity in [0, 1]; 0 when either vector is zero."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    value = float(np.dot(a, b)) / (na * nb)
    return min(1.0, max(0.0, value))


def _text_of(content) -> str:
    return content if isinstance(content, str) else content.text


def sim_content(a, b, embedder: Embedder = embed_fallback) -> float:
    """Similarity of two knowledge contents (or raw texts) via the embedder.

    Also used as the relevance score of an item against an instance by
    passing the instance text for ``b``.
    """
    return cosine(embedder(_text_of(a)), embedder(_text_of(b)))


@dataclass(frozen=True)
class SimilarityParams:
    # Default calibrated against the fallback embedder: related-rule fixture
    # pairs score in the 0.41-0.59 band, unrelated pairs stay below 0.2.
    tau_sim: float = 0.40

    def __post_init__(self):
        if not (0.0 <= self.tau_sim <= 1.0):
            raise ValueError("tau_sim must lie in [0, 1]")


class EmbeddingCache:
    """Memoizes embeddings by exact text; safe for single-run reuse."""

    def __init__(self, embedder: Embedder = embed_fallback):
        self._embedder = embedder
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        hit = self._cache.get(text)
        if hit is None:
            hit = self._embedder(text)
            self._cache[text] = hit
        return hit


class RemoteEmbedderProtocol(Protocol):
    def __call__(self, text: str) -> np.ndarray: ...


class RemoteEmbedder:
    """HTTP adapter: POST {"text": ...} -> {"values": [...]} of length ``dim``.

    Calls are serialized internally so the adapter is safe to share across
    threads even when the remote side is not.
    """

    def __init__(self, endpoint: str, dim: int, timeout_s: float = 10.0, token: str | None = None):
        import httpx

        self.endpoint = endpoint
        self.dim = dim
        self._lock = threading.Lock()
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self._client = httpx.Client(timeout=timeout_s, headers=headers)

    def __call__(self, text: str) -> np.ndarray:
        import httpx

        with self._lock:
            try:
                resp = self._client.post(self.endpoint, json={"text": text})
            except httpx.HTTPError as exc:
                raise TransportError(f"embedder request failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"embedder returned HTTP {resp.status_code}")
        values = resp.json().get("values")
        if not isinstance(values, list) or len(values) != self.dim:
            raise DimensionMismatch(f"expected {self.dim} values, got {len(values) if isinstance(values, list) else 'none'}")
        vec = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            raise TransportError("embedder returned non-finite values")
        return vec

    def close(self) -> None:
        self._client.close()
