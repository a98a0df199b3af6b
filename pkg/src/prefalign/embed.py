"""Unit-norm prompt embeddings from three providers, plus cosine distances.

Providers:

* hashed bag-of-words -- deterministic, dependency-free stand-in encoder;
* file-backed -- JSONL map from text to a precomputed vector;
* HTTP -- client for an external sentence-encoder service speaking the wire
  protocol ``POST <endpoint>/embed {"texts": [...]}`` ->
  ``{"embeddings": [[...]], "dim": n}``.

Every provider L2-normalizes, so cosine distance is 1 minus the inner product
and lands in [0, 2]. Embeddings are cached per unique text; providers are pure
after construction.
"""

from __future__ import annotations

import json
import threading
import warnings
from pathlib import Path
from typing import Protocol, Sequence, Union

import numpy as np
import requests

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class EmbeddingError(Exception):
    """Base class for embedding-provider failures."""


class EmbeddingFileError(EmbeddingError):
    """Malformed embedding file (inconsistent dim, non-finite component)."""


class EmbeddingConnectionError(EmbeddingError):
    """The embedding endpoint could not be reached."""


class EmbeddingStatusError(EmbeddingError):
    """The embedding endpoint answered with a non-200 status."""


class EmbeddingCountError(EmbeddingError):
    """The endpoint returned a different number of vectors than requested."""


class EmbeddingValueError(EmbeddingError):
    """The endpoint returned malformed or non-finite vector data."""


class DegenerateEmbeddingError(EmbeddingValueError):
    """The endpoint returned an (effectively) zero vector."""


def fnv1a64(data: bytes) -> int:
    """FNV-1a 64-bit hash; the fixed token-to-bucket hash for hashed-bow."""
    h = _FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV64_PRIME) & _MASK64
    return h


def token_bucket(token: str, dim: int) -> int:
    return fnv1a64(token.encode("utf-8")) % dim


def embed_hashed_bow(text: str, dim: int) -> np.ndarray:
    """Hashed bag-of-words embedding: lowercase, split on whitespace, +1 per
    token into bucket fnv1a64(token) mod dim, then L2-normalize.

    Empty text (no tokens) maps to the unit vector e0 so downstream cosine
    math never sees a zero-norm vector.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    vec = np.zeros(dim, dtype=np.float64)
    for token in text.lower().split():
        vec[token_bucket(token, dim)] += 1.0
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - <a, b> for unit-norm inputs; in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(1.0 - a @ b)


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise EmbeddingValueError("zero-norm embedding cannot be normalized")
    return mat / norms


def load_embedding_file(path: Union[str, Path]) -> dict[str, np.ndarray]:
    """Load a JSONL file of {"text": ..., "embedding": [...]} records.

    Vectors are re-normalized to unit L2 on load. Duplicate texts keep the
    last record and emit a warning; inconsistent dims or non-finite
    components raise EmbeddingFileError naming the line.
    """
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EmbeddingFileError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if "text" not in rec or "embedding" not in rec:
                raise EmbeddingFileError(f"line {lineno}: needs 'text' and 'embedding'")
            vec = np.asarray(rec["embedding"], dtype=np.float64)
            if vec.ndim != 1 or vec.size < 1:
                raise EmbeddingFileError(f"line {lineno}: embedding must be a flat vector")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise EmbeddingFileError(
                    f"line {lineno}: dim {vec.size} != established dim {dim}"
                )
            if not np.all(np.isfinite(vec)):
                raise EmbeddingFileError(f"line {lineno}: non-finite component")
            norm = np.linalg.norm(vec)
            if norm == 0.0:
                raise EmbeddingFileError(f"line {lineno}: zero vector")
            text = str(rec["text"])
            if text in table:
                warnings.warn(f"duplicate embedding for text {text!r}; keeping the last")
            table[text] = vec / norm
    return table


def fetch_embeddings_http(
    endpoint: str, texts: Sequence[str], timeout: float = 10.0
) -> np.ndarray:
    """POST texts to <endpoint>/embed and return locally re-normalized vectors,
    one row per input text, in order."""
    if not texts:
        raise ValueError("texts must be non-empty")
    url = endpoint.rstrip("/") + "/embed"
    try:
        resp = requests.post(url, json={"texts": list(texts)}, timeout=timeout)
    except requests.RequestException as exc:
        raise EmbeddingConnectionError(f"embedding request to {url} failed: {exc}") from exc
    if resp.status_code != 200:
        raise EmbeddingStatusError(f"{url} answered {resp.status_code}: {resp.text[:200]}")
    try:
        body = resp.json()
        vectors = body["embeddings"]
    except (ValueError, KeyError, TypeError) as exc:
        raise EmbeddingValueError(f"malformed response body from {url}") from exc
    if len(vectors) != len(texts):
        raise EmbeddingCountError(
            f"asked for {len(texts)} embeddings, got {len(vectors)}"
        )
    try:
        mat = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise EmbeddingValueError("ragged embedding rows in response") from exc
    if mat.ndim != 2:
        raise EmbeddingValueError("embeddings must be a list of flat vectors")
    if not np.all(np.isfinite(mat)):
        raise EmbeddingValueError("non-finite embedding component in response")
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateEmbeddingError("response contains a zero embedding vector")
    return mat / norms[:, None]


class EmbeddingProvider(Protocol):
    """Anything that maps a list of texts to a matrix of unit rows."""

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


class HashedBowProvider:
    """Pure in-process provider; safe to share across threads."""

    kind = "hashed-bow"

    def __init__(self, dim: int = 256):
        if dim < 8:
            raise ValueError("dim must be >= 8")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            vec = self._cache.get(text)
            if vec is None:
                vec = embed_hashed_bow(text, self.dim)
                self._cache[text] = vec
            rows.append(vec)
        return np.stack(rows)


class FileBackedProvider:
    """Serves precomputed vectors from a JSONL file; unknown text raises."""

    kind = "file-backed"

    def __init__(self, path: Union[str, Path]):
        self._table = load_embedding_file(path)
        if not self._table:
            raise EmbeddingFileError(f"embedding file {path} is empty")
        self.dim = next(iter(self._table.values())).size

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for text in texts:
            if text not in self._table:
                raise KeyError(f"no embedding on file for text {text!r}")
            rows.append(self._table[text])
        return np.stack(rows)


class HttpProvider:
    """Client for an external embedding service.

    Requests are serialized (one in flight); not shareable across threads
    without external coordination. With ``fallback_to_bow`` set, any HTTP
    failure falls back to a hashed bag-of-words embedding instead of raising.
    """

    kind = "http"

    def __init__(
        self,
        endpoint: str,
        timeout: float = 10.0,
        fallback_to_bow: bool = False,
        bow_dim: int = 256,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self._fallback = HashedBowProvider(bow_dim) if fallback_to_bow else None
        self._fallen_back = False
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        with self._lock:
            missing = [t for t in texts if t not in self._cache]
            if missing:
                if self._fallen_back:
                    fetched = self._fallback.embed_many(missing)
                else:
                    try:
                        fetched = fetch_embeddings_http(self.endpoint, missing, self.timeout)
                    except EmbeddingError:
                        if self._fallback is None:
                            raise
                        # Sticky fallback; drop HTTP vectors so dims stay consistent.
                        self._fallen_back = True
                        self._cache.clear()
                        missing = list(texts)
                        fetched = self._fallback.embed_many(missing)
                for text, vec in zip(missing, fetched):
                    self._cache[text] = vec
            return np.stack([self._cache[t] for t in texts])
