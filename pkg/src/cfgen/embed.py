"""Pluggable text-embedding backends and the on-disk embedding cache.

Two backends: ``remote`` posts batches to an embedding service
(POST {"texts": [...]} -> {"embeddings": [[...], ...]}), ``hashed_test``
is a fully specified deterministic local embedder used for tests and
offline runs. All downstream vector math is backend-agnostic.

The hashed embedder is reproducible bit-for-bit: character 3-grams are
hashed with 64-bit FNV-1a over the UTF-8 bytes of the 3-gram followed by
the UTF-8 bytes of ``str(seed)``; the bucket is ``hash % dimension``; the
sign is +1 when the next bit above the bucket (``(hash // dimension) & 1``)
is 0, else -1; signed counts are then L2-normalized. Texts shorter than
3 characters contribute the whole text as a single gram.

Cache file layout (all integers little-endian): magic ``CFEC``, u16
version, u32 dimension, u32 backend-id length + UTF-8 backend id, u64
record count, then fixed-width records of (u64 FNV-1a key of the text's
UTF-8 bytes, ``dimension`` float64 values).
"""

from __future__ import annotations

import logging
import os
import random
import struct
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

logger = logging.getLogger(__name__)

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

CACHE_MAGIC = b"CFEC"
CACHE_VERSION = 1


class EmbeddingError(RuntimeError):
    """Raised on backend failures, dimension mismatches, or non-finite values."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


@dataclass
class EmbeddingBackendConfig:
    kind: str = "hashed_test"  # "remote" | "hashed_test"
    dimension: int = 256
    batch_size: int = 64
    endpoint: Optional[str] = None
    auth_env_var: Optional[str] = None
    seed: int = 0  # hashed_test only
    normalize: bool = True
    max_in_flight: int = 4
    retries: int = 5
    backoff_base: float = 0.25
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "hashed_test"):
            raise ValueError(f"unknown embedding backend kind {self.kind!r}")
        if self.dimension < 2:
            raise ValueError("embedding dimension must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote embedding backend requires an endpoint")

    @property
    def backend_id(self) -> str:
        if self.kind == "hashed_test":
            return f"hashed_test:d={self.dimension}:seed={self.seed}"
        return f"remote:{self.endpoint}:d={self.dimension}"


def hashed_test_embed(text: str, dimension: int, seed: int = 0) -> np.ndarray:
    """Embed one text with the documented 3-gram FNV-1a scheme.

    Returns the zero vector when the text is empty or all signed counts
    cancel; otherwise the result has unit L2 norm.
    """
    if dimension < 2:
        raise ValueError("dimension must be >= 2")
    if len(text) >= 3:
        grams = [text[i : i + 3] for i in range(len(text) - 2)]
    else:
        grams = [text] if text else []
    vec = np.zeros(dimension, dtype=np.float64)
    tail = str(seed).encode("utf-8")
    for gram in grams:
        h = fnv1a64(gram.encode("utf-8") + tail)
        bucket = h % dimension
        sign = 1.0 if ((h // dimension) & 1) == 0 else -1.0
        vec[bucket] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def _post_with_retries(client, url: str, payload: dict, headers: dict, cfg: EmbeddingBackendConfig):
    last_exc: Optional[Exception] = None
    for attempt in range(cfg.retries):
        try:
            resp = client.post(url, json=payload, headers=headers, timeout=cfg.timeout)
        except Exception as exc:  # connection errors retry like 5xx
            last_exc = exc
            resp = None
        if resp is not None:
            if resp.status_code == 200:
                if attempt:
                    logger.info("request to %s succeeded after %d retries", url, attempt)
                return resp
            if resp.status_code not in (429,) and resp.status_code < 500:
                raise EmbeddingError(f"embedding service returned HTTP {resp.status_code}")
            last_exc = EmbeddingError(f"embedding service returned HTTP {resp.status_code}")
        if attempt < cfg.retries - 1:
            delay = cfg.backoff_base * (2**attempt) * (1.0 + random.random())
            time.sleep(delay)
    raise EmbeddingError(f"embedding request failed after {cfg.retries} attempts: {last_exc}")


def _remote_embed_batches(texts: list[str], cfg: EmbeddingBackendConfig) -> np.ndarray:
    import httpx

    headers = {}
    if cfg.auth_env_var:
        token = os.environ.get(cfg.auth_env_var)
        if not token:
            raise EmbeddingError(f"environment variable {cfg.auth_env_var} is not set")
        headers["Authorization"] = f"Bearer {token}"

    batches = [texts[i : i + cfg.batch_size] for i in range(0, len(texts), cfg.batch_size)]
    out: list[Optional[np.ndarray]] = [None] * len(batches)

    def fetch(idx: int) -> None:
        with httpx.Client() as client:
            resp = _post_with_retries(client, cfg.endpoint, {"texts": batches[idx]}, headers, cfg)
        body = resp.json()
        rows = body.get("embeddings")
        if rows is None or len(rows) != len(batches[idx]):
            raise EmbeddingError(
                f"embedding response has {0 if rows is None else len(rows)} rows for {len(batches[idx])} texts"
            )
        mat = np.asarray(rows, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[1] != cfg.dimension:
            got = mat.shape[1] if mat.ndim == 2 else "?"
            raise EmbeddingError(f"embedding dimension mismatch: got {got}, configured {cfg.dimension}")
        if not np.all(np.isfinite(mat)):
            raise EmbeddingError("embedding response contains non-finite values")
        out[idx] = mat

    with ThreadPoolExecutor(max_workers=max(1, cfg.max_in_flight)) as pool:
        list(pool.map(fetch, range(len(batches))))
    return np.vstack([m for m in out if m is not None]) if batches else np.zeros((0, cfg.dimension))


def embed_batch(texts: list[str], cfg: EmbeddingBackendConfig) -> np.ndarray:
    """Embed texts in input order; rows are L2-normalized when cfg.normalize."""
    if not texts:
        raise ValueError("texts must be non-empty")
    for i, t in enumerate(texts):
        if not t.strip():
            raise ValueError(f"text {i} is empty after trimming")
    if cfg.kind == "hashed_test":
        mat = np.stack([hashed_test_embed(t, cfg.dimension, cfg.seed) for t in texts])
    else:
        mat = _remote_embed_batches(texts, cfg)
    if cfg.normalize:
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        nz = norms[:, 0] > 0
        mat[nz] = mat[nz] / norms[nz]
    if not np.all(np.isfinite(mat)):
        raise EmbeddingError("non-finite embedding values")
    return mat


@dataclass
class EmbeddingStore:
    """On-disk cache of text embeddings, keyed by the text's FNV-1a hash.

    The 64-bit key makes collisions between distinct texts astronomically
    unlikely at the corpus scales this artifact targets.
    """

    dimension: int
    backend_id: str
    _vectors: dict[int, np.ndarray] = field(default_factory=dict)

    @staticmethod
    def key_for(text: str) -> int:
        return fnv1a64(text.encode("utf-8"))

    def __len__(self) -> int:
        return len(self._vectors)

    def has(self, text: str) -> bool:
        return self.key_for(text) in self._vectors

    def get(self, text: str) -> np.ndarray:
        key = self.key_for(text)
        if key not in self._vectors:
            raise KeyError(f"no cached embedding for text {text[:60]!r}")
        return self._vectors[key]

    def add(self, texts: Iterable[str], matrix: np.ndarray) -> None:
        for text, row in zip(texts, matrix):
            self._vectors[self.key_for(text)] = np.asarray(row, dtype=np.float64)

    def matrix_for(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.get(t) for t in texts]) if texts else np.zeros((0, self.dimension))

    def save(self, path: str | Path) -> None:
        """Atomic write: serialize to a temp file, then rename into place."""
        path = Path(path)
        bid = self.backend_id.encode("utf-8")
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(CACHE_MAGIC)
                fh.write(struct.pack("<HII", CACHE_VERSION, self.dimension, len(bid)))
                fh.write(bid)
                fh.write(struct.pack("<Q", len(self._vectors)))
                for key in sorted(self._vectors):
                    fh.write(struct.pack("<Q", key))
                    fh.write(self._vectors[key].astype("<f8").tobytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingStore":
        path = Path(path)
        with path.open("rb") as fh:
            magic = fh.read(4)
            if magic != CACHE_MAGIC:
                raise EmbeddingError(f"{path}: bad magic {magic!r}")
            version, dimension, bid_len = struct.unpack("<HII", fh.read(10))
            if version != CACHE_VERSION:
                raise EmbeddingError(f"{path}: unsupported cache version {version}")
            backend_id = fh.read(bid_len).decode("utf-8")
            (count,) = struct.unpack("<Q", fh.read(8))
            store = cls(dimension=dimension, backend_id=backend_id)
            row_bytes = 8 * dimension
            for _ in range(count):
                raw = fh.read(8 + row_bytes)
                if len(raw) != 8 + row_bytes:
                    raise EmbeddingError(f"{path}: truncated cache file")
                (key,) = struct.unpack("<Q", raw[:8])
                store._vectors[key] = np.frombuffer(raw[8:], dtype="<f8").copy()
        return store


def ensure_embeddings(texts: list[str], cfg: EmbeddingBackendConfig, store: EmbeddingStore) -> np.ndarray:
    """Return embeddings for texts in order, computing and caching any missing ones."""
    if store.dimension != cfg.dimension:
        raise EmbeddingError(f"store dimension {store.dimension} != backend dimension {cfg.dimension}")
    missing, seen = [], set()
    for t in texts:
        if not store.has(t) and t not in seen:
            missing.append(t)
            seen.add(t)
    if missing:
        store.add(missing, embed_batch(missing, cfg))
    return store.matrix_for(texts)
