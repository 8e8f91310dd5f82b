"""Maximum inner-product search over the embedded corpus.

Two index kinds: ``exact`` does a brute-force dot-product scan; ``ivf``
clusters the corpus with k-means (k-means++ seeding, Lloyd iterations)
and searches only the ``n_probe`` clusters whose centroids have the
largest dot product with the query. Cluster assignment uses Euclidean
distance on the stored vectors while probing ranks centroids by dot
product — standard IVF-Flat practice for inner-product metrics.

Vectors are stored sorted by doc_id so score ties always break toward
the ascending doc_id, making searches exactly reproducible.

Index file layout (integers little-endian): magic ``CFIX``, u16 version,
u8 kind (0=exact, 1=ivf), u32 dimension, u64 count, u32 metadata length +
UTF-8 JSON, doc_id table (per id: u32 length + UTF-8 bytes), count*dim
float64 vectors, then for ivf: u32 k_centroids, u32 n_probe, u32
kmeans_max_iters, i64 kmeans_seed, k*dim float64 centroids, count u32
assignments.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import CorpusDocument

INDEX_MAGIC = b"CFIX"
INDEX_VERSION = 1
_KINDS = ("exact", "ivf")


class IndexError_(ValueError):
    """Raised on malformed index inputs or files."""


@dataclass
class IvfParams:
    k_centroids: int = 300
    n_probe: int = 30
    kmeans_max_iters: int = 25
    kmeans_seed: int = 0

    def __post_init__(self) -> None:
        if self.k_centroids < 1:
            raise IndexError_("k_centroids must be >= 1")
        if not (1 <= self.n_probe <= self.k_centroids):
            raise IndexError_("n_probe must satisfy 1 <= n_probe <= k_centroids")
        if self.kmeans_max_iters < 1:
            raise IndexError_("kmeans_max_iters must be >= 1")


@dataclass
class IvfStructures:
    centroids: np.ndarray  # k x d
    assignments: np.ndarray  # one centroid index per stored vector
    params: IvfParams


@dataclass
class VectorIndex:
    kind: str
    dimension: int
    doc_ids: list[str]
    vectors: np.ndarray
    ivf: Optional[IvfStructures] = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise IndexError_(f"unknown index kind {self.kind!r}")
        if len(self.doc_ids) != self.vectors.shape[0]:
            raise IndexError_("doc_ids and vectors row count must match")
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise IndexError_("doc_ids must be unique")
        if self.ivf is not None:
            k = self.ivf.centroids.shape[0]
            if self.ivf.assignments.min(initial=0) < 0 or self.ivf.assignments.max(initial=-1) >= k:
                raise IndexError_("assignment references an invalid centroid")


def _sorted_by_doc_id(docs: Sequence[CorpusDocument], embeddings: np.ndarray) -> tuple[list[str], np.ndarray]:
    if len(docs) == 0:
        raise IndexError_("cannot build an index over zero documents")
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        raise IndexError_("duplicate doc_id in corpus")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] != len(docs):
        raise IndexError_(f"{len(docs)} documents but {embeddings.shape[0]} embedding rows")
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    return [ids[i] for i in order], embeddings[order]


def build_exact(docs: Sequence[CorpusDocument], embeddings: np.ndarray) -> VectorIndex:
    ids, vectors = _sorted_by_doc_id(docs, embeddings)
    return VectorIndex(kind="exact", dimension=vectors.shape[1], doc_ids=ids, vectors=vectors)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, points x centroids."""
    return (
        (points**2).sum(axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids**2).sum(axis=1)[None, :]
    )


def kmeans(
    vectors: np.ndarray,
    k: int,
    max_iters: int = 25,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's k-means with k-means++ seeding.

    Runs until the assignment fixpoint or ``max_iters``. Empty clusters
    are repaired by stealing the point currently farthest from its
    centroid. Returns (centroids, assignments, objective history); the
    objective (sum of squared distances) is non-increasing across
    iterations.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if k > n:
        raise IndexError_(f"k_centroids={k} exceeds corpus size {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, vectors.shape[1]), dtype=np.float64)
    centroids[0] = vectors[rng.integers(n)]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = vectors[rng.integers(n)]
        else:
            centroids[j] = vectors[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((vectors - centroids[j]) ** 2).sum(axis=1))

    objective: list[float] = []
    prev: Optional[np.ndarray] = None
    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        dists = _sq_dists(vectors, centroids)
        assignments = dists.argmin(axis=1)
        counts = np.bincount(assignments, minlength=k)
        if (counts == 0).any():
            own = dists[np.arange(n), assignments].copy()
            for c in np.flatnonzero(counts == 0):
                far = int(own.argmax())
                centroids[c] = vectors[far]
                assignments[far] = c
                own[far] = 0.0
            dists = _sq_dists(vectors, centroids)
        objective.append(float(dists[np.arange(n), assignments].sum()))
        if prev is not None and np.array_equal(assignments, prev):
            break
        for c in range(k):
            members = assignments == c
            if members.any():
                centroids[c] = vectors[members].mean(axis=0)
        prev = assignments
    # final assignment against the final centroids
    assignments = _sq_dists(vectors, centroids).argmin(axis=1)
    return centroids, assignments, objective


def build_ivf(docs: Sequence[CorpusDocument], embeddings: np.ndarray, params: IvfParams) -> VectorIndex:
    ids, vectors = _sorted_by_doc_id(docs, embeddings)
    centroids, assignments, _ = kmeans(
        vectors, params.k_centroids, max_iters=params.kmeans_max_iters, seed=params.kmeans_seed
    )
    return VectorIndex(
        kind="ivf",
        dimension=vectors.shape[1],
        doc_ids=ids,
        vectors=vectors,
        ivf=IvfStructures(centroids=centroids, assignments=assignments, params=params),
    )


def search(
    index: VectorIndex,
    query: np.ndarray,
    k: int,
    n_probe: Optional[int] = None,
) -> list[tuple[str, float]]:
    """Top-k documents by dot product, scores descending, doc_id tie-break.

    For ivf indexes the scan is restricted to the ``n_probe`` clusters
    whose centroids score highest against the query (override per call
    with ``n_probe``). Returns min(k, candidate count) results.
    """
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dimension,):
        raise IndexError_(f"query dimension {query.shape} does not match index ({index.dimension},)")
    if k < 1:
        raise IndexError_("k must be >= 1")
    if index.kind == "exact":
        positions = np.arange(len(index.doc_ids))
        scores = index.vectors @ query
    else:
        assert index.ivf is not None
        probes = index.ivf.params.n_probe if n_probe is None else n_probe
        probes = max(1, min(probes, index.ivf.centroids.shape[0]))
        cent_scores = index.ivf.centroids @ query
        probe_ids = np.argsort(-cent_scores, kind="stable")[:probes]
        mask = np.isin(index.ivf.assignments, probe_ids)
        positions = np.flatnonzero(mask)
        scores = index.vectors[positions] @ query
    # vectors are stored in ascending doc_id order, so a stable sort on
    # descending score breaks ties toward the smaller doc_id
    top = np.argsort(-scores, kind="stable")[:k]
    return [(index.doc_ids[positions[i]], float(scores[i])) for i in top]


def save_index(index: VectorIndex, path: str | Path, meta: Optional[dict] = None) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, ensure_ascii=False).encode("utf-8")
    n, d = index.vectors.shape
    with path.open("wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<HBIQ", INDEX_VERSION, _KINDS.index(index.kind), d, n))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for doc_id in index.doc_ids:
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(index.vectors.astype("<f8").tobytes())
        if index.kind == "ivf":
            assert index.ivf is not None
            p = index.ivf.params
            fh.write(struct.pack("<IIIq", p.k_centroids, p.n_probe, p.kmeans_max_iters, p.kmeans_seed))
            fh.write(index.ivf.centroids.astype("<f8").tobytes())
            fh.write(index.ivf.assignments.astype("<u4").tobytes())


def _read_exact(fh, count: int) -> bytes:
    raw = fh.read(count)
    if len(raw) != count:
        raise IndexError_("truncated index file")
    return raw


def load_index(path: str | Path) -> VectorIndex:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != INDEX_MAGIC:
            raise IndexError_(f"{path}: bad magic {magic!r}")
        version, kind_idx, d, n = struct.unpack("<HBIQ", _read_exact(fh, 15))
        if version != INDEX_VERSION:
            raise IndexError_(f"{path}: unsupported index version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4))
        _read_exact(fh, meta_len)
        doc_ids = []
        for _ in range(n):
            (id_len,) = struct.unpack("<I", _read_exact(fh, 4))
            doc_ids.append(_read_exact(fh, id_len).decode("utf-8"))
        vectors = np.frombuffer(_read_exact(fh, 8 * n * d), dtype="<f8").reshape(n, d).copy()
        ivf = None
        if _KINDS[kind_idx] == "ivf":
            k, n_probe, max_iters, seed = struct.unpack("<IIIq", _read_exact(fh, 20))
            centroids = np.frombuffer(_read_exact(fh, 8 * k * d), dtype="<f8").reshape(k, d).copy()
            assignments = np.frombuffer(_read_exact(fh, 4 * n), dtype="<u4").astype(np.int64)
            ivf = IvfStructures(
                centroids=centroids,
                assignments=assignments,
                params=IvfParams(k_centroids=k, n_probe=n_probe, kmeans_max_iters=max_iters, kmeans_seed=seed),
            )
    return VectorIndex(kind=_KINDS[kind_idx], dimension=d, doc_ids=doc_ids, vectors=vectors, ivf=ivf)
