"""Counterfactual retriever: dual projection encoders with contrastive training.

Base embeddings are frozen inputs (see :mod:`cfgen.embed`); this module
trains a linear projection per role (query / document) so the dot product
of projected vectors pulls counterfactual positives toward queries and
pushes paraphrase hard negatives away. The loss for one query with
positive similarity s+ and negative similarities s- is

    -log( exp(s+) / (exp(s+) + sum_j exp(s-_j)) )

computed with the usual max-shift for stability. With in-batch negatives
on, every other example's positive in the batch joins that example's
negative set.

Encoder checkpoints are binary: magic ``CFPE``, u16 version, u8 role
(0=query, 1=document), u32 d_in, u32 d_out, u32 metadata length + UTF-8
JSON, then d_in*d_out row-major little-endian float64 weights.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .data import TripletRecord

logger = logging.getLogger(__name__)

ENCODER_MAGIC = b"CFPE"
ENCODER_VERSION = 1
_ROLES = ("query", "document")


class TrainingError(RuntimeError):
    """Raised on divergence or non-finite gradients."""


@dataclass
class ProjectionEncoder:
    weights: np.ndarray  # d_in x d_out
    role: str

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.role not in _ROLES:
            raise ValueError(f"unknown encoder role {self.role!r}")
        if self.weights.ndim != 2 or self.weights.shape[1] < 2:
            raise ValueError("encoder weights must be d_in x d_out with d_out >= 2")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("encoder weights must be finite")

    @property
    def d_in(self) -> int:
        return self.weights.shape[0]

    @property
    def d_out(self) -> int:
        return self.weights.shape[1]

    def project(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[-1] != self.d_in:
            raise ValueError(f"expected dimension {self.d_in}, got {vectors.shape[-1]}")
        return vectors @ self.weights


def init_encoder(d_in: int, d_out: int, role: str, rng: np.random.Generator) -> ProjectionEncoder:
    """Scaled-uniform init in [-1/sqrt(d_in), +1/sqrt(d_in)] from the given generator."""
    scale = 1.0 / np.sqrt(d_in)
    return ProjectionEncoder(weights=rng.uniform(-scale, scale, size=(d_in, d_out)), role=role)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 32
    seed: int = 0
    in_batch_negatives: bool = True
    grad_clip: float = 2.0
    eval_every: int = 10
    projection_dim: int = 64

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate and grad_clip must be positive")
        if self.in_batch_negatives and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 with in-batch negatives")
        if self.projection_dim < 2:
            raise ValueError("projection_dim must be >= 2")


@dataclass
class EvalPool:
    """One top-1 evaluation instance: the positive against 30+30 negatives."""

    query: str
    positive: str
    random_negatives: list[str]
    hard_negatives: list[str]

    def __post_init__(self) -> None:
        if len(self.random_negatives) != 30 or len(self.hard_negatives) != 30:
            raise ValueError("an eval pool needs exactly 30 random and 30 hard negatives")
        if self.positive in self.random_negatives or self.positive in self.hard_negatives:
            raise ValueError("positive must not appear among the negatives")


def similarity(q_vec: np.ndarray, p_vec: np.ndarray) -> float:
    """Dot product of two projected vectors."""
    q_vec = np.asarray(q_vec, dtype=np.float64)
    p_vec = np.asarray(p_vec, dtype=np.float64)
    if q_vec.shape != p_vec.shape:
        raise ValueError(f"dimension mismatch: {q_vec.shape} vs {p_vec.shape}")
    return float(q_vec @ p_vec)


def loss_from_sims(sims: np.ndarray) -> float:
    """Softmax cross-entropy given similarities; sims[0] is the positive."""
    sims = np.asarray(sims, dtype=np.float64)
    if not np.all(np.isfinite(sims)):
        raise ValueError("non-finite similarity")
    m = float(sims.max())
    return m + float(np.log(np.exp(sims - m).sum())) - float(sims[0])


def softmax_grad_from_sims(sims: np.ndarray) -> np.ndarray:
    """d(loss)/d(sims): softmax probabilities minus the positive's one-hot."""
    sims = np.asarray(sims, dtype=np.float64)
    e = np.exp(sims - sims.max())
    g = e / e.sum()
    g[0] -= 1.0
    return g


def contrastive_loss(q: np.ndarray, p_plus: np.ndarray, p_negs: Sequence[np.ndarray]) -> float:
    """Contrastive loss for a single (query, positive, negatives) instance."""
    if len(p_negs) == 0:
        raise ValueError("p_negs must be non-empty")
    sims = np.array([similarity(q, p_plus)] + [similarity(q, n) for n in p_negs])
    return loss_from_sims(sims)


@dataclass
class TripletEmbeddings:
    """Base-space embeddings for one triplet."""

    query: np.ndarray
    positive: np.ndarray
    negatives: list[np.ndarray] = field(default_factory=list)


def embed_triplets(triplets: Sequence[TripletRecord], embeddings: Mapping | "object") -> list[TripletEmbeddings]:
    """Look up cached base embeddings for every triplet text.

    ``embeddings`` is anything with a mapping-style lookup by text (an
    :class:`cfgen.embed.EmbeddingStore` or a plain dict).
    """
    get = embeddings.get if hasattr(embeddings, "get") else embeddings.__getitem__

    def lookup(text: str) -> np.ndarray:
        vec = get(text)
        if vec is None:
            raise KeyError(f"no cached base embedding for {text[:60]!r}; run the embed stage first")
        return np.asarray(vec, dtype=np.float64)

    return [
        TripletEmbeddings(
            query=lookup(t.query),
            positive=lookup(t.positive),
            negatives=[lookup(n) for n in t.hard_negatives],
        )
        for t in triplets
    ]


def loss_gradients(
    batch: Sequence[TripletEmbeddings],
    encoders: tuple[ProjectionEncoder, ProjectionEncoder],
    in_batch_negatives: bool = True,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean-batch loss and its gradients w.r.t. both weight matrices.

    Negatives for example i are its own hard negatives plus, when
    ``in_batch_negatives``, every other example's positive in the batch.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    q_enc, d_enc = encoders
    grad_q = np.zeros_like(q_enc.weights)
    grad_d = np.zeros_like(d_enc.weights)
    total = 0.0
    proj_pos = [d_enc.project(t.positive) for t in batch]
    for bi, trip in enumerate(batch):
        u = trip.query
        q = q_enc.project(u)
        cand_base = [trip.positive] + list(trip.negatives)
        cand_proj = [proj_pos[bi]] + [d_enc.project(n) for n in trip.negatives]
        if in_batch_negatives:
            for bj, other in enumerate(batch):
                if bj != bi:
                    cand_base.append(other.positive)
                    cand_proj.append(proj_pos[bj])
        base = np.stack(cand_base)
        proj = np.stack(cand_proj)
        sims = proj @ q
        g = softmax_grad_from_sims(sims)
        total += loss_from_sims(sims)
        grad_q += np.outer(u, g @ proj)
        grad_d += base.T @ (g[:, None] * q[None, :])
    n = len(batch)
    grad_q /= n
    grad_d /= n
    if not (np.all(np.isfinite(grad_q)) and np.all(np.isfinite(grad_d))):
        bad = [
            bi
            for bi, t in enumerate(batch)
            if not (np.all(np.isfinite(t.query)) and np.all(np.isfinite(t.positive)))
        ]
        raise TrainingError(f"non-finite gradient (suspect batch indices {bad or 'unknown'})")
    return grad_q, grad_d, total / n


def train(
    triplets: Sequence[TripletRecord],
    embeddings,
    cfg: TrainConfig,
    eval_pools: Optional[Sequence[EvalPool]] = None,
) -> tuple[ProjectionEncoder, ProjectionEncoder, list[dict]]:
    """Train both projections with plain gradient descent and norm clipping.

    Deterministic for a fixed (triplets, embeddings, cfg): initialization
    and per-epoch shuffles come from one seeded generator. The returned
    log has one entry per epoch: {"epoch", "mean_loss", "eval_top1"}, with
    eval_top1 present every ``eval_every`` epochs when pools are given.
    """
    if not triplets:
        raise ValueError("need at least one training triplet")
    bundles = embed_triplets(triplets, embeddings)
    d_in = bundles[0].query.shape[0]
    rng = np.random.default_rng(cfg.seed)
    q_enc = init_encoder(d_in, cfg.projection_dim, "query", rng)
    d_enc = init_encoder(d_in, cfg.projection_dim, "document", rng)

    log: list[dict] = []
    n = len(bundles)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [bundles[i] for i in idx]
            try:
                gq, gd, loss = loss_gradients(batch, (q_enc, d_enc), cfg.in_batch_negatives)
            except (ValueError, TrainingError) as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise TrainingError(f"training diverged (loss is not finite) at epoch {epoch}")
            # norm via BLAS nrm2: scaled accumulation, no overflow for large grads
            gnorm = float(np.linalg.norm(np.concatenate([gq.ravel(), gd.ravel()])))
            if gnorm > cfg.grad_clip:
                scale = cfg.grad_clip / gnorm
                gq = gq * scale
                gd = gd * scale
            q_enc.weights -= cfg.learning_rate * gq
            d_enc.weights -= cfg.learning_rate * gd
            epoch_loss += loss
            batches += 1
        entry: dict = {"epoch": epoch, "mean_loss": epoch_loss / batches}
        if eval_pools and cfg.eval_every > 0 and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            entry["eval_top1"] = evaluate_top1(q_enc, d_enc, eval_pools, embeddings)
        log.append(entry)
    return q_enc, d_enc, log


def evaluate_top1(
    query_encoder: ProjectionEncoder,
    document_encoder: ProjectionEncoder,
    pools: Sequence[EvalPool],
    embeddings,
) -> float:
    """Fraction of pools where the positive is the strict similarity maximum.

    Each pool has 61 candidates (positive + 30 random + 30 hard); ties
    count as failure.
    """
    if not pools:
        return 0.0
    get = embeddings.get if hasattr(embeddings, "get") else embeddings.__getitem__

    def lookup(text: str) -> np.ndarray:
        vec = get(text)
        if vec is None:
            raise KeyError(f"no cached base embedding for {text[:60]!r}")
        return np.asarray(vec, dtype=np.float64)

    def is_correct(pool: EvalPool) -> bool:
        q = query_encoder.project(lookup(pool.query))
        cands = [pool.positive] + pool.random_negatives + pool.hard_negatives
        proj = document_encoder.project(np.stack([lookup(c) for c in cands]))
        sims = proj @ q
        return bool(sims[0] > sims[1:].max())

    # encoders are read-only here; parallelizing over pools cannot change
    # the mean, so large evaluations fan out over a small thread pool
    if len(pools) > 64:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=4) as tp:
            results = list(tp.map(is_correct, pools))
    else:
        results = [is_correct(p) for p in pools]
    return sum(results) / len(pools)


def build_eval_pools(
    pairs: Sequence[tuple[str, str]],
    corpus_texts: Sequence[str],
    embeddings,
    seed: int = 0,
    n_random: int = 30,
    n_hard: int = 30,
) -> list[EvalPool]:
    """Build evaluation pools from held-out (query, positive) pairs.

    Hard negatives are the corpus texts nearest the query in the frozen
    base-embedding space (a stand-in for a semantic-similarity retriever);
    random negatives are drawn uniformly from the rest of the corpus.
    """
    get = embeddings.get if hasattr(embeddings, "get") else embeddings.__getitem__

    def lookup(text: str) -> np.ndarray:
        vec = get(text)
        if vec is None:
            raise KeyError(f"no cached base embedding for {text[:60]!r}")
        return np.asarray(vec, dtype=np.float64)

    corpus_texts = list(dict.fromkeys(corpus_texts))
    if len(corpus_texts) < n_random + n_hard + 1:
        raise ValueError(f"corpus too small for {n_random}+{n_hard} negatives per pool")
    corpus_mat = np.stack([lookup(t) for t in corpus_texts])
    rng = np.random.default_rng(seed)
    pools = []
    for query, positive in pairs:
        q = lookup(query)
        sims = corpus_mat @ q
        order = np.argsort(-sims, kind="stable")
        hard, used = [], {positive, query}
        for i in order:
            t = corpus_texts[i]
            if t not in used:
                hard.append(t)
                used.add(t)
            if len(hard) == n_hard:
                break
        remaining = [t for t in corpus_texts if t not in used]
        if len(hard) < n_hard or len(remaining) < n_random:
            raise ValueError("corpus too small to fill a pool")
        rand = [remaining[i] for i in rng.choice(len(remaining), size=n_random, replace=False)]
        pools.append(EvalPool(query=query, positive=positive, random_negatives=rand, hard_negatives=hard))
    return pools


def save_encoder(enc: ProjectionEncoder, path: str | Path, meta: Optional[dict] = None) -> None:
    path = Path(path)
    meta_bytes = json.dumps(meta or {}, ensure_ascii=False).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(ENCODER_MAGIC)
        fh.write(struct.pack("<HBII", ENCODER_VERSION, _ROLES.index(enc.role), enc.d_in, enc.d_out))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(enc.weights.astype("<f8").tobytes())


def load_encoder(path: str | Path) -> ProjectionEncoder:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(4)
        if magic != ENCODER_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, role_idx, d_in, d_out = struct.unpack("<HBII", fh.read(11))
        if version != ENCODER_VERSION:
            raise ValueError(f"{path}: unsupported encoder version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        fh.read(meta_len)
        raw = fh.read(8 * d_in * d_out)
        if len(raw) != 8 * d_in * d_out:
            raise ValueError(f"{path}: truncated encoder file")
        weights = np.frombuffer(raw, dtype="<f8").reshape(d_in, d_out).copy()
    return ProjectionEncoder(weights=weights, role=_ROLES[role_idx])


def write_training_log(log: list[dict], path: str | Path) -> None:
    """Line-delimited JSON: {"epoch", "mean_loss", "eval_top1"?} per epoch."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
