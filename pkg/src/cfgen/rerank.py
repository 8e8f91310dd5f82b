"""Re-rank bi-encoder retrievals with a pluggable pair scorer.

The trainable scorer is a logistic model over five hand-rolled pair
features (a desk-scale stand-in for a jointly encoded cross-encoder); a
remote scorer client speaks POST {"query": s, "docs": [...]} ->
{"probs": [...]} so a real cross-encoder can be plugged in behind the
same interface. Feature vector order: [dot, cosine, l2_distance,
token_jaccard, length_ratio].
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class PairFeatures:
    dot: float
    cosine: float
    l2_distance: float
    token_jaccard: float
    length_ratio: float

    def __post_init__(self) -> None:
        vals = (self.dot, self.cosine, self.l2_distance, self.token_jaccard, self.length_ratio)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("pair features must be finite")
        if not (0.0 <= self.token_jaccard <= 1.0):
            raise ValueError("token_jaccard out of [0,1]")
        if not (0.0 < self.length_ratio <= 1.0):
            raise ValueError("length_ratio out of (0,1]")

    def as_vector(self) -> np.ndarray:
        return np.array(
            [self.dot, self.cosine, self.l2_distance, self.token_jaccard, self.length_ratio],
            dtype=np.float64,
        )


def features(q_text: str, d_text: str, q_vec: np.ndarray, d_vec: np.ndarray) -> PairFeatures:
    """Vector and token-overlap features for one (query, document) pair."""
    if not q_text.strip() or not d_text.strip():
        raise ValueError("texts must be non-empty")
    q_vec = np.asarray(q_vec, dtype=np.float64)
    d_vec = np.asarray(d_vec, dtype=np.float64)
    if q_vec.shape != d_vec.shape:
        raise ValueError("vectors must have the same dimension")
    dot = float(q_vec @ d_vec)
    qn, dn = float(np.linalg.norm(q_vec)), float(np.linalg.norm(d_vec))
    cosine = dot / (qn * dn) if qn > 0 and dn > 0 else 0.0
    l2 = float(np.linalg.norm(q_vec - d_vec))
    q_tokens = set(q_text.lower().split())
    d_tokens = set(d_text.lower().split())
    union = q_tokens | d_tokens
    jaccard = len(q_tokens & d_tokens) / len(union) if union else 0.0
    nq, nd = len(q_text.split()), len(d_text.split())
    ratio = min(nq, nd) / max(nq, nd)
    return PairFeatures(dot=dot, cosine=cosine, l2_distance=l2, token_jaccard=jaccard, length_ratio=ratio)


@dataclass
class LogisticScorer:
    weights: np.ndarray  # 5 entries, feature order as documented above
    bias: float = 0.0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (5,):
            raise ValueError("scorer expects exactly 5 feature weights")
        if not (np.all(np.isfinite(self.weights)) and math.isfinite(self.bias)):
            raise ValueError("scorer parameters must be finite")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def score(scorer: LogisticScorer, feats: PairFeatures) -> float:
    """Positive-pair probability: sigmoid(w . f + b)."""
    return _sigmoid(float(scorer.weights @ feats.as_vector()) + scorer.bias)


def bce_loss_and_grad(
    X: np.ndarray, y: np.ndarray, weights: np.ndarray, bias: float
) -> tuple[float, np.ndarray, float]:
    """Mean binary cross-entropy and its gradient w.r.t. (weights, bias)."""
    z = X @ weights + bias
    p = 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    eps = 1e-12
    loss = float(-np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps)))
    resid = p - y
    return loss, X.T @ resid / len(y), float(resid.mean())


def train_bce(
    pairs: Sequence[tuple[PairFeatures, int]],
    lr: float = 0.5,
    epochs: int = 200,
    seed: int = 0,
) -> LogisticScorer:
    """Full-batch gradient descent on mean BCE; deterministic given seed."""
    labels = {label for _, label in pairs}
    if labels != {0, 1}:
        raise ValueError("training pairs must contain both labels 0 and 1")
    X = np.stack([f.as_vector() for f, _ in pairs])
    y = np.array([label for _, label in pairs], dtype=np.float64)
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-0.01, 0.01, size=5)
    bias = 0.0
    for epoch in range(epochs):
        loss, gw, gb = bce_loss_and_grad(X, y, weights, bias)
        if not math.isfinite(loss):
            raise RuntimeError(f"reranker training diverged at epoch {epoch}")
        weights -= lr * gw
        bias -= lr * gb
    return LogisticScorer(weights=weights, bias=bias)


def rerank_by_probs(results: Sequence[T], probs: Sequence[float]) -> list[T]:
    """Stable reorder by probability descending; ties keep input order."""
    if not results:
        raise ValueError("results must be non-empty")
    if len(results) != len(probs):
        raise ValueError("one probability per result required")
    order = sorted(range(len(results)), key=lambda i: -probs[i])
    return [results[i] for i in order]


def rerank(
    results: Sequence[tuple[T, float]],
    scorer: LogisticScorer,
    query_text: str,
    query_vec: np.ndarray,
    doc_texts: Sequence[str],
    doc_vecs: np.ndarray,
) -> list[tuple[T, float]]:
    """Reorder bi-encoder results by cross-scorer probability.

    ``results`` pairs each item with its bi-encoder score; texts/vectors
    are aligned with results. Returns (item, probability) sorted stably by
    probability descending.
    """
    probs = [
        score(scorer, features(query_text, d_text, query_vec, d_vec))
        for d_text, d_vec in zip(doc_texts, doc_vecs)
    ]
    reordered = rerank_by_probs(list(zip((item for item, _ in results), probs)), probs)
    return reordered


class RemoteScorer:
    """HTTP pair scorer mirroring the embedding client's retry behavior."""

    def __init__(
        self,
        endpoint: str,
        auth_env_var: Optional[str] = None,
        retries: int = 5,
        backoff_base: float = 0.25,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint
        self.auth_env_var = auth_env_var
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout

    def score_docs(self, query: str, docs: Sequence[str]) -> list[float]:
        import httpx

        headers = {}
        if self.auth_env_var:
            token = os.environ.get(self.auth_env_var)
            if not token:
                raise RuntimeError(f"environment variable {self.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries):
            try:
                with httpx.Client() as client:
                    resp = client.post(
                        self.endpoint,
                        json={"query": query, "docs": list(docs)},
                        headers=headers,
                        timeout=self.timeout,
                    )
            except Exception as exc:
                last_exc = exc
                resp = None
            if resp is not None:
                if resp.status_code == 200:
                    probs = resp.json().get("probs")
                    if probs is None or len(probs) != len(docs):
                        raise RuntimeError("scorer response must carry one prob per doc")
                    return [float(p) for p in probs]
                if resp.status_code not in (429,) and resp.status_code < 500:
                    raise RuntimeError(f"scorer returned HTTP {resp.status_code}")
                last_exc = RuntimeError(f"scorer returned HTTP {resp.status_code}")
            if attempt < self.retries - 1:
                time.sleep(self.backoff_base * (2**attempt) * (1.0 + random.random()))
        raise RuntimeError(f"scorer request failed after {self.retries} attempts: {last_exc}")


def save_scorer(scorer: LogisticScorer, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump({"weights": scorer.weights.tolist(), "bias": scorer.bias}, fh)
        fh.write("\n")


def load_scorer(path: str | Path) -> LogisticScorer:
    with Path(path).open("r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return LogisticScorer(weights=np.asarray(obj["weights"], dtype=np.float64), bias=float(obj["bias"]))
