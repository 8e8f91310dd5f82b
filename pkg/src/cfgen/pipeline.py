"""End-to-end orchestration: config, stage functions, and provenance.

Stages mirror the generation flow (retrieve -> extract keywords -> edit
-> evaluate) and communicate only through files in the configured work
directory, so every command is re-runnable and idempotent for fixed
inputs and seed. Each artifact carries a provenance block naming the
config hash and the hashes of its direct inputs; provenance never
includes timestamps, keeping reruns byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data, editor, embed, index, metrics, rerank, report, retriever, textops

logger = logging.getLogger(__name__)


class MissingArtifactError(RuntimeError):
    """An upstream stage has not produced its output yet."""


@dataclass
class PipelineConfig:
    task: str
    workdir: str
    examples_path: str
    corpus_paths: list[str]
    seed_pairs_path: str
    paraphrases_path: Optional[str] = None
    embedding: embed.EmbeddingBackendConfig = field(default_factory=embed.EmbeddingBackendConfig)
    index_kind: str = "ivf"
    index_params: index.IvfParams = field(default_factory=index.IvfParams)
    train: retriever.TrainConfig = field(default_factory=retriever.TrainConfig)
    top_k: int = 5
    annotation_top_k: int = 3
    rerank_enabled: Optional[bool] = None  # None = task default (nli on, sentiment off)
    edit_backend: str = "mock"  # "mock" | "remote"
    edit_endpoint: Optional[str] = None
    edit_auth_env_var: Optional[str] = None
    edit_params: editor.EditParams = field(default_factory=editor.EditParams)
    edit_max_in_flight: int = 2
    edit_requests_per_minute: Optional[int] = 60
    subset_ids: Optional[list[str]] = None
    min_polarity_hits: int = 1
    max_polarity_sentences: int = 4
    max_keywords: int = 12
    seed: int = 0
    records_name: str = "counterfactuals.jsonl"

    def __post_init__(self) -> None:
        data.labels_for_task(self.task)
        if self.top_k < 1 or self.annotation_top_k < 1:
            raise ValueError("top_k values must be >= 1")
        if self.index_kind not in ("exact", "ivf"):
            raise ValueError(f"unknown index kind {self.index_kind!r}")
        if self.edit_backend not in ("mock", "remote"):
            raise ValueError(f"unknown edit backend {self.edit_backend!r}")
        if self.edit_backend == "remote" and not self.edit_endpoint:
            raise ValueError("remote edit backend requires edit_endpoint")

    @property
    def use_reranker(self) -> bool:
        if self.rerank_enabled is not None:
            return self.rerank_enabled
        return self.task == "nli"

    # --- artifact paths -------------------------------------------------
    def path(self, name: str) -> Path:
        return Path(self.workdir) / name

    @property
    def examples_norm(self) -> Path:
        return self.path("examples.jsonl")

    @property
    def corpus_norm(self) -> Path:
        return self.path("corpus.jsonl")

    @property
    def cache_path(self) -> Path:
        return self.path("embeddings.bin")

    @property
    def query_encoder_path(self) -> Path:
        return self.path("query_encoder.bin")

    @property
    def doc_encoder_path(self) -> Path:
        return self.path("document_encoder.bin")

    @property
    def train_log_path(self) -> Path:
        return self.path("train_log.jsonl")

    @property
    def index_path(self) -> Path:
        return self.path("index.cfix")

    @property
    def reranker_path(self) -> Path:
        return self.path("reranker.json")

    @property
    def records_path(self) -> Path:
        return self.path(self.records_name)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "workdir": self.workdir,
            "examples_path": self.examples_path,
            "corpus_paths": list(self.corpus_paths),
            "seed_pairs_path": self.seed_pairs_path,
            "paraphrases_path": self.paraphrases_path,
            "embedding": {
                "kind": self.embedding.kind,
                "dimension": self.embedding.dimension,
                "batch_size": self.embedding.batch_size,
                "endpoint": self.embedding.endpoint,
                "auth_env_var": self.embedding.auth_env_var,
                "seed": self.embedding.seed,
                "normalize": self.embedding.normalize,
                "max_in_flight": self.embedding.max_in_flight,
            },
            "index_kind": self.index_kind,
            "index_params": {
                "k_centroids": self.index_params.k_centroids,
                "n_probe": self.index_params.n_probe,
                "kmeans_max_iters": self.index_params.kmeans_max_iters,
                "kmeans_seed": self.index_params.kmeans_seed,
            },
            "train": {
                "learning_rate": self.train.learning_rate,
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "seed": self.train.seed,
                "in_batch_negatives": self.train.in_batch_negatives,
                "grad_clip": self.train.grad_clip,
                "eval_every": self.train.eval_every,
                "projection_dim": self.train.projection_dim,
            },
            "top_k": self.top_k,
            "annotation_top_k": self.annotation_top_k,
            "rerank_enabled": self.rerank_enabled,
            "edit_backend": self.edit_backend,
            "edit_endpoint": self.edit_endpoint,
            "edit_auth_env_var": self.edit_auth_env_var,
            "edit_params": {
                "temperature": self.edit_params.temperature,
                "top_p": self.edit_params.top_p,
                "max_tokens": self.edit_params.max_tokens,
                "stop_sequences": list(self.edit_params.stop_sequences),
            },
            "edit_max_in_flight": self.edit_max_in_flight,
            "edit_requests_per_minute": self.edit_requests_per_minute,
            "subset_ids": self.subset_ids,
            "min_polarity_hits": self.min_polarity_hits,
            "max_polarity_sentences": self.max_polarity_sentences,
            "max_keywords": self.max_keywords,
            "seed": self.seed,
            "records_name": self.records_name,
        }

    def config_hash(self) -> str:
        """Hash of the semantic config: concurrency limits are operational
        knobs that cannot change outputs, so they are excluded."""
        body = self.to_dict()
        body.pop("edit_max_in_flight", None)
        body.pop("edit_requests_per_minute", None)
        body["embedding"].pop("max_in_flight", None)
        canonical = json.dumps(body, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        emb = obj.get("embedding", {})
        idx = obj.get("index_params", {})
        trn = obj.get("train", {})
        edp = obj.get("edit_params", {})
        return cls(
            task=obj["task"],
            workdir=obj["workdir"],
            examples_path=obj["examples_path"],
            corpus_paths=list(obj["corpus_paths"]),
            seed_pairs_path=obj["seed_pairs_path"],
            paraphrases_path=obj.get("paraphrases_path"),
            embedding=embed.EmbeddingBackendConfig(
                kind=emb.get("kind", "hashed_test"),
                dimension=emb.get("dimension", 256),
                batch_size=emb.get("batch_size", 64),
                endpoint=emb.get("endpoint"),
                auth_env_var=emb.get("auth_env_var"),
                seed=emb.get("seed", 0),
                normalize=emb.get("normalize", True),
                max_in_flight=emb.get("max_in_flight", 4),
            ),
            index_kind=obj.get("index_kind", "ivf"),
            index_params=index.IvfParams(
                k_centroids=idx.get("k_centroids", 300),
                n_probe=idx.get("n_probe", 30),
                kmeans_max_iters=idx.get("kmeans_max_iters", 25),
                kmeans_seed=idx.get("kmeans_seed", 0),
            ),
            train=retriever.TrainConfig(
                learning_rate=trn.get("learning_rate", 1e-3),
                epochs=trn.get("epochs", 40),
                batch_size=trn.get("batch_size", 32),
                seed=trn.get("seed", 0),
                in_batch_negatives=trn.get("in_batch_negatives", True),
                grad_clip=trn.get("grad_clip", 2.0),
                eval_every=trn.get("eval_every", 10),
                projection_dim=trn.get("projection_dim", 64),
            ),
            top_k=obj.get("top_k", 5),
            annotation_top_k=obj.get("annotation_top_k", 3),
            rerank_enabled=obj.get("rerank_enabled"),
            edit_backend=obj.get("edit_backend", "mock"),
            edit_endpoint=obj.get("edit_endpoint"),
            edit_auth_env_var=obj.get("edit_auth_env_var"),
            edit_params=editor.EditParams(
                temperature=edp.get("temperature", 0.7),
                top_p=edp.get("top_p", 1.0),
                max_tokens=edp.get("max_tokens", 256),
                stop_sequences=list(edp.get("stop_sequences", [])),
            ),
            edit_max_in_flight=obj.get("edit_max_in_flight", 2),
            edit_requests_per_minute=obj.get("edit_requests_per_minute", 60),
            subset_ids=obj.get("subset_ids"),
            min_polarity_hits=obj.get("min_polarity_hits", 1),
            max_polarity_sentences=obj.get("max_polarity_sentences", 4),
            max_keywords=obj.get("max_keywords", 12),
            seed=obj.get("seed", 0),
            records_name=obj.get("records_name", "counterfactuals.jsonl"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with Path(path).open("r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def provenance(cfg: PipelineConfig, stage: str, inputs: Sequence[Path]) -> dict:
    return {
        "stage": stage,
        "config_hash": cfg.config_hash(),
        "inputs": {str(p.name): file_sha256(p) for p in inputs if Path(p).exists()},
    }


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `cfgen {produced_by}` first")
    return path


# --------------------------------------------------------------------------
# stages


def run_ingest(cfg: PipelineConfig) -> tuple[int, int]:
    """Validate the input files and write normalized copies into the workdir."""
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    examples = data.load_examples(cfg.examples_path, cfg.task)
    docs: list[data.CorpusDocument] = []
    seen: set[str] = set()
    for path in cfg.corpus_paths:
        for doc in data.load_corpus(path):
            if doc.doc_id in seen:
                raise data.DatasetError(f"duplicate doc_id {doc.doc_id!r} across corpus files")
            seen.add(doc.doc_id)
            docs.append(doc)
    # seed data is validated here too so problems surface before training
    pairs = data.load_seed_pairs(cfg.seed_pairs_path)
    if cfg.paraphrases_path:
        data.load_paraphrases(cfg.paraphrases_path)
    prov_inputs = [Path(cfg.examples_path)] + [Path(p) for p in cfg.corpus_paths]
    data.write_examples(examples, cfg.examples_norm, provenance(cfg, "ingest", prov_inputs))
    data.write_corpus(docs, cfg.corpus_norm, provenance(cfg, "ingest", prov_inputs))
    logger.info("ingest: %d examples, %d corpus documents, %d seed pairs", len(examples), len(docs), len(pairs))
    return len(examples), len(docs)


def _query_texts_for_example(cfg: PipelineConfig, ex: data.LabeledExample, lexicon) -> list[str]:
    """Retrieval queries for one example: polarity sentences for reviews,
    the [SEP]-joined pair for nli. May be empty for sentiment."""
    if cfg.task == "nli":
        return [data.build_query_text(ex)]
    return textops.select_polarity_sentences(
        ex.text_a, lexicon, min_hits=cfg.min_polarity_hits, max_sentences=cfg.max_polarity_sentences
    )


def _all_pipeline_texts(cfg: PipelineConfig, examples, docs, pairs, paraphrases) -> list[str]:
    lexicon = textops.default_lexicon()
    texts: list[str] = []
    for ex in examples:
        texts.extend(_query_texts_for_example(cfg, ex, lexicon))
    texts.extend(doc.text for doc in docs)
    for q, p in pairs:
        texts.extend([q, p])
    texts.extend(paraphrases.values())
    # deduplicate, preserving order
    return list(dict.fromkeys(t for t in texts if t.strip()))


def run_embed(cfg: PipelineConfig) -> int:
    """Compute and cache base embeddings for every text the pipeline needs."""
    _require(cfg.examples_norm, "ingest")
    _require(cfg.corpus_norm, "ingest")
    examples = data.load_examples(cfg.examples_norm, cfg.task)
    docs = data.load_corpus(cfg.corpus_norm)
    pairs = data.load_seed_pairs(cfg.seed_pairs_path)
    paraphrases = data.load_paraphrases(cfg.paraphrases_path) if cfg.paraphrases_path else {}
    texts = _all_pipeline_texts(cfg, examples, docs, pairs, paraphrases)
    if cfg.cache_path.exists():
        store = embed.EmbeddingStore.load(cfg.cache_path)
        if store.backend_id != cfg.embedding.backend_id:
            logger.warning("embedding backend changed; rebuilding cache")
            store = embed.EmbeddingStore(dimension=cfg.embedding.dimension, backend_id=cfg.embedding.backend_id)
    else:
        store = embed.EmbeddingStore(dimension=cfg.embedding.dimension, backend_id=cfg.embedding.backend_id)
    embed.ensure_embeddings(texts, cfg.embedding, store)
    store.save(cfg.cache_path)
    logger.info("embed: %d cached vectors (%d texts requested)", len(store), len(texts))
    return len(store)


def _load_store(cfg: PipelineConfig) -> embed.EmbeddingStore:
    _require(cfg.cache_path, "embed")
    return embed.EmbeddingStore.load(cfg.cache_path)


def run_train_retriever(cfg: PipelineConfig) -> list[dict]:
    """Build triplets from the seed data and train both projections."""
    store = _load_store(cfg)
    pairs = data.load_seed_pairs(cfg.seed_pairs_path)
    paraphrases = data.load_paraphrases(cfg.paraphrases_path) if cfg.paraphrases_path else {}
    triplets = data.build_triplets(pairs, paraphrases)
    if not triplets:
        raise data.DatasetError("no usable seed triplets")
    docs = data.load_corpus(_require(cfg.corpus_norm, "ingest"))
    corpus_texts = [d.text for d in docs]
    eval_pools = None
    needed = 61  # positive + 30 + 30
    if len(corpus_texts) > needed and len(triplets) >= 10:
        # hold out the last tenth (at least 5) of the seeded shuffle for eval
        rng = np.random.default_rng(cfg.seed)
        order = rng.permutation(len(triplets))
        n_eval = max(5, len(triplets) // 10)
        eval_idx = set(order[-n_eval:].tolist())
        eval_pairs = [(triplets[i].query, triplets[i].positive) for i in sorted(eval_idx)]
        triplets = [t for i, t in enumerate(triplets) if i not in eval_idx]
        try:
            eval_pools = retriever.build_eval_pools(eval_pairs, corpus_texts, store, seed=cfg.seed)
        except (KeyError, ValueError) as exc:
            logger.warning("skipping train-time eval pools: %s", exc)
            eval_pools = None
    q_enc, d_enc, log = retriever.train(triplets, store, cfg.train, eval_pools=eval_pools)
    meta = provenance(cfg, "train-retriever", [cfg.cache_path, Path(cfg.seed_pairs_path)])
    retriever.save_encoder(q_enc, cfg.query_encoder_path, meta)
    retriever.save_encoder(d_enc, cfg.doc_encoder_path, meta)
    retriever.write_training_log(log, cfg.train_log_path)
    logger.info("train-retriever: %d epochs, final loss %.4f", len(log), log[-1]["mean_loss"])
    return log


def run_build_index(cfg: PipelineConfig) -> index.VectorIndex:
    """Embed the corpus with the document projection and index it."""
    store = _load_store(cfg)
    d_enc = retriever.load_encoder(_require(cfg.doc_encoder_path, "train-retriever"))
    docs = data.load_corpus(_require(cfg.corpus_norm, "ingest"))
    base = store.matrix_for([d.text for d in docs])
    projected = d_enc.project(base)
    if cfg.index_kind == "exact":
        idx = index.build_exact(docs, projected)
    else:
        params = cfg.index_params
        if params.k_centroids > len(docs):
            raise index.IndexError_(
                f"k_centroids={params.k_centroids} exceeds corpus size {len(docs)}; lower index_params.k_centroids"
            )
        idx = index.build_ivf(docs, projected, params)
    index.save_index(idx, cfg.index_path, provenance(cfg, "build-index", [cfg.cache_path, cfg.doc_encoder_path]))
    logger.info("build-index: %s index over %d documents", idx.kind, len(idx.doc_ids))
    return idx


def run_train_reranker(cfg: PipelineConfig) -> rerank.LogisticScorer:
    """Train the logistic pair scorer on the seed data (positive vs. paraphrase)."""
    store = _load_store(cfg)
    pairs = data.load_seed_pairs(cfg.seed_pairs_path)
    paraphrases = data.load_paraphrases(cfg.paraphrases_path) if cfg.paraphrases_path else {}
    training: list[tuple[rerank.PairFeatures, int]] = []
    for q, p in pairs:
        if p == q:
            continue
        neg = paraphrases.get(q, q)
        try:
            q_vec = store.get(q)
            training.append((rerank.features(q, p, q_vec, store.get(p)), 1))
            training.append((rerank.features(q, neg, q_vec, store.get(neg)), 0))
        except KeyError as exc:
            raise MissingArtifactError(f"{exc}; run `cfgen embed` first") from exc
    scorer = rerank.train_bce(training, seed=cfg.seed)
    rerank.save_scorer(scorer, cfg.reranker_path)
    logger.info("train-reranker: %d training pairs", len(training))
    return scorer


@dataclass
class RetrievalResult:
    doc_id: str
    text: str
    score: float


def _retrieval_context(cfg: PipelineConfig):
    store = _load_store(cfg)
    q_enc = retriever.load_encoder(_require(cfg.query_encoder_path, "train-retriever"))
    idx = index.load_index(_require(cfg.index_path, "build-index"))
    docs = data.load_corpus(_require(cfg.corpus_norm, "ingest"))
    texts_by_id = {d.doc_id: d.text for d in docs}
    scorer = None
    if cfg.use_reranker:
        scorer = rerank.load_scorer(_require(cfg.reranker_path, "train-reranker"))
    return store, q_enc, idx, texts_by_id, scorer


def _retrieve_for_query(
    cfg: PipelineConfig,
    query: str,
    store: embed.EmbeddingStore,
    q_enc: retriever.ProjectionEncoder,
    idx: index.VectorIndex,
    texts_by_id: dict[str, str],
    scorer: Optional[rerank.LogisticScorer],
    k: int,
) -> list[RetrievalResult]:
    base = embed.ensure_embeddings([query], cfg.embedding, store)[0]
    projected = q_enc.project(base)
    hits = index.search(idx, projected, k)
    results = [RetrievalResult(doc_id=i, text=texts_by_id[i], score=s) for i, s in hits]
    if scorer is not None and len(results) > 1:
        doc_vecs = store.matrix_for([r.text for r in results])
        reranked = rerank.rerank(
            [(r, r.score) for r in results],
            scorer,
            query,
            base,
            [r.text for r in results],
            doc_vecs,
        )
        results = [item for item, _prob in reranked]
    return results


def run_retrieve(cfg: PipelineConfig, out_path: Optional[Path] = None, as_records: bool = False) -> Path:
    """Write per-example retrievals (or retrieval-only counterfactual records)."""
    store, q_enc, idx, texts_by_id, scorer = _retrieval_context(cfg)
    examples = data.load_examples(_require(cfg.examples_norm, "ingest"), cfg.task)
    examples = _apply_subset(cfg, examples)
    lexicon = textops.default_lexicon()
    out_path = out_path or cfg.path("retrievals.jsonl" if not as_records else "retrieved_only.jsonl")
    prov = provenance(cfg, "retrieve", [cfg.index_path, cfg.query_encoder_path, cfg.examples_norm])
    if as_records:
        records = []
        for ex in examples:
            queries = _query_texts_for_example(cfg, ex, lexicon)
            if not queries:
                continue
            tops = [
                _retrieve_for_query(cfg, q, store, q_enc, idx, texts_by_id, scorer, 1) for q in queries
            ]
            hits = [t[0] for t in tops if t]
            if not hits:
                continue
            seen_ids: set[str] = set()
            ordered = [h for h in hits if not (h.doc_id in seen_ids or seen_ids.add(h.doc_id))]
            records.append(
                data.CounterfactualRecord(
                    source_id=ex.id,
                    original_text=ex.text_b if cfg.task == "nli" else ex.text_a,
                    edited_text=" ".join(h.text for h in ordered),
                    original_label=ex.label,
                    target_label=data.flip_label(cfg.task, ex.label),
                    keywords=[],
                    retrieved_doc_ids=[h.doc_id for h in ordered],
                    stage="retrieved_only",
                )
            )
        data.write_records(records, out_path, prov)
        return out_path
    with out_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_provenance": prov}, ensure_ascii=False) + "\n")
        for ex in examples:
            queries = _query_texts_for_example(cfg, ex, lexicon)
            entry = {"id": ex.id, "queries": []}
            for q in queries:
                results = _retrieve_for_query(cfg, q, store, q_enc, idx, texts_by_id, scorer, cfg.top_k)
                entry["queries"].append(
                    {"query": q, "results": [{"doc_id": r.doc_id, "score": r.score, "text": r.text} for r in results]}
                )
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return out_path


def _apply_subset(cfg: PipelineConfig, examples: list[data.LabeledExample]) -> list[data.LabeledExample]:
    if cfg.subset_ids is None:
        return examples
    wanted = set(cfg.subset_ids)
    missing = wanted - {ex.id for ex in examples}
    if missing:
        raise data.DatasetError(f"subset ids not in dataset: {sorted(missing)[:5]}")
    return [ex for ex in examples if ex.id in wanted]


def _make_edit_backend(cfg: PipelineConfig, template: editor.PromptTemplate) -> editor.EditorBackend:
    if cfg.edit_backend == "mock":
        return editor.MockEditorBackend(template)
    return editor.RemoteEditorBackend(
        endpoint=cfg.edit_endpoint,
        auth_env_var=cfg.edit_auth_env_var,
        requests_per_minute=cfg.edit_requests_per_minute,
    )


def run_generate(cfg: PipelineConfig, out_path: Optional[Path] = None) -> Path:
    """The full path: retrieve, extract keywords, prompt, edit, record.

    Every input yields exactly one record; edit failures (identical
    output, empty completion, exhausted backend retries) are recorded
    with a ``failure`` reason instead of aborting the run. Records are
    flushed in input order as completions arrive, so interruption loses
    at most the in-flight window and output bytes do not depend on the
    concurrency level.
    """
    store, q_enc, idx, texts_by_id, scorer = _retrieval_context(cfg)
    examples = data.load_examples(_require(cfg.examples_norm, "ingest"), cfg.task)
    examples = _apply_subset(cfg, examples)
    lexicon = textops.default_lexicon()
    stops = textops.StopLists()
    template = editor.default_template(cfg.task, keywords=True)
    fallback_template = editor.default_template(cfg.task, keywords=False)
    backend = _make_edit_backend(cfg, template)
    fallback_backend = _make_edit_backend(cfg, fallback_template)
    out_path = out_path or cfg.records_path
    prov = provenance(
        cfg, "generate", [cfg.index_path, cfg.query_encoder_path, cfg.examples_norm, cfg.cache_path]
    )

    def prepare(ex: data.LabeledExample) -> dict:
        queries = _query_texts_for_example(cfg, ex, lexicon)
        retrieved: list[RetrievalResult] = []
        for q in queries:
            retrieved.extend(
                _retrieve_for_query(cfg, q, store, q_enc, idx, texts_by_id, scorer, cfg.top_k)
            )
        seen_ids: set[str] = set()
        ordered = [r for r in retrieved if not (r.doc_id in seen_ids or seen_ids.add(r.doc_id))]
        keywords: list[str] = []
        if ordered:
            keywords = textops.extract_keywords(
                [r.text for r in ordered], stops, max_keywords=cfg.max_keywords
            )
        target = data.flip_label(cfg.task, ex.label)
        use_fallback = not keywords
        tpl = fallback_template if use_fallback else template
        prompt = editor.build_prompt(tpl, ex, keywords, target)
        return {
            "example": ex,
            "template": tpl,
            "backend": fallback_backend if use_fallback else backend,
            "prompt": prompt,
            "keywords": keywords,
            "retrieved_ids": [r.doc_id for r in ordered],
            "target": target,
            "stage": "gpt_only" if use_fallback else "core",
        }

    def edit(task: dict) -> data.CounterfactualRecord:
        ex = task["example"]
        original = editor.editable_text(task["template"], ex)
        edited, failure = "", None
        try:
            raw = editor.request_edit(task["prompt"], cfg.edit_params, task["backend"])
            edited = editor.parse_edit(raw, task["template"], original)
        except editor.FailedEditError as exc:
            edited, failure = original, f"failed_edit: {exc}"
        except editor.EditError as exc:
            failure = f"backend_error: {exc}"
        rec = data.CounterfactualRecord(
            source_id=ex.id,
            original_text=original,
            edited_text=edited,
            original_label=ex.label,
            target_label=task["target"],
            keywords=task["keywords"],
            retrieved_doc_ids=task["retrieved_ids"],
            stage=task["stage"],
            failure=failure,
        )
        if failure is None:
            rec.metrics = {
                "self_bleu": metrics.self_bleu(original, edited),
                "levenshtein": metrics.norm_levenshtein(original, edited),
                "perturbation_type": metrics.classify_perturbation(original, edited).value,
            }
        return rec

    failures = 0
    written = 0
    with out_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_provenance": prov}, ensure_ascii=False) + "\n")
        with ThreadPoolExecutor(max_workers=max(1, cfg.edit_max_in_flight)) as pool:
            window: deque = deque()
            ex_iter = iter(examples)

            def submit_next() -> bool:
                ex = next(ex_iter, None)
                if ex is None:
                    return False
                task = prepare(ex)
                window.append(pool.submit(edit, task))
                return True

            for _ in range(max(1, cfg.edit_max_in_flight)):
                if not submit_next():
                    break
            while window:
                rec = window.popleft().result()
                if rec.failure:
                    failures += 1
                fh.write(data.record_to_line(rec) + "\n")
                fh.flush()
                written += 1
                submit_next()
    logger.info("generate: %d records written, %d failures", written, failures)
    if written and failures == written:
        raise editor.EditError(f"all {written} edit requests failed; editor backend looks unreachable")
    return out_path


def run_evaluate(
    cfg: PipelineConfig,
    records_path: Optional[Path] = None,
    outdir: Optional[Path] = None,
    designated_class: Optional[str] = None,
    figures: bool = True,
) -> metrics.MetricsReport:
    """Aggregate the intrinsic metric suite over a records file and render it."""
    records_path = records_path or cfg.records_path
    _require(Path(records_path), "generate")
    records = data.load_records(records_path)
    usable = [r for r in records if r.edited_text.strip()]
    if not usable:
        raise data.DatasetError("no usable records (all have empty edited_text)")
    corpus = metrics.PairedCorpus(
        pairs=[
            metrics.PairedExample(
                id=f"{r.source_id}#{i}",
                original_text=r.original_text,
                edited_text=r.edited_text,
                original_label=r.original_label,
                new_label=r.target_label,
                stage=r.stage,
            )
            for i, r in enumerate(usable)
        ]
    )
    rep = metrics.aggregate_report(corpus, designated_class=designated_class)
    outdir = outdir or cfg.path("report")
    outdir.mkdir(parents=True, exist_ok=True)
    prov = provenance(cfg, "evaluate", [Path(records_path)])
    prov["n_records"] = len(records)
    prov["n_failed"] = sum(1 for r in records if r.failure)
    report.write_report_json(rep, outdir / "report.json", prov)
    report.write_report_text(rep, outdir / "report.txt")
    report.write_token_bias_csv(rep, outdir / "token_bias.csv")
    if figures:
        report.render_figures(rep, outdir)
    logger.info(
        "evaluate: self-BLEU %.4f, Levenshtein %.4f over %d pairs",
        rep.mean_self_bleu,
        rep.mean_levenshtein,
        len(corpus.pairs),
    )
    return rep
