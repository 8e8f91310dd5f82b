"""Command-line interface for the counterfactual generation pipeline.

Stage commands consume/produce files under the config's workdir and are
idempotent for fixed inputs and seed:

    cfgen make-fixture --out demo --task sentiment
    cfgen ingest -c demo/config.json
    cfgen embed -c demo/config.json
    cfgen train-retriever -c demo/config.json
    cfgen build-index -c demo/config.json
    cfgen generate -c demo/config.json
    cfgen evaluate -c demo/config.json
    cfgen serve-annotate -c demo/config.json --port 8000
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Optional

import click

from . import data, fixtures, pipeline, textops


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _load_config(config_path: str, seed: Optional[int], subset: Optional[str]) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.load(config_path)
    if seed is not None:
        cfg.seed = seed
        cfg.train.seed = seed
        cfg.index_params.kmeans_seed = seed
        cfg.embedding.seed = seed
    if subset is not None:
        cfg.subset_ids = [s for s in Path(subset).read_text(encoding="utf-8").split() if s]
    return cfg


config_opt = click.option("--config", "-c", "config_path", required=True, type=click.Path(exists=True))
seed_opt = click.option("--seed", type=int, default=None, help="Override every stage seed.")
subset_opt = click.option("--subset", type=click.Path(exists=True), default=None,
                          help="File of whitespace-separated example ids to restrict to.")
verbose_opt = click.option("--verbose", "-v", is_flag=True, default=False)


@click.group()
def main() -> None:
    """Counterfactual generation: retrieve, edit, evaluate, annotate."""


@main.command("make-fixture")
@click.option("--out", required=True, type=click.Path())
@click.option("--task", type=click.Choice(data.TASKS), default="sentiment")
@click.option("--n", type=int, default=50)
@click.option("--seed", type=int, default=7)
@verbose_opt
def make_fixture(out: str, task: str, n: int, seed: int, verbose: bool) -> None:
    """Write a small synthetic dataset plus a ready-to-run config."""
    _setup_logging(verbose)
    config_path = fixtures.write_fixture(out, task=task, n=n, seed=seed)
    click.echo(f"fixture written; config at {config_path}")


@main.command()
@config_opt
@seed_opt
@verbose_opt
def ingest(config_path: str, seed: Optional[int], verbose: bool) -> None:
    """Validate inputs and write normalized copies into the workdir."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    n_ex, n_docs = pipeline.run_ingest(cfg)
    click.echo(f"ingested {n_ex} examples and {n_docs} corpus documents")


@main.command()
@config_opt
@seed_opt
@verbose_opt
def embed(config_path: str, seed: Optional[int], verbose: bool) -> None:
    """Compute and cache base embeddings for all pipeline texts."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    n = pipeline.run_embed(cfg)
    click.echo(f"embedding cache holds {n} vectors at {cfg.cache_path}")


@main.command("train-retriever")
@config_opt
@seed_opt
@verbose_opt
def train_retriever(config_path: str, seed: Optional[int], verbose: bool) -> None:
    """Train the query/document projections on the seed triplets."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    log = pipeline.run_train_retriever(cfg)
    last = log[-1]
    extra = f", eval top-1 {last['eval_top1']:.3f}" if "eval_top1" in last else ""
    click.echo(f"trained {len(log)} epochs, final loss {last['mean_loss']:.4f}{extra}")


@main.command("build-index")
@config_opt
@seed_opt
@verbose_opt
def build_index(config_path: str, seed: Optional[int], verbose: bool) -> None:
    """Embed the corpus with the document encoder and build the search index."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    idx = pipeline.run_build_index(cfg)
    click.echo(f"built {idx.kind} index over {len(idx.doc_ids)} documents at {cfg.index_path}")


@main.command("train-reranker")
@config_opt
@seed_opt
@verbose_opt
def train_reranker(config_path: str, seed: Optional[int], verbose: bool) -> None:
    """Train the logistic pair scorer used to reorder retrievals."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    pipeline.run_train_reranker(cfg)
    click.echo(f"reranker saved to {cfg.reranker_path}")


@main.command()
@config_opt
@seed_opt
@subset_opt
@click.option("--out", type=click.Path(), default=None, help="Output path override.")
@click.option("--records", is_flag=True, default=False,
              help="Emit retrieval-only counterfactual records instead of raw retrievals.")
@verbose_opt
def retrieve(config_path: str, seed: Optional[int], subset: Optional[str], out: Optional[str],
             records: bool, verbose: bool) -> None:
    """Run retrieval for every example and write the results."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, subset)
    path = pipeline.run_retrieve(cfg, out_path=Path(out) if out else None, as_records=records)
    click.echo(f"retrievals written to {path}")


@main.command()
@config_opt
@seed_opt
@subset_opt
@click.option("--out", type=click.Path(), default=None, help="Records output path override.")
@verbose_opt
def generate(config_path: str, seed: Optional[int], subset: Optional[str], out: Optional[str],
             verbose: bool) -> None:
    """Retrieve, extract keywords, prompt the editor, and record counterfactuals."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, subset)
    path = pipeline.run_generate(cfg, out_path=Path(out) if out else None)
    records = data.load_records(path)
    failed = sum(1 for r in records if r.failure)
    click.echo(f"{len(records)} records written to {path} ({failed} failed edits)")


@main.command()
@config_opt
@seed_opt
@click.option("--records", "records_path", type=click.Path(exists=True), default=None,
              help="Records file to evaluate (default: the generate output).")
@click.option("--out", type=click.Path(), default=None, help="Report directory override.")
@click.option("--designated-class", default=None, help="Class for the token-bias test.")
@click.option("--no-figures", is_flag=True, default=False)
@verbose_opt
def evaluate(config_path: str, seed: Optional[int], records_path: Optional[str], out: Optional[str],
             designated_class: Optional[str], no_figures: bool, verbose: bool) -> None:
    """Aggregate the intrinsic metric suite and render report + figures."""
    _setup_logging(verbose)
    cfg = _load_config(config_path, seed, None)
    rep = pipeline.run_evaluate(
        cfg,
        records_path=Path(records_path) if records_path else None,
        outdir=Path(out) if out else None,
        designated_class=designated_class,
        figures=not no_figures,
    )
    click.echo(
        f"mean self-BLEU {rep.mean_self_bleu:.4f}, mean Levenshtein {rep.mean_levenshtein:.4f}; "
        f"report in {out or cfg.path('report')}"
    )


@main.command("serve-annotate")
@config_opt
@seed_opt
@click.option("--port", type=int, default=8000)
@click.option("--host", default="127.0.0.1")
@click.option("--ui-dir", type=click.Path(), default=None, help="Built UI bundle to serve at /.")
@click.option("--journal", type=click.Path(), default=None, help="Submissions journal path override.")
@verbose_opt
def serve_annotate(config_path: str, seed: Optional[int], port: int, host: str,
                   ui_dir: Optional[str], journal: Optional[str], verbose: bool) -> None:
    """Serve the annotation API (and UI bundle) for the two-condition study."""
    _setup_logging(verbose)
    import uvicorn

    cfg = _load_config(config_path, seed, None)
    app = build_annotation_app(cfg, ui_dir=ui_dir, journal=journal)
    uvicorn.run(app, host=host, port=port, log_level="info")


def build_annotation_app(cfg: pipeline.PipelineConfig, ui_dir: Optional[str] = None,
                         journal: Optional[str] = None):
    """Assemble the annotation service from pipeline artifacts."""
    from . import server

    store, q_enc, idx, texts_by_id, scorer = pipeline._retrieval_context(cfg)
    examples = data.load_examples(pipeline._require(cfg.examples_norm, "ingest"), cfg.task)
    examples = pipeline._apply_subset(cfg, examples)
    lexicon = textops.default_lexicon()

    def retrieve_excerpts(ex: data.LabeledExample, k: int) -> list[dict]:
        queries = pipeline._query_texts_for_example(cfg, ex, lexicon)
        out, seen = [], set()
        for q in queries:
            for r in pipeline._retrieve_for_query(cfg, q, store, q_enc, idx, texts_by_id, scorer, k):
                if r.doc_id not in seen:
                    seen.add(r.doc_id)
                    out.append({"doc_id": r.doc_id, "text": r.text})
        return out[:k]

    tasks = server.build_task_pool(examples, retrieve_excerpts, top_k=cfg.annotation_top_k)
    journal_path = Path(journal) if journal else cfg.path("submissions.jsonl")
    return server.create_app(tasks, journal_path, ui_dir=ui_dir)


if __name__ == "__main__":
    main()
