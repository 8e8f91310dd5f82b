"""Deterministic synthetic fixtures for demos and end-to-end tests.

The generated datasets are small but exercise every pipeline stage:
reviews contain opinion-lexicon words so sentence selection fires, the
corpus contains counter-sentiment/contradicting excerpts so retrieval
and keyword extraction produce non-empty output, and seed pairs plus
paraphrases give the retriever trainable triplets with the standard
two-hard-negative layout.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import data, embed, index, retriever
from .pipeline import PipelineConfig

_TOPICS = ["plot", "acting", "pacing", "soundtrack", "dialogue", "ending", "effects", "characters"]
_POS = ["wonderful", "great", "delightful", "superb", "charming", "clever", "gripping", "memorable"]
_NEG = ["terrible", "boring", "awful", "clumsy", "tedious", "shallow", "predictable", "lifeless"]

_NOUNS = ["teacher", "driver", "nurse", "pilot", "farmer", "singer", "lawyer", "painter"]
_VERBS = [("fixed", "fixes"), ("carried", "carries"), ("painted", "paints"), ("opened", "opens")]
_OBJECTS = ["door", "wagon", "fence", "letter", "ladder", "basket", "engine", "mirror"]
_PLACES = ["market", "harbor", "station", "garden"]


def _shuffle_words(text: str, rng: np.random.Generator) -> str:
    words = text.split()
    order = rng.permutation(len(words))
    shuffled = [words[i] for i in order]
    if shuffled == words and len(words) > 1:
        shuffled = shuffled[::-1]
    return " ".join(shuffled)


def make_sentiment_fixture(n: int = 50, seed: int = 7):
    """Reviews with opinion sentences plus a counter-sentiment corpus."""
    rng = np.random.default_rng(seed)
    examples, docs, pairs, paraphrases = [], [], [], {}
    for i in range(n):
        label = "Positive" if i % 2 == 0 else "Negative"
        own = _POS if label == "Positive" else _NEG
        other = _NEG if label == "Positive" else _POS
        t1, t2 = _TOPICS[i % len(_TOPICS)], _TOPICS[(3 * i + 5) % len(_TOPICS)]
        w1, w2, w3 = own[(5 * i + 1) % len(own)], own[(3 * i) % len(own)], own[(7 * i + 2) % len(own)]
        o1, o2 = other[(5 * i + 1) % len(other)], other[(3 * i + 4) % len(other)]
        neutral = f"I saw screening number {i} at the {_PLACES[i % len(_PLACES)]} hall."
        opinion = f"The {t1} was {w1} and the {t2} felt {w2} in scene {i}."
        closing = f"Overall a {w3} experience for viewer {i}."
        review = f"{neutral} {opinion} {closing}"
        examples.append(data.LabeledExample(id=f"s{i:03d}", task="sentiment", text_a=review, label=label))
        counter = f"The {t1} was {o1} and the {t2} seemed {o2} in scene {i}."
        counter2 = f"Honestly the {t2} looked {o2} in take {i}."
        docs.append(data.CorpusDocument(doc_id=f"c{i:03d}a", text=counter, source="fixture"))
        docs.append(data.CorpusDocument(doc_id=f"c{i:03d}b", text=counter2, source="fixture"))
        pairs.append((opinion, counter))
        paraphrases[opinion] = _shuffle_words(opinion, rng)
    for j in range(20):
        docs.append(
            data.CorpusDocument(
                doc_id=f"f{j:03d}",
                text=f"The screening started at {j} past eight in room {j % 5}.",
                source="fixture",
            )
        )
    return examples, docs, pairs, paraphrases


def make_nli_fixture(n: int = 50, seed: int = 7):
    """Premise/hypothesis pairs restricted to the two-way label space."""
    rng = np.random.default_rng(seed)
    examples, docs, pairs, paraphrases = [], [], [], {}
    for i in range(n):
        label = "entailment" if i % 2 == 0 else "contradiction"
        noun = _NOUNS[i % len(_NOUNS)]
        past, present = _VERBS[i % len(_VERBS)]
        obj = _OBJECTS[i % len(_OBJECTS)]
        place = _PLACES[i % len(_PLACES)]
        premise = f"The {noun} {past} the {obj} near the {place} on day {i}."
        if label == "entailment":
            hypothesis = f"The {noun} {past} the {obj}."
            counter = f"The {noun} never {present} the {obj} on day {i}."
        else:
            hypothesis = f"The {noun} never touched the {obj}."
            counter = f"The {noun} really {past} the {obj} on day {i}."
        examples.append(
            data.LabeledExample(id=f"n{i:03d}", task="nli", text_a=premise, text_b=hypothesis, label=label)
        )
        docs.append(data.CorpusDocument(doc_id=f"d{i:03d}a", text=counter, source="fixture"))
        docs.append(
            data.CorpusDocument(
                doc_id=f"d{i:03d}b",
                text=f"Someone {past} a {obj} beside the {place} on day {i}.",
                source="fixture",
            )
        )
        query = f"{premise} {data.SEP_TOKEN} {hypothesis}"
        pairs.append((query, counter))
        paraphrases[query] = _shuffle_words(hypothesis, rng)
    for j in range(20):
        docs.append(
            data.CorpusDocument(
                doc_id=f"e{j:03d}",
                text=f"The meeting on day {j} ran long without any decision.",
                source="fixture",
            )
        )
    return examples, docs, pairs, paraphrases


def write_fixture(outdir: str | Path, task: str = "sentiment", n: int = 50, seed: int = 7) -> Path:
    """Write a complete runnable fixture; returns the config path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if task == "sentiment":
        examples, docs, pairs, paraphrases = make_sentiment_fixture(n, seed)
    elif task == "nli":
        examples, docs, pairs, paraphrases = make_nli_fixture(n, seed)
    else:
        raise ValueError(f"unknown task {task!r}")
    data.write_examples(examples, outdir / "examples.jsonl")
    data.write_corpus(docs, outdir / "corpus.jsonl")
    with (outdir / "seed_pairs.jsonl").open("w", encoding="utf-8") as fh:
        for q, p in pairs:
            fh.write(json.dumps({"query": q, "positive": p}, ensure_ascii=False) + "\n")
    with (outdir / "paraphrases.jsonl").open("w", encoding="utf-8") as fh:
        for q, p in paraphrases.items():
            fh.write(json.dumps({"query": q, "paraphrase": p}, ensure_ascii=False) + "\n")
    cfg = PipelineConfig(
        task=task,
        workdir=str(outdir / "work"),
        examples_path=str(outdir / "examples.jsonl"),
        corpus_paths=[str(outdir / "corpus.jsonl")],
        seed_pairs_path=str(outdir / "seed_pairs.jsonl"),
        paraphrases_path=str(outdir / "paraphrases.jsonl"),
        embedding=embed.EmbeddingBackendConfig(kind="hashed_test", dimension=256, seed=seed),
        index_kind="ivf",
        index_params=index.IvfParams(k_centroids=8, n_probe=8, kmeans_max_iters=25, kmeans_seed=seed),
        train=retriever.TrainConfig(
            learning_rate=2.0, epochs=15, batch_size=16, seed=seed, eval_every=5, projection_dim=32
        ),
        seed=seed,
    )
    cfg.save(outdir / "config.json")
    return outdir / "config.json"
