"""Domain types and line-delimited JSON persistence.

Datasets are UTF-8 files with one JSON object per line. An optional first
line of the form ``{"_provenance": {...}}`` is tolerated (and skipped) by
every loader; writers emit it only when asked. Field names in data files
match the dataclass fields exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional

logger = logging.getLogger(__name__)

SENTIMENT_LABELS = ("Positive", "Negative")
NLI_LABELS = ("entailment", "contradiction")
TASKS = ("sentiment", "nli")

SEP_TOKEN = "[SEP]"

# serialization order for CounterfactualRecord lines
RECORD_KEYS = (
    "source_id",
    "original_text",
    "edited_text",
    "original_label",
    "target_label",
    "keywords",
    "retrieved_doc_ids",
    "stage",
    "metrics",
    "failure",
)

STAGES = ("retrieved_only", "gpt_only", "core")


class DatasetError(ValueError):
    """Raised on malformed dataset files or invariant violations."""


def labels_for_task(task: str) -> tuple[str, ...]:
    if task == "sentiment":
        return SENTIMENT_LABELS
    if task == "nli":
        return NLI_LABELS
    raise DatasetError(f"unknown task {task!r}; expected one of {TASKS}")


def flip_label(task: str, label: str) -> str:
    """Return the opposite class of a binary task label."""
    a, b = labels_for_task(task)
    if label == a:
        return b
    if label == b:
        return a
    raise DatasetError(f"label {label!r} not in {task} label set {labels_for_task(task)}")


@dataclass
class LabeledExample:
    """One task instance: a review, or a premise/hypothesis pair."""

    id: str
    task: str
    text_a: str
    text_b: Optional[str] = None
    label: str = ""

    def validate(self) -> None:
        if not self.id:
            raise DatasetError("example id must be non-empty")
        if self.task not in TASKS:
            raise DatasetError(f"example {self.id}: unknown task {self.task!r}")
        if self.task == "nli" and not self.text_b:
            raise DatasetError(f"example {self.id}: field 'text_b' is required for nli")
        if self.task == "sentiment" and self.text_b is not None:
            raise DatasetError(f"example {self.id}: field 'text_b' must be absent for sentiment")
        if self.label not in labels_for_task(self.task):
            raise DatasetError(
                f"example {self.id}: field 'label' value {self.label!r} not in "
                f"{self.task} label set {labels_for_task(self.task)}"
            )


@dataclass
class CorpusDocument:
    """One sentence/excerpt of the search corpus."""

    doc_id: str
    text: str
    source: str = ""

    def validate(self) -> None:
        if not self.doc_id:
            raise DatasetError("corpus doc_id must be non-empty")
        if not " ".join(self.text.split()):
            raise DatasetError(f"corpus doc {self.doc_id}: text empty after whitespace normalization")


@dataclass
class TripletRecord:
    """One retriever training unit: query, positive counterfactual, hard negatives."""

    query: str
    positive: str
    hard_negatives: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if not self.query:
            raise DatasetError("triplet query must be non-empty")
        if self.positive == self.query:
            raise DatasetError("triplet positive must differ from query")
        if not self.hard_negatives:
            raise DatasetError("triplet hard_negatives must be non-empty")
        for neg in self.hard_negatives:
            if neg == self.positive:
                raise DatasetError("hard negative equal to positive")


@dataclass
class CounterfactualRecord:
    """A generated counterfactual with full provenance.

    ``stage`` names how the text was produced: retrieval output used
    directly (``retrieved_only``), keyword-free editing (``gpt_only``), or
    the full retrieve-extract-edit path (``core``). ``failure`` holds a
    reason string when the edit failed (identical output, empty
    completion, backend error); failed edits are recorded, never dropped.
    """

    source_id: str
    original_text: str
    edited_text: str
    original_label: str
    target_label: str
    keywords: list[str] = field(default_factory=list)
    retrieved_doc_ids: list[str] = field(default_factory=list)
    stage: str = "core"
    metrics: Optional[dict] = None
    failure: Optional[str] = None

    def validate(self) -> None:
        if not self.source_id:
            raise DatasetError("record source_id must be non-empty")
        if self.target_label == self.original_label:
            raise DatasetError(f"record {self.source_id}: target_label must differ from original_label")
        if self.stage not in STAGES:
            raise DatasetError(f"record {self.source_id}: unknown stage {self.stage!r}")
        if self.stage == "core" and (not self.keywords or not self.retrieved_doc_ids):
            raise DatasetError(
                f"record {self.source_id}: stage=core requires non-empty keywords and retrieved_doc_ids"
            )


def _iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    """Yield (line_number, object) pairs, skipping a leading provenance line."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DatasetError(f"{path}:{lineno}: expected a JSON object")
            if lineno == 1 and "_provenance" in obj:
                continue
            yield lineno, obj


def read_provenance(path: str | Path) -> Optional[dict]:
    """Return the file's provenance header, if it has one."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first:
        return None
    try:
        obj = json.loads(first)
    except json.JSONDecodeError:
        return None
    if isinstance(obj, dict) and "_provenance" in obj:
        return obj["_provenance"]
    return None


def load_examples(path: str | Path, task: str) -> list[LabeledExample]:
    """Load and validate a labeled-example file; duplicate ids are rejected."""
    labels_for_task(task)
    examples: list[LabeledExample] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            ex = LabeledExample(
                id=str(obj["id"]),
                task=str(obj.get("task", task)),
                text_a=str(obj["text_a"]),
                text_b=None if obj.get("text_b") is None else str(obj["text_b"]),
                label=str(obj["label"]),
            )
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
        if ex.task != task:
            raise DatasetError(f"{path}:{lineno}: example {ex.id}: task {ex.task!r} does not match {task!r}")
        ex.validate()
        if ex.id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {ex.id!r}")
        seen.add(ex.id)
        examples.append(ex)
    return examples


def write_examples(examples: list[LabeledExample], path: str | Path, provenance: Optional[dict] = None) -> None:
    for ex in examples:
        ex.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"_provenance": provenance}, ensure_ascii=False) + "\n")
        for ex in examples:
            obj = {"id": ex.id, "task": ex.task, "text_a": ex.text_a, "text_b": ex.text_b, "label": ex.label}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, source: str = "") -> list[CorpusDocument]:
    """Load corpus documents; text is whitespace-normalized, doc_ids must be unique."""
    docs: list[CorpusDocument] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            doc = CorpusDocument(
                doc_id=str(obj["doc_id"]),
                text=" ".join(str(obj["text"]).split()),
                source=str(obj.get("source", source)),
            )
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
        doc.validate()
        if doc.doc_id in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate doc_id {doc.doc_id!r}")
        seen.add(doc.doc_id)
        docs.append(doc)
    return docs


def write_corpus(docs: list[CorpusDocument], path: str | Path, provenance: Optional[dict] = None) -> None:
    for doc in docs:
        doc.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"_provenance": provenance}, ensure_ascii=False) + "\n")
        for doc in docs:
            fh.write(json.dumps(asdict(doc), ensure_ascii=False) + "\n")


def build_query_text(ex: LabeledExample) -> str:
    """Render the retrieval query for one example.

    Sentiment queries are the text itself; nli queries concatenate premise
    and hypothesis around the literal ``[SEP]`` token with single spaces.
    """
    ex.validate()
    if not ex.text_a.strip():
        raise DatasetError(f"example {ex.id}: empty text_a")
    if ex.task == "sentiment":
        return ex.text_a
    if not (ex.text_b or "").strip():
        raise DatasetError(f"example {ex.id}: empty text_b")
    if SEP_TOKEN in ex.text_a or SEP_TOKEN in (ex.text_b or ""):
        # uncontrolled corpus text may contain the separator; accepted but logged
        logger.warning("example %s contains the literal %s token", ex.id, SEP_TOKEN)
    return f"{ex.text_a} {SEP_TOKEN} {ex.text_b}"


def build_triplets(
    seed_pairs: list[tuple[str, str]],
    paraphrases: dict[str, str],
) -> list[TripletRecord]:
    """Assemble training triplets from (query, positive) seed pairs.

    Each query with a paraphrase gets exactly two hard negatives, the
    paraphrase first and the query itself second. Pairs without a
    paraphrase fall back to the query-only hard negative with a warning.
    Pairs whose positive equals the query are rejected (logged, skipped).
    """
    triplets: list[TripletRecord] = []
    for i, (query, positive) in enumerate(seed_pairs):
        if not query:
            raise DatasetError(f"seed pair {i}: empty query")
        if positive == query:
            logger.warning("seed pair %d rejected: positive equals query (%.40r)", i, query)
            continue
        para = paraphrases.get(query)
        if para is not None:
            negs = [para, query]
        else:
            logger.warning("seed pair %d has no paraphrase; hard negative falls back to the query", i)
            negs = [query]
        trip = TripletRecord(query=query, positive=positive, hard_negatives=negs)
        trip.validate()
        triplets.append(trip)
    return triplets


def load_seed_pairs(path: str | Path) -> list[tuple[str, str]]:
    """Load {query, positive} lines."""
    pairs = []
    for lineno, obj in _iter_jsonl(path):
        try:
            pairs.append((str(obj["query"]), str(obj["positive"])))
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
    return pairs


def load_paraphrases(path: str | Path) -> dict[str, str]:
    """Load {query, paraphrase} lines into a query-keyed map."""
    out: dict[str, str] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            out[str(obj["query"])] = str(obj["paraphrase"])
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
    return out


def write_records(
    records: list[CounterfactualRecord],
    path: str | Path,
    provenance: Optional[dict] = None,
) -> None:
    """Write counterfactual records, one JSON object per line, keys in RECORD_KEYS order."""
    for rec in records:
        rec.validate()
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        if provenance is not None:
            fh.write(json.dumps({"_provenance": provenance}, ensure_ascii=False) + "\n")
        for rec in records:
            fh.write(record_to_line(rec) + "\n")


def record_to_line(rec: CounterfactualRecord) -> str:
    d = asdict(rec)
    ordered = {k: d[k] for k in RECORD_KEYS}
    return json.dumps(ordered, ensure_ascii=False)


def load_records(path: str | Path) -> list[CounterfactualRecord]:
    records = []
    for lineno, obj in _iter_jsonl(path):
        try:
            rec = CounterfactualRecord(
                source_id=str(obj["source_id"]),
                original_text=str(obj["original_text"]),
                edited_text=str(obj["edited_text"]),
                original_label=str(obj["original_label"]),
                target_label=str(obj["target_label"]),
                keywords=[str(w) for w in obj.get("keywords") or []],
                retrieved_doc_ids=[str(x) for x in obj.get("retrieved_doc_ids") or []],
                stage=str(obj.get("stage", "core")),
                metrics=obj.get("metrics"),
                failure=obj.get("failure"),
            )
        except KeyError as exc:
            raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
        rec.validate()
        records.append(rec)
    return records
