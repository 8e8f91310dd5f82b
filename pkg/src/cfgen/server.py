"""Annotation HTTP API for the human-in-the-loop counterfactual study.

Tasks alternate between two conditions by parity: ``retrieval`` tasks
carry the top-3 retrieved counterfactual excerpts, ``control`` tasks
carry none. Assignment uses an atomic claim held until submission or a
timeout; submissions append to a line-delimited journal whose replay
reconstructs the /api/report aggregates exactly. All metric values the
UI shows are computed server-side here, so batch reports and the UI can
never disagree.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import data, editor, metrics

logger = logging.getLogger(__name__)

CONDITIONS = ("retrieval", "control")
MAX_EXCERPTS = 3


@dataclass
class AnnotationTask:
    task_id: str
    instance: data.LabeledExample
    target_label: str
    condition: str
    retrieved: list[dict] = field(default_factory=list)  # {"doc_id", "text"}
    status: str = "open"

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        if self.condition == "retrieval" and not (1 <= len(self.retrieved) <= MAX_EXCERPTS):
            raise ValueError("retrieval tasks need 1-3 excerpts")
        if self.condition == "control" and self.retrieved:
            raise ValueError("control tasks must not carry excerpts")

    @property
    def editable_text(self) -> str:
        return (self.instance.text_b or "") if self.instance.task == "nli" else self.instance.text_a

    @property
    def context_text(self) -> str:
        return self.instance.text_a if self.instance.task == "nli" else ""

    def payload(self) -> dict:
        return {
            "task_id": self.task_id,
            "task": self.instance.task,
            "condition": self.condition,
            "context_text": self.context_text,
            "editable_text": self.editable_text,
            "label": self.instance.label,
            "label_wording": editor.label_wording(self.instance.task, self.instance.label),
            "target_label": self.target_label,
            "target_wording": editor.label_wording(self.instance.task, self.target_label),
            "retrieved": list(self.retrieved),
            "status": self.status,
        }


def build_task_pool(
    examples: list[data.LabeledExample],
    retrieve_excerpts=None,
    top_k: int = MAX_EXCERPTS,
) -> list[AnnotationTask]:
    """Alternate conditions by example parity; fetch excerpts for retrieval tasks.

    ``retrieve_excerpts(example, k)`` returns [{"doc_id", "text"}]; tasks
    in the retrieval condition fall back to control when it yields
    nothing (with a warning), keeping the pool usable on sparse corpora.
    """
    tasks: list[AnnotationTask] = []
    for i, ex in enumerate(examples):
        condition = "retrieval" if i % 2 == 0 else "control"
        excerpts: list[dict] = []
        if condition == "retrieval":
            if retrieve_excerpts is None:
                raise ValueError("retrieval condition requires a retriever")
            excerpts = list(retrieve_excerpts(ex, top_k))[:MAX_EXCERPTS]
            if not excerpts:
                logger.warning("no excerpts for %s; demoting task to control", ex.id)
                condition = "control"
        tasks.append(
            AnnotationTask(
                task_id=f"t{i:04d}",
                instance=ex,
                target_label=data.flip_label(ex.task, ex.label),
                condition=condition,
                retrieved=excerpts,
            )
        )
    return tasks


class SubmissionBody(BaseModel):
    edited_text: str
    annotator_id: str = "anonymous"
    elapsed_ms: int = 0


def compute_submission_metrics(original: str, edited: str) -> dict:
    return {
        "self_bleu": metrics.self_bleu(original, edited),
        "levenshtein": metrics.norm_levenshtein(original, edited),
        "perturbation_type": metrics.classify_perturbation(original, edited).value,
    }


def replay_report(journal_path: Path, tasks_by_id: dict[str, AnnotationTask]) -> dict:
    """Rebuild the /api/report payload from the journal alone."""
    by_condition: dict[str, list[dict]] = {c: [] for c in CONDITIONS}
    by_annotator: dict[str, list[dict]] = {}
    if journal_path.exists():
        with journal_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                sub = json.loads(line)
                task = tasks_by_id.get(sub["task_id"])
                if task is None:
                    continue
                by_condition[task.condition].append(sub)
                by_annotator.setdefault(sub.get("annotator_id", "anonymous"), []).append(sub)

    def summarize(subs: list[dict]) -> dict:
        if not subs:
            return {"count": 0, "mean_self_bleu": None, "mean_levenshtein": None, "perturbation_counts": {}}
        pert: dict[str, int] = {}
        for s in subs:
            t = s["computed"]["perturbation_type"]
            pert[t] = pert.get(t, 0) + 1
        return {
            "count": len(subs),
            "mean_self_bleu": sum(s["computed"]["self_bleu"] for s in subs) / len(subs),
            "mean_levenshtein": sum(s["computed"]["levenshtein"] for s in subs) / len(subs),
            "perturbation_counts": pert,
        }

    return {
        "conditions": {c: summarize(by_condition[c]) for c in CONDITIONS},
        "annotators": {a: summarize(subs) for a, subs in sorted(by_annotator.items())},
        "total_submissions": sum(len(v) for v in by_condition.values()),
    }


def create_app(
    tasks: list[AnnotationTask],
    journal_path: str | Path,
    ui_dir: Optional[str | Path] = None,
    claim_timeout_s: float = 1800.0,
) -> FastAPI:
    journal_path = Path(journal_path)
    journal_path.parent.mkdir(parents=True, exist_ok=True)
    tasks_by_id = {t.task_id: t for t in tasks}
    claims: dict[str, tuple[str, float]] = {}
    lock = threading.Lock()

    # tasks already submitted in a previous run stay done
    if journal_path.exists():
        with journal_path.open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    done = json.loads(line).get("task_id")
                    if done in tasks_by_id:
                        tasks_by_id[done].status = "done"

    app = FastAPI(title="counterfactual annotation service")
    app.state.annotation_tasks = tasks
    app.state.journal_path = journal_path

    @app.get("/api/tasks/next")
    def next_task(condition: Optional[str] = None, annotator_id: str = "anonymous"):
        if condition is not None and condition not in CONDITIONS:
            raise HTTPException(status_code=400, detail=f"unknown condition {condition!r}")
        now = time.monotonic()
        with lock:
            for task in tasks:
                if task.status != "open":
                    continue
                if condition is not None and task.condition != condition:
                    continue
                claim = claims.get(task.task_id)
                if claim is not None and claim[0] != annotator_id and now - claim[1] < claim_timeout_s:
                    continue
                claims[task.task_id] = (annotator_id, now)
                return task.payload()
        raise HTTPException(status_code=404, detail="no open tasks")

    @app.get("/api/tasks/{task_id}")
    def get_task(task_id: str):
        task = tasks_by_id.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"no task {task_id!r}")
        return task.payload()

    @app.post("/api/tasks/{task_id}/submission")
    def submit(task_id: str, body: SubmissionBody):
        task = tasks_by_id.get(task_id)
        if task is None:
            raise HTTPException(status_code=404, detail=f"no task {task_id!r}")
        edited = body.edited_text.strip()
        if not edited:
            raise HTTPException(status_code=422, detail="edited text must be non-empty")
        if edited == task.editable_text.strip():
            raise HTTPException(status_code=422, detail="edited text must differ from the original")
        with lock:
            if task.status == "done":
                raise HTTPException(status_code=409, detail="task already submitted")
            computed = compute_submission_metrics(task.editable_text, edited)
            record = {
                "task_id": task_id,
                "edited_text": edited,
                "annotator_id": body.annotator_id,
                "elapsed_ms": body.elapsed_ms,
                "computed": computed,
            }
            with journal_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
                fh.flush()
            task.status = "done"
            claims.pop(task_id, None)
        return record

    @app.get("/api/report")
    def get_report():
        with lock:
            return replay_report(journal_path, tasks_by_id)

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
