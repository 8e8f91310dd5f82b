"""Few-shot counterfactual-editing prompts and the LLM editor client.

Prompts are instructions followed by a handful of demonstrations, each a
fixed layout of labeled fields ending with the edited text; the test
instance is rendered identically but stops at the edited-text label so
the model completes it. Keyword lists render canonically as
``['w1', 'w2', ...]``. Templates ship as JSON data files so the prompt
bytes are auditable and swappable without code changes; keyword-free
variants back the editor-only fallback path.

Backend protocol: POST {"prompt", "temperature", "top_p", "max_tokens",
"stop"} -> {"completion"}, bearer token from a configured environment
variable. The mock backend deterministically returns the instance's
editable text with the prompt's keywords appended, which is enough to
drive the pipeline end to end offline.
"""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .data import LabeledExample, labels_for_task

logger = logging.getLogger(__name__)

PACKAGED_TEMPLATES = ("nli", "sentiment", "nli_no_keywords", "sentiment_no_keywords")

_NLI_WORDING = {"entailment": "definitely True", "contradiction": "definitely False"}


class EditError(RuntimeError):
    """Infrastructure-level editing failure (HTTP, empty completion)."""


class FailedEditError(ValueError):
    """The parsed edit is unusable (identical to the original)."""


def label_wording(task: str, label: str) -> str:
    """Prompt wording for a class label; nli maps to definitely True/False."""
    if label not in labels_for_task(task):
        raise ValueError(f"label {label!r} not in {task} label set")
    if task == "nli":
        return _NLI_WORDING[label]
    return label


def format_keyword_list(keywords: Sequence[str]) -> str:
    """Render as ['w1', 'w2', ...]: single quotes, comma-space separators."""
    inner = ", ".join("'" + w.replace("\\", "\\\\").replace("'", "\\'") + "'" for w in keywords)
    return f"[{inner}]"


@dataclass
class Demonstration:
    context_fields: dict[str, str]  # role -> text (context / editable / initial_label)
    keyword_list: list[str]
    target_label: str
    edited: str

    def __post_init__(self) -> None:
        if not self.edited:
            raise ValueError("demonstration edited text must be non-empty")


@dataclass
class PromptTemplate:
    task: str
    labels: dict[str, str]  # role -> rendered field label
    layout: list[list[str]]  # lines of roles; the final line must be ["edited"]
    instructions: str
    demonstrations: list[Demonstration]
    keywords_enabled: bool = True

    def __post_init__(self) -> None:
        expected = {"nli": 4, "sentiment": 2}.get(self.task)
        if expected is not None and len(self.demonstrations) != expected:
            raise ValueError(f"{self.task} template must have {expected} demonstrations")
        if any(not lbl for lbl in self.labels.values()):
            raise ValueError("field labels must be non-empty")
        if self.layout[-1] != ["edited"]:
            raise ValueError("template layout must end with the edited field")
        if self.keywords_enabled:
            if "keywords" not in self.labels:
                raise ValueError("keyword-enabled template needs a keywords label")
            for demo in self.demonstrations:
                if not demo.keyword_list:
                    raise ValueError("keyword-enabled template demos need keyword lists")


def load_template(name_or_path: str | Path) -> PromptTemplate:
    """Load a packaged template by name, or any template JSON by path."""
    if isinstance(name_or_path, str) and name_or_path in PACKAGED_TEMPLATES:
        from importlib.resources import files

        raw = files("cfgen").joinpath(f"data/templates/{name_or_path}.json").read_text(encoding="utf-8")
    else:
        raw = Path(name_or_path).read_text(encoding="utf-8")
    obj = json.loads(raw)
    demos = [
        Demonstration(
            context_fields=dict(d["context_fields"]),
            keyword_list=list(d.get("keywords") or []),
            target_label=str(d["target_label"]),
            edited=str(d["edited"]),
        )
        for d in obj["demonstrations"]
    ]
    return PromptTemplate(
        task=obj["task"],
        labels=dict(obj["labels"]),
        layout=[list(line) for line in obj["layout"]],
        instructions=str(obj["instructions"]),
        demonstrations=demos,
        keywords_enabled=bool(obj.get("keywords_enabled", True)),
    )


def default_template(task: str, keywords: bool = True) -> PromptTemplate:
    return load_template(task if keywords else f"{task}_no_keywords")


def _render_block(
    template: PromptTemplate,
    values: dict[str, str],
    keywords: Sequence[str],
    edited: Optional[str],
) -> str:
    lines = []
    for layout_line in template.layout:
        parts = []
        for role in layout_line:
            label = template.labels[role]
            if role == "keywords":
                parts.append(f"{label} {format_keyword_list(keywords)}")
            elif role == "edited":
                parts.append(f"{label} {edited}" if edited is not None else label)
            else:
                if role not in values:
                    raise ValueError(f"missing required context field {role!r}")
                parts.append(f"{label} {values[role]}")
        lines.append(" ".join(parts))
    return "\n".join(lines)


def build_prompt(
    template: PromptTemplate,
    instance: LabeledExample,
    keywords: Sequence[str],
    target_label: str,
) -> str:
    """Render the full editing prompt; byte-deterministic for fixed inputs."""
    instance.validate()
    if target_label == instance.label:
        raise ValueError("target label must differ from the instance label")
    if template.keywords_enabled and not keywords:
        raise ValueError("keywords must be non-empty for a keyword-enabled template")
    blocks = [template.instructions]
    for demo in template.demonstrations:
        values = {**demo.context_fields, "target_label": demo.target_label}
        blocks.append(_render_block(template, values, demo.keyword_list, demo.edited))
    if template.task == "nli":
        values = {
            "context": instance.text_a,
            "editable": instance.text_b or "",
            "initial_label": label_wording("nli", instance.label),
            "target_label": label_wording("nli", target_label),
        }
    else:
        values = {
            "editable": instance.text_a,
            "initial_label": label_wording("sentiment", instance.label),
            "target_label": label_wording("sentiment", target_label),
        }
    blocks.append(_render_block(template, values, keywords, edited=None))
    return "\n".join(blocks)


def editable_text(template: PromptTemplate, instance: LabeledExample) -> str:
    """The text the editor is asked to modify (hypothesis or review)."""
    return (instance.text_b or "") if template.task == "nli" else instance.text_a


@dataclass
class EditParams:
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 256
    stop_sequences: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError("temperature must be in [0, 2]")
        if not (0.0 < self.top_p <= 1.0):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


class EditorBackend(Protocol):
    def complete(self, prompt: str, params: EditParams) -> str: ...


class MockEditorBackend:
    """Deterministic offline editor: echoes the instance's editable text
    with each prompt keyword appended in order."""

    def __init__(self, template: PromptTemplate):
        self.template = template

    def complete(self, prompt: str, params: EditParams) -> str:
        original = self._last_field(prompt, self.template.labels["editable"])
        keywords: list[str] = []
        kw_label = self.template.labels.get("keywords")
        if self.template.keywords_enabled and kw_label:
            rendered = self._last_field(prompt, kw_label)
            try:
                keywords = [str(w) for w in ast.literal_eval(rendered)]
            except (ValueError, SyntaxError):
                keywords = []
        return original + ("".join(" " + w for w in keywords) if keywords else "")

    def _last_field(self, prompt: str, label: str) -> str:
        positions = [p for p in self._find_all(prompt, label) if not self._shadowed(prompt, label, p)]
        if not positions:
            raise EditError(f"mock backend: prompt has no {label!r} field")
        rest = prompt[positions[-1] + len(label) :]
        line = rest.split("\n", 1)[0].strip()
        # on shared lines the value ends at the next field label
        for other in self.template.labels.values():
            if other != label:
                cut = line.find(other)
                if cut >= 0:
                    line = line[:cut].rstrip()
        return line

    @staticmethod
    def _find_all(text: str, needle: str) -> list[int]:
        out, start = [], 0
        while (pos := text.find(needle, start)) >= 0:
            out.append(pos)
            start = pos + 1
        return out

    def _shadowed(self, prompt: str, label: str, pos: int) -> bool:
        """True when this occurrence is really part of a longer field label
        (e.g. 'Review:' inside 'Edited Review:')."""
        for other in self.template.labels.values():
            if other == label or label not in other:
                continue
            off = 0
            while (k := other.find(label, off)) >= 0:
                start = pos - k
                if start >= 0 and prompt[start : start + len(other)] == other:
                    return True
                off = k + 1
        return False


class RemoteEditorBackend:
    """HTTP editor client with retries, backoff, and per-minute rate limiting.

    Each request carries a deterministic ``X-Request-Key`` (SHA-256 of the
    prompt and decoding parameters) so retried deliveries are idempotent
    on the server side.
    """

    def __init__(
        self,
        endpoint: str,
        auth_env_var: Optional[str] = None,
        retries: int = 5,
        backoff_base: float = 0.25,
        timeout: float = 120.0,
        requests_per_minute: Optional[int] = 60,
    ):
        self.endpoint = endpoint
        self.auth_env_var = auth_env_var
        self.retries = retries
        self.backoff_base = backoff_base
        self.timeout = timeout
        self.requests_per_minute = requests_per_minute
        self._lock = threading.Lock()
        self._recent: list[float] = []

    def _throttle(self) -> None:
        if not self.requests_per_minute:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                self._recent = [t for t in self._recent if now - t < 60.0]
                if len(self._recent) < self.requests_per_minute:
                    self._recent.append(now)
                    return
                wait = 60.0 - (now - self._recent[0])
            time.sleep(max(wait, 0.01))

    def complete(self, prompt: str, params: EditParams) -> str:
        import httpx

        headers = {}
        if self.auth_env_var:
            token = os.environ.get(self.auth_env_var)
            if not token:
                raise EditError(f"environment variable {self.auth_env_var} is not set")
            headers["Authorization"] = f"Bearer {token}"
        payload = {
            "prompt": prompt,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "stop": params.stop_sequences,
        }
        headers["X-Request-Key"] = hashlib.sha256(
            json.dumps(payload, sort_keys=True, ensure_ascii=False).encode("utf-8")
        ).hexdigest()
        last_exc: Optional[Exception] = None
        for attempt in range(self.retries):
            self._throttle()
            try:
                with httpx.Client() as client:
                    resp = client.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            except Exception as exc:
                last_exc = exc
                resp = None
            if resp is not None:
                if resp.status_code == 200:
                    if attempt:
                        logger.info("editor request succeeded after %d retries", attempt)
                    return str(resp.json().get("completion", ""))
                if resp.status_code not in (429,) and resp.status_code < 500:
                    raise EditError(f"editor backend returned HTTP {resp.status_code}")
                last_exc = EditError(f"editor backend returned HTTP {resp.status_code}")
            if attempt < self.retries - 1:
                time.sleep(self.backoff_base * (2**attempt) * (1.0 + random.random()))
        raise EditError(f"editor request failed after {self.retries} attempts: {last_exc}")


def request_edit(prompt: str, params: EditParams, backend: EditorBackend) -> str:
    """One completion for one prompt; empty completions are errors."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    completion = backend.complete(prompt, params)
    if not completion.strip():
        raise EditError("editor returned an empty completion")
    return completion


def parse_edit(raw: str, template: PromptTemplate, original_text: str) -> str:
    """Extract the edited text from a raw completion.

    Strips everything up to and including the final edited-text field
    label when the backend echoed it, trims whitespace, and rejects
    outputs identical to the original (the edit must differ).
    """
    if not raw:
        raise ValueError("raw completion must be non-empty")
    label = template.labels["edited"]
    pos = raw.rfind(label)
    text = raw[pos + len(label) :] if pos >= 0 else raw
    text = text.strip()
    if text == original_text.strip():
        raise FailedEditError("edited text is identical to the original")
    return text
