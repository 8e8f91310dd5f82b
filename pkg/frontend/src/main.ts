import { ApiError, fetchInstructions, fetchNextTask, fetchReport, submitEdit } from './api.js';
import type { TaskView } from './types.js';
import {
  canSubmit,
  errorGuidance,
  newSessionToken,
  renderMetricsChips,
  renderSummaryHtml,
  renderTaskHtml,
} from './view.js';

// ── Session state ────────────────────────────────────────────────

const annotatorId = newSessionToken();
let currentTask: TaskView | null = null;
let taskShownAt = 0;

const el = (id: string) => document.getElementById(id)!;

// ── Rendering ────────────────────────────────────────────────────

function showStatus(message: string, isError = false): void {
  const node = el('status');
  node.textContent = message;
  node.className = isError ? 'status error' : 'status';
}

function updateSubmitState(): void {
  const button = el('submit') as HTMLButtonElement;
  const edited = (el('editor') as HTMLTextAreaElement).value;
  button.disabled = !(currentTask && canSubmit(currentTask.editable_text, edited));
}

function renderTask(task: TaskView): void {
  currentTask = task;
  taskShownAt = Date.now();
  el('task-panel').innerHTML = renderTaskHtml(task);
  const editor = el('editor') as HTMLTextAreaElement;
  editor.value = task.editable_text;
  editor.disabled = false;
  el('metrics').innerHTML = '';
  showStatus(`condition: ${task.condition}`);
  updateSubmitState();
}

async function loadNextTask(): Promise<void> {
  try {
    renderTask(await fetchNextTask(annotatorId));
  } catch (err) {
    if (err instanceof ApiError) {
      showStatus(errorGuidance(err.status, err.detail), true);
      if (err.status === 404) {
        (el('editor') as HTMLTextAreaElement).disabled = true;
        await refreshSummary();
      }
    } else {
      showStatus(`Could not reach the annotation service: ${err}`, true);
    }
  }
}

async function handleSubmit(): Promise<void> {
  if (!currentTask) return;
  const edited = (el('editor') as HTMLTextAreaElement).value.trim();
  try {
    const result = await submitEdit(currentTask.task_id, edited, annotatorId, Date.now() - taskShownAt);
    el('metrics').innerHTML = renderMetricsChips(result.computed);
    showStatus('Accepted. Metrics above are computed by the server. Fetch the next task when ready.');
    currentTask = null;
    (el('submit') as HTMLButtonElement).disabled = true;
    await refreshSummary();
  } catch (err) {
    if (err instanceof ApiError) {
      showStatus(errorGuidance(err.status, err.detail), true);
    } else {
      showStatus(`Submission failed: ${err}`, true);
    }
  }
}

async function refreshSummary(): Promise<void> {
  try {
    el('summary').innerHTML = renderSummaryHtml(await fetchReport(), annotatorId);
  } catch {
    // summary is best-effort; the editing flow must keep working without it
  }
}

// ── Boot ─────────────────────────────────────────────────────────

async function boot(): Promise<void> {
  el('annotator').textContent = annotatorId;
  try {
    el('instructions').textContent = await fetchInstructions();
  } catch {
    el('instructions').textContent = 'Instructions asset is unavailable.';
  }
  el('next').addEventListener('click', () => void loadNextTask());
  el('submit').addEventListener('click', () => void handleSubmit());
  el('editor').addEventListener('input', updateSubmitState);
  await loadNextTask();
  await refreshSummary();
}

void boot();
