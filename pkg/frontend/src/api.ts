import type { StudyReport, SubmissionResult, TaskView } from './types.js';

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(url, init);
  const body = await resp.json().catch(() => ({}));
  if (!resp.ok) {
    throw new ApiError(resp.status, (body as { detail?: string }).detail ?? resp.statusText);
  }
  return body as T;
}

export function fetchNextTask(annotatorId: string, condition?: string): Promise<TaskView> {
  const params = new URLSearchParams({ annotator_id: annotatorId });
  if (condition) params.set('condition', condition);
  return request<TaskView>(`/api/tasks/next?${params}`);
}

export function submitEdit(
  taskId: string,
  editedText: string,
  annotatorId: string,
  elapsedMs: number,
): Promise<SubmissionResult> {
  return request<SubmissionResult>(`/api/tasks/${encodeURIComponent(taskId)}/submission`, {
    method: 'POST',
    headers: { 'Content-Type': 'application/json' },
    body: JSON.stringify({ edited_text: editedText, annotator_id: annotatorId, elapsed_ms: elapsedMs }),
  });
}

export function fetchReport(): Promise<StudyReport> {
  return request<StudyReport>('/api/report');
}

export async function fetchInstructions(): Promise<string> {
  const resp = await fetch('/instructions.txt');
  if (!resp.ok) throw new ApiError(resp.status, 'instructions asset missing');
  return resp.text();
}
