// Pure view logic: HTML building and submit gating, kept free of DOM and
// network access so it is directly unit-testable. Every metric shown here
// is echoed from the server; the client computes nothing itself.

import type { ComputedMetrics, ConditionSummary, StudyReport, TaskView } from './types.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

/** Submit only when the edit is non-empty and differs from the original. */
export function canSubmit(originalText: string, editedText: string): boolean {
  const edited = editedText.trim();
  return edited.length > 0 && edited !== originalText.trim();
}

export function editableFieldName(task: TaskView['task']): string {
  return task === 'nli' ? 'hypothesis' : 'review';
}

export function renderTaskHtml(view: TaskView): string {
  const parts: string[] = [];
  parts.push(`<div class="task-meta">task <code>${escapeHtml(view.task_id)}</code></div>`);
  if (view.task === 'nli') {
    parts.push(`
      <div class="field">
        <div class="field-label">premise</div>
        <div class="field-text">${escapeHtml(view.context_text)}</div>
      </div>`);
  }
  parts.push(`
    <div class="field">
      <div class="field-label">${editableFieldName(view.task)} (current label: ${escapeHtml(view.label_wording)})</div>
      <div class="field-text" id="original-text">${escapeHtml(view.editable_text)}</div>
    </div>
    <div class="field target">
      <div class="field-label">rewrite it so the label becomes</div>
      <div class="target-label">${escapeHtml(view.target_wording)}</div>
    </div>`);
  // the control condition renders no retrieval markup at all, so nothing
  // retrieved can leak into that arm of the study
  if (view.condition === 'retrieval') {
    const cards = view.retrieved
      .map(
        (r) => `
        <div class="excerpt-card" data-doc-id="${escapeHtml(r.doc_id)}">
          <div class="excerpt-text">${escapeHtml(r.text)}</div>
        </div>`,
      )
      .join('');
    parts.push(`
      <div class="retrieved-panel">
        <div class="field-label">retrieved counterfactual excerpts (inspiration, not required text)</div>
        ${cards}
      </div>`);
  }
  return parts.join('\n');
}

export function renderMetricsChips(computed: ComputedMetrics): string {
  const chip = (label: string, value: string) =>
    `<span class="chip"><span class="chip-label">${label}</span> ${value}</span>`;
  return [
    chip('self-BLEU', computed.self_bleu.toFixed(3)),
    chip('Levenshtein', computed.levenshtein.toFixed(3)),
    chip('perturbation', escapeHtml(computed.perturbation_type)),
  ].join(' ');
}

function summaryRow(name: string, s: ConditionSummary): string {
  const fmt = (v: number | null) => (v === null ? '—' : v.toFixed(3));
  return `<tr>
    <td>${escapeHtml(name)}</td>
    <td>${s.count}</td>
    <td>${fmt(s.mean_self_bleu)}</td>
    <td>${fmt(s.mean_levenshtein)}</td>
  </tr>`;
}

export function renderSummaryHtml(report: StudyReport, annotatorId: string): string {
  const header = `<tr><th></th><th>count</th><th>self-BLEU</th><th>Levenshtein</th></tr>`;
  const conditionRows = Object.entries(report.conditions)
    .map(([name, s]) => summaryRow(name, s))
    .join('');
  const mine = report.annotators[annotatorId];
  const mineRows = mine ? summaryRow(`you (${annotatorId})`, mine) : '';
  return `
    <div class="summary-total">${report.total_submissions} submissions so far</div>
    <table class="summary-table">${header}${conditionRows}${mineRows}</table>`;
}

/** Inline guidance for API rejections, keyed by HTTP status. */
export function errorGuidance(status: number, detail: string): string {
  if (status === 422) {
    return `Not accepted: ${detail}. Change the text so it differs from the original, then submit again.`;
  }
  if (status === 409) {
    return `This task was already submitted. Fetch the next task to continue.`;
  }
  if (status === 404) {
    return `No open tasks remain. You can review your session summary below.`;
  }
  return `Request failed (HTTP ${status}): ${detail}. Please retry.`;
}

export function newSessionToken(): string {
  return `ann-${Math.random().toString(36).slice(2, 10)}`;
}
