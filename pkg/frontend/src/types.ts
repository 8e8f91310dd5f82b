// Payload shapes mirror the annotation API exactly; the UI never derives
// state from anything but these responses.

export interface RetrievedExcerpt {
  doc_id: string;
  text: string;
}

export interface TaskView {
  task_id: string;
  task: 'sentiment' | 'nli';
  condition: 'retrieval' | 'control';
  context_text: string;
  editable_text: string;
  label: string;
  label_wording: string;
  target_label: string;
  target_wording: string;
  retrieved: RetrievedExcerpt[];
  status: 'open' | 'done';
}

export interface ComputedMetrics {
  self_bleu: number;
  levenshtein: number;
  perturbation_type: string;
}

export interface SubmissionResult {
  task_id: string;
  edited_text: string;
  annotator_id: string;
  elapsed_ms: number;
  computed: ComputedMetrics;
}

export interface ConditionSummary {
  count: number;
  mean_self_bleu: number | null;
  mean_levenshtein: number | null;
  perturbation_counts: Record<string, number>;
}

export interface StudyReport {
  conditions: Record<string, ConditionSummary>;
  annotators: Record<string, ConditionSummary>;
  total_submissions: number;
}
