import { afterEach, describe, expect, it, vi } from 'vitest';

import { ApiError, fetchNextTask, fetchReport, submitEdit } from './api.js';

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'Content-Type': 'application/json' },
  });
}

afterEach(() => {
  vi.unstubAllGlobals();
});

describe('fetchNextTask', () => {
  it('passes annotator and optional condition as query params', async () => {
    const fetchMock = vi.fn().mockResolvedValue(jsonResponse(200, { task_id: 't1', retrieved: [] }));
    vi.stubGlobal('fetch', fetchMock);
    await fetchNextTask('ann-1', 'retrieval');
    const url = fetchMock.mock.calls[0][0] as string;
    expect(url).toContain('/api/tasks/next?');
    expect(url).toContain('annotator_id=ann-1');
    expect(url).toContain('condition=retrieval');
  });

  it('throws ApiError with the server detail on failure', async () => {
    vi.stubGlobal('fetch', vi.fn().mockResolvedValue(jsonResponse(404, { detail: 'no open tasks' })));
    await expect(fetchNextTask('ann-1')).rejects.toMatchObject({
      status: 404,
      detail: 'no open tasks',
    });
  });
});

describe('submitEdit', () => {
  it('POSTs the submission body to the task endpoint', async () => {
    const fetchMock = vi.fn().mockResolvedValue(
      jsonResponse(200, {
        task_id: 't1',
        edited_text: 'x',
        annotator_id: 'ann-1',
        elapsed_ms: 5,
        computed: { self_bleu: 0.2, levenshtein: 0.4, perturbation_type: 'lexical' },
      }),
    );
    vi.stubGlobal('fetch', fetchMock);
    const result = await submitEdit('t1', 'new text', 'ann-1', 1234);
    expect(result.computed.perturbation_type).toBe('lexical');
    const [url, init] = fetchMock.mock.calls[0] as [string, RequestInit];
    expect(url).toBe('/api/tasks/t1/submission');
    expect(init.method).toBe('POST');
    expect(JSON.parse(init.body as string)).toEqual({
      edited_text: 'new text',
      annotator_id: 'ann-1',
      elapsed_ms: 1234,
    });
  });

  it('surfaces 422 rejections as ApiError', async () => {
    vi.stubGlobal(
      'fetch',
      vi.fn().mockResolvedValue(jsonResponse(422, { detail: 'edited text must differ from the original' })),
    );
    await expect(submitEdit('t1', 'same', 'ann-1', 1)).rejects.toBeInstanceOf(ApiError);
  });
});

describe('fetchReport', () => {
  it('returns the aggregate payload untouched', async () => {
    const payload = {
      conditions: { retrieval: { count: 1, mean_self_bleu: 0.1, mean_levenshtein: 0.9, perturbation_counts: {} } },
      annotators: {},
      total_submissions: 1,
    };
    vi.stubGlobal('fetch', vi.fn().mockResolvedValue(jsonResponse(200, payload)));
    expect(await fetchReport()).toEqual(payload);
  });
});
