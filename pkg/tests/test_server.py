import json

import pytest
from fastapi.testclient import TestClient

from cfgen import data, metrics, server


def _examples(n=8):
    out = []
    for i in range(n):
        out.append(
            data.LabeledExample(
                id=f"n{i}",
                task="nli",
                text_a=f"The worker number {i} finished the shift early.",
                text_b=f"The worker number {i} left before the shift ended.",
                label="entailment" if i % 2 == 0 else "contradiction",
            )
        )
    return out


def _retrieve(ex, k):
    return [{"doc_id": f"{ex.id}-r{j}", "text": f"counter excerpt {j} for {ex.id}"} for j in range(k)]


@pytest.fixture()
def client(tmp_path):
    tasks = server.build_task_pool(_examples(), _retrieve, top_k=3)
    app = server.create_app(tasks, tmp_path / "journal.jsonl", claim_timeout_s=9999)
    return TestClient(app), tasks, tmp_path / "journal.jsonl"


class TestTaskPool:
    def test_parity_alternation(self):
        tasks = server.build_task_pool(_examples(6), _retrieve)
        assert [t.condition for t in tasks] == ["retrieval", "control"] * 3

    def test_retrieval_tasks_have_three_excerpts(self):
        tasks = server.build_task_pool(_examples(4), _retrieve, top_k=3)
        for t in tasks:
            if t.condition == "retrieval":
                assert len(t.retrieved) == 3
            else:
                assert t.retrieved == []

    def test_target_is_flipped(self):
        for t in server.build_task_pool(_examples(4), _retrieve):
            assert t.target_label == data.flip_label("nli", t.instance.label)

    def test_condition_invariants(self):
        with pytest.raises(ValueError):
            server.AnnotationTask(
                task_id="x", instance=_examples(1)[0], target_label="contradiction",
                condition="control", retrieved=[{"doc_id": "d", "text": "t"}],
            )
        with pytest.raises(ValueError):
            server.AnnotationTask(
                task_id="x", instance=_examples(1)[0], target_label="contradiction",
                condition="retrieval", retrieved=[],
            )


class TestEndpoints:
    def test_next_task_payload(self, client):
        c, tasks, _ = client
        body = c.get("/api/tasks/next").json()
        assert body["task_id"] == "t0000"
        assert body["condition"] == "retrieval"
        assert len(body["retrieved"]) == 3
        assert body["label_wording"] == "definitely True"
        assert body["target_wording"] == "definitely False"

    def test_control_payload_empty_retrieved(self, client):
        c, _, _ = client
        body = c.get("/api/tasks/next", params={"condition": "control"}).json()
        assert body["condition"] == "control"
        assert body["retrieved"] == []

    def test_claims_exclude_other_annotators(self, client):
        c, _, _ = client
        a = c.get("/api/tasks/next", params={"annotator_id": "a"}).json()
        b = c.get("/api/tasks/next", params={"annotator_id": "b"}).json()
        assert a["task_id"] != b["task_id"]
        # the same annotator re-fetches their claimed task
        a2 = c.get("/api/tasks/next", params={"annotator_id": "a"}).json()
        assert a2["task_id"] == a["task_id"]

    def test_get_task_by_id(self, client):
        c, _, _ = client
        assert c.get("/api/tasks/t0003").json()["task_id"] == "t0003"
        assert c.get("/api/tasks/zzz").status_code == 404

    def test_identical_submission_rejected_422(self, client):
        c, tasks, _ = client
        task = tasks[0]
        resp = c.post(
            f"/api/tasks/{task.task_id}/submission",
            json={"edited_text": task.editable_text, "annotator_id": "a"},
        )
        assert resp.status_code == 422
        assert "differ" in resp.json()["detail"]

    def test_submission_computes_metrics_and_marks_done(self, client):
        c, tasks, journal = client
        task = tasks[0]
        edited = task.editable_text + " indeed"
        resp = c.post(
            f"/api/tasks/{task.task_id}/submission",
            json={"edited_text": edited, "annotator_id": "a", "elapsed_ms": 1200},
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["computed"]["self_bleu"] == pytest.approx(
            metrics.self_bleu(task.editable_text, edited)
        )
        assert body["computed"]["levenshtein"] == pytest.approx(
            metrics.norm_levenshtein(task.editable_text, edited)
        )
        # journal got exactly this record
        lines = journal.read_text().strip().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0]) == body
        # double submission -> 409
        resp2 = c.post(f"/api/tasks/{task.task_id}/submission", json={"edited_text": edited + " x"})
        assert resp2.status_code == 409

    def test_report_matches_journal_replay(self, client):
        c, tasks, journal = client
        for i, task in enumerate(tasks[:6]):
            c.post(
                f"/api/tasks/{task.task_id}/submission",
                json={"edited_text": task.editable_text + f" variant {i}", "annotator_id": f"ann{i % 2}"},
            )
        report = c.get("/api/report").json()
        replay = server.replay_report(journal, {t.task_id: t for t in tasks})
        assert report == replay
        assert report["total_submissions"] == 6
        assert report["conditions"]["retrieval"]["count"] == 3
        assert report["conditions"]["control"]["count"] == 3
        assert set(report["annotators"]) == {"ann0", "ann1"}

    def test_no_open_tasks_404(self, client):
        c, tasks, _ = client
        for i, task in enumerate(tasks):
            c.post(f"/api/tasks/{task.task_id}/submission", json={"edited_text": f"new text {i}"})
        assert c.get("/api/tasks/next").status_code == 404

    def test_journal_restart_restores_done_state(self, client, tmp_path):
        c, tasks, journal = client
        task = tasks[0]
        c.post(f"/api/tasks/{task.task_id}/submission", json={"edited_text": "replacement text"})
        # new app over the same journal: the task stays done
        fresh_tasks = server.build_task_pool(_examples(), _retrieve, top_k=3)
        app2 = server.create_app(fresh_tasks, journal)
        c2 = TestClient(app2)
        resp = c2.post(f"/api/tasks/{task.task_id}/submission", json={"edited_text": "another text"})
        assert resp.status_code == 409
        assert c2.get("/api/report").json()["total_submissions"] == 1


class TestClaimTimeout:
    def test_expired_claim_is_reassigned(self, tmp_path):
        tasks = server.build_task_pool(_examples(2), _retrieve)
        app = server.create_app(tasks, tmp_path / "j.jsonl", claim_timeout_s=0.0)
        c = TestClient(app)
        first = c.get("/api/tasks/next", params={"annotator_id": "a"}).json()
        # zero timeout: the claim lapses immediately, so b gets the same task
        second = c.get("/api/tasks/next", params={"annotator_id": "b"}).json()
        assert second["task_id"] == first["task_id"]
