"""Acceptance suite: one test per release criterion, each printing a
PASS line (run with ``pytest tests/test_acceptance.py -s`` to see them).

Expected values marked as derived were computed with the independent
oracles embedded in this module (scalar arithmetic, finite differences,
brute-force scans, full-matrix DP), never copied from the
implementation under test.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from cfgen import data, editor, fixtures, index, metrics, pipeline, retriever
from cfgen.embed import hashed_test_embed

GOLDEN = Path(__file__).parent / "golden"


def _ok(name: str) -> None:
    print(f"[ACCEPTANCE] {name}: PASS")


# -------------------------------------------------------------------------
# 1. contrastive loss correctness


class TestLossCorrectness:
    def test_worked_example_and_uniform_case(self):
        # independent scalar-arithmetic oracle for Eq.-style softmax loss,
        # sims: positive 1, negatives 0 and -1
        e = math.exp
        oracle = -math.log(e(1.0) / (e(1.0) + e(0.0) + e(-1.0)))
        assert oracle == pytest.approx(0.40760596444438, abs=1e-11)
        got = retriever.loss_from_sims(np.array([1.0, 0.0, -1.0]))
        assert abs(got - oracle) < 1e-4
        got2 = retriever.contrastive_loss(
            np.array([1.0, 0.0]), np.array([1.0, 0.0]),
            [np.array([0.0, 1.0]), np.array([-1.0, 0.0])],
        )
        assert abs(got2 - oracle) < 1e-4
        # uniform case: ln(n+1) exactly to 1e-12
        for n_negs in (1, 2, 5, 30):
            sims = np.full(n_negs + 1, 0.37)
            assert retriever.loss_from_sims(sims) == pytest.approx(math.log(n_negs + 1), abs=1e-12)
        _ok("contrastive loss correctness")


# -------------------------------------------------------------------------
# 2. gradient fidelity


def _loss_value(batch, wq, wd, in_batch):
    qe = retriever.ProjectionEncoder(weights=wq, role="query")
    de = retriever.ProjectionEncoder(weights=wd, role="document")
    total = 0.0
    pos = [de.project(t.positive) for t in batch]
    for bi, trip in enumerate(batch):
        q = qe.project(trip.query)
        cands = [pos[bi]] + [de.project(n) for n in trip.negatives]
        if in_batch:
            cands += [pos[bj] for bj in range(len(batch)) if bj != bi]
        sims = np.array([float(q @ c) for c in cands])
        m = sims.max()
        total += m + math.log(np.exp(sims - m).sum()) - sims[0]
    return total / len(batch)


class TestGradientFidelity:
    def test_fifty_randomized_instances(self):
        rng = np.random.default_rng(202)
        h = 1e-5
        for trial in range(50):
            d_in = int(rng.integers(8, 33))  # 8..32 dims
            d_out = int(rng.integers(2, 7))
            in_batch = bool(rng.integers(0, 2))
            batch = [
                retriever.TripletEmbeddings(
                    query=rng.normal(size=d_in),
                    positive=rng.normal(size=d_in),
                    negatives=[rng.normal(size=d_in) for _ in range(int(rng.integers(1, 3)))],
                )
                for _ in range(int(rng.integers(2, 4)))
            ]
            q_enc = retriever.init_encoder(d_in, d_out, "query", rng)
            d_enc = retriever.init_encoder(d_in, d_out, "document", rng)
            gq, gd, _ = retriever.loss_gradients(batch, (q_enc, d_enc), in_batch)
            # central finite differences over every weight entry
            for analytic, which in ((gq, "q"), (gd, "d")):
                w = q_enc.weights if which == "q" else d_enc.weights
                for idx in np.ndindex(*w.shape):
                    wp, wm = w.copy(), w.copy()
                    wp[idx] += h
                    wm[idx] -= h
                    if which == "q":
                        num = (_loss_value(batch, wp, d_enc.weights, in_batch)
                               - _loss_value(batch, wm, d_enc.weights, in_batch)) / (2 * h)
                    else:
                        num = (_loss_value(batch, q_enc.weights, wp, in_batch)
                               - _loss_value(batch, q_enc.weights, wm, in_batch)) / (2 * h)
                    denom = max(abs(num), abs(analytic[idx]), 1e-8)
                    assert abs(num - analytic[idx]) / denom < 1e-4
        _ok("gradient fidelity (50 randomized instances)")


# -------------------------------------------------------------------------
# 3. retrieval training at desk scale


def _separable_triplet_set(m=200, dim=512, n_hard_eval=30):
    """Queries share a per-instance topic with their positive, but share
    style words with the hard negatives, so untrained base similarity
    ranks paraphrase-style negatives above the positive; a linear
    projection that discounts query-style features separates the set."""
    topics = [f"top{i:03d}ic flavor{i % 7}" for i in range(m)]
    queries = [f"{t} asks wonder query" for t in topics]
    positives = [f"{t} reply answer state" for t in topics]
    paraphrases = [f"{t} wonder asks query" for t in topics]
    hard_eval = {
        i: [f"{topics[i]} asks wonder query extra{k:02d}" for k in range(n_hard_eval)] for i in range(m)
    }
    texts = set(queries) | set(positives) | set(paraphrases)
    for negs in hard_eval.values():
        texts.update(negs)
    store = {t: hashed_test_embed(t, dim) for t in texts}
    triplets = [
        data.TripletRecord(query=queries[i], positive=positives[i],
                           hard_negatives=[paraphrases[i], queries[i]])
        for i in range(m)
    ]
    pool_rng = np.random.default_rng(900)
    pools = []
    for i in range(m):
        others = [j for j in range(m) if j != i]
        rand = [positives[j] for j in pool_rng.choice(others, size=30, replace=False)]
        pools.append(
            retriever.EvalPool(
                query=queries[i], positive=positives[i],
                random_negatives=rand, hard_negatives=hard_eval[i],
            )
        )
    return triplets, store, pools


class TestRetrievalTraining:
    def test_top1_reaches_090_from_at_most_010(self):
        triplets, store, pools = _separable_triplet_set()
        cfg = retriever.TrainConfig(
            learning_rate=5.0, epochs=80, batch_size=32, seed=7,
            in_batch_negatives=True, grad_clip=2.0, eval_every=0, projection_dim=32,
        )
        rng = np.random.default_rng(cfg.seed)
        d_in = 512
        untrained_q = retriever.init_encoder(d_in, cfg.projection_dim, "query", rng)
        untrained_d = retriever.init_encoder(d_in, cfg.projection_dim, "document", rng)
        before = retriever.evaluate_top1(untrained_q, untrained_d, pools, store)
        assert before <= 0.10, f"untrained top-1 {before}"
        q_enc, d_enc, log = retriever.train(triplets, store, cfg)
        after = retriever.evaluate_top1(q_enc, d_enc, pools, store)
        assert after >= 0.90, f"trained top-1 {after}"
        assert log[-1]["mean_loss"] < log[0]["mean_loss"]
        _ok(f"retrieval training at desk scale (top-1 {before:.3f} -> {after:.3f})")


# -------------------------------------------------------------------------
# 4. index correctness


def _clustered_unit_vectors(rng, counts, d, n_components=100, sigma=0.2):
    """Random unit vectors from one mixture on the sphere; corpus and
    queries share the mixture, as embedded text from one domain would."""
    centers = rng.normal(size=(n_components, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    out = []
    for n in counts:
        pts = centers[rng.integers(0, n_components, size=n)] + sigma * rng.normal(size=(n, d))
        out.append(pts / np.linalg.norm(pts, axis=1, keepdims=True))
    return out


class TestIndexCorrectness:
    def test_exact_oracle_and_ivf_recall(self):
        rng = np.random.default_rng(404)
        n, d, n_queries = 10_000, 64, 200
        vectors, queries = _clustered_unit_vectors(rng, (n, n_queries), d)
        docs = [data.CorpusDocument(doc_id=f"v{i:05d}", text=f"t{i}", source="a") for i in range(n)]
        ids = [doc.doc_id for doc in docs]

        exact = index.build_exact(docs, vectors)
        for qi in range(n_queries):
            got = [doc for doc, _ in index.search(exact, queries[qi], 10)]
            # independent O(n*d) scan
            scored = sorted(
                ((float(np.dot(vectors[i], queries[qi])), ids[i]) for i in range(n)),
                key=lambda p: (-p[0], p[1]),
            )
            want = [doc for _, doc in scored[:10]]
            assert got == want, f"query {qi}: exact search disagrees with the scan oracle"

        ivf = index.build_ivf(
            docs, vectors, index.IvfParams(k_centroids=300, n_probe=30, kmeans_max_iters=25, kmeans_seed=7)
        )
        recalls, full_recalls = [], []
        for qi in range(n_queries):
            want = {doc for doc, _ in index.search(exact, queries[qi], 10)}
            got = {doc for doc, _ in index.search(ivf, queries[qi], 10)}
            recalls.append(len(want & got) / 10)
            full = {doc for doc, _ in index.search(ivf, queries[qi], 10, n_probe=300)}
            full_recalls.append(len(want & full) / 10)
        recall = float(np.mean(recalls))
        assert recall >= 0.85, f"IVF recall@10 {recall}"
        assert float(np.mean(full_recalls)) == 1.0
        _ok(f"index correctness (exact = oracle on 200 queries; IVF recall@10 {recall:.3f}; n_probe=K -> 1.0)")


# -------------------------------------------------------------------------
# 5. metrics oracle equivalence


def _oracle_dp_distance(a, b):
    n, m = len(a), len(b)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            dist[i][j] = min(dist[i - 1][j - 1] + cost, dist[i - 1][j] + 1, dist[i][j - 1] + 1)
    return dist[n][m]


class TestMetricsOracles:
    def test_levenshtein_vs_independent_dp(self):
        rng = np.random.default_rng(505)
        vocab = ["the", "cat", "sat", "dog", "ran", "slow", "fast", "home", "away"]
        for _ in range(1000):
            a = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(0, 12))]
            b = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(0, 12))]
            assert metrics.token_levenshtein(a, b) == _oracle_dp_distance(a, b)
        _ok("levenshtein matches independent DP (1000 pairs)")

    def test_self_bleu_worked_examples(self):
        assert metrics.self_bleu("one two three four five six", "one two three four five six") == pytest.approx(
            1.0, abs=1e-3
        )
        assert metrics.self_bleu("alpha beta gamma", "delta epsilon zeta") == pytest.approx(0.0, abs=1e-3)
        # hand-evaluated: p1 = 2/3, p2 smoothed = 2/3, p3 smoothed = 1/2, BP = 1
        want = (2 / 3 * 2 / 3 * 1 / 2) ** (1 / 3)
        assert want == pytest.approx(0.6057, abs=1e-3)
        assert metrics.self_bleu("the cat sat", "the cat ran") == pytest.approx(want, abs=1e-3)
        _ok("self-BLEU worked examples (1.0 / 0.0 / 0.6057)")

    def test_z_statistic_properties(self):
        rng = np.random.default_rng(506)
        vocab = [f"w{i}" for i in range(10)]
        for _ in range(8):
            dataset = []
            for i in range(150):
                text = " ".join(vocab[j] for j in rng.integers(0, len(vocab), size=5))
                dataset.append((text, "A" if rng.random() < 0.45 else "B"))
            dataset[0] = (dataset[0][0], "A")
            dataset[1] = (dataset[1][0], "B")
            za = {e.token: e.z for e in metrics.z_statistics(dataset, "A", min_count=5)}
            zb = {e.token: e.z for e in metrics.z_statistics(dataset, "B", min_count=5)}
            doubled = {e.token: e.z for e in metrics.z_statistics(dataset + dataset, "A", min_count=5)}
            for token, z in za.items():
                assert zb[token] == pytest.approx(-z, abs=1e-9)
                assert doubled[token] == pytest.approx(math.sqrt(2) * z, abs=1e-9)
        _ok("z-statistic antisymmetry and sqrt-2 scaling")

    def test_perturbation_histogram_partitions(self):
        rng = np.random.default_rng(507)
        vocab = ["not", "all", "cat", "ran", "3", "tiny"]
        pairs = []
        for i in range(60):
            a = " ".join(vocab[j] for j in rng.integers(0, len(vocab), size=rng.integers(1, 7)))
            b = " ".join(vocab[j] for j in rng.integers(0, len(vocab), size=rng.integers(1, 7)))
            pairs.append(
                metrics.PairedExample(id=f"x{i}", original_text=a, edited_text=b,
                                      original_label="A", new_label="B")
            )
        rep = metrics.aggregate_report(metrics.PairedCorpus(pairs=pairs))
        assert sum(rep.perturbation_counts.values()) == 60
        _ok("perturbation histogram partitions the corpus")


# -------------------------------------------------------------------------
# 6. perturbation detector


class TestPerturbationDetector:
    def test_named_patterns_and_golden_suite(self):
        assert metrics.classify_perturbation(
            "It 's not really funny .", "It 's really funny ."
        ) is metrics.PerturbationType.NEGATION
        assert metrics.classify_perturbation(
            "the movie is a mess", "the movie is a triumph"
        ) is metrics.PerturbationType.LEXICAL
        assert metrics.classify_perturbation(
            "alice met bob", "bob met alice"
        ) is metrics.PerturbationType.RESTRUCTURE
        cases = [json.loads(line) for line in (GOLDEN / "perturbation_cases.jsonl").read_text().splitlines()]
        assert len(cases) == 30
        for case in cases:
            got = metrics.classify_perturbation(case["original"], case["edited"]).value
            assert got == case["expected"], f"{case['original']!r} -> {case['edited']!r}: {got}"
        _ok("perturbation detector (named patterns + 30-case golden suite)")


# -------------------------------------------------------------------------
# 7. prompt bytes


class TestPromptBytes:
    def test_nli_prompt_matches_golden(self):
        template = editor.load_template("nli")
        instance = data.LabeledExample(
            id="mnli-worked",
            task="nli",
            text_a="and my my uh taxes are a hundred and thirty five.",
            text_b="My taxes are $135",
            label="entailment",
        )
        prompt = editor.build_prompt(
            template, instance, ["probably", "over", "under", "estimate"], "contradiction"
        )
        golden = (GOLDEN / "nli_prompt.txt").read_text(encoding="utf-8")
        assert prompt.encode("utf-8") == golden.encode("utf-8")
        assert "List of words: ['probably', 'over', 'under', 'estimate']" in prompt
        assert "definitely True" in prompt and "definitely False" in prompt
        _ok("prompt bytes match the golden file")


# -------------------------------------------------------------------------
# 8 + 9. end-to-end determinism and diversity-ordering sanity


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_fixture")
    cfg = pipeline.PipelineConfig.load(fixtures.write_fixture(root, task="sentiment", n=50, seed=7))
    pipeline.run_ingest(cfg)
    pipeline.run_embed(cfg)
    pipeline.run_train_retriever(cfg)
    pipeline.run_build_index(cfg)
    pipeline.run_generate(cfg)
    return cfg


class TestEndToEnd:
    def test_deterministic_across_runs_and_thread_counts(self, fixture_run, tmp_path):
        cfg = fixture_run
        first = cfg.records_path.read_bytes()
        rerun = tmp_path / "rerun.jsonl"
        pipeline.run_generate(cfg, out_path=rerun)
        assert rerun.read_bytes() == first
        try:
            cfg.edit_max_in_flight = 7
            threaded = tmp_path / "threaded.jsonl"
            pipeline.run_generate(cfg, out_path=threaded)
        finally:
            cfg.edit_max_in_flight = 2
        assert threaded.read_bytes() == first

        records = data.load_records(cfg.records_path)
        assert len(records) == 50
        corpus_ids = {doc.doc_id for doc in data.load_corpus(cfg.corpus_norm)}
        for rec in records:
            assert rec.stage == "core"
            assert rec.target_label == data.flip_label("sentiment", rec.original_label)
            assert rec.keywords and rec.retrieved_doc_ids
            assert set(rec.retrieved_doc_ids) <= corpus_ids
        prov = data.read_provenance(cfg.records_path)
        assert prov["config_hash"] == cfg.config_hash()
        assert prov["inputs"]
        _ok("end-to-end determinism on the 50-example fixture")

    def test_diversity_ordering_sanity(self, fixture_run, tmp_path):
        cfg = fixture_run
        retrieved_path = tmp_path / "retrieved.jsonl"
        pipeline.run_retrieve(cfg, out_path=retrieved_path, as_records=True)
        retrieved = data.load_records(retrieved_path)
        for i, rec in enumerate(retrieved):
            rec.source_id = f"retr-{i}"
        merged = tmp_path / "merged.jsonl"
        data.write_records(data.load_records(cfg.records_path) + retrieved, merged)
        rep = pipeline.run_evaluate(cfg, records_path=merged, outdir=tmp_path / "report", figures=False)
        assert 0.0 < rep.stage_self_bleu["core"] < 1.0
        assert rep.stage_self_bleu["retrieved_only"] < rep.stage_self_bleu["core"]
        assert rep.sanity["diversity_ordering_ok"]
        _ok(
            "diversity ordering sanity (retrieval "
            f"{rep.stage_self_bleu['retrieved_only']:.3f} < core {rep.stage_self_bleu['core']:.3f} < 1.0)"
        )


# -------------------------------------------------------------------------
# 10. [SECONDARY] annotation round trip through the HTTP API


class TestAnnotationRoundTrip:
    def test_secondary_annotation_round_trip(self, fixture_run):
        from fastapi.testclient import TestClient

        from cfgen import server
        from cfgen.cli import build_annotation_app

        cfg = fixture_run
        journal = cfg.path("acceptance_journal.jsonl")
        if journal.exists():
            journal.unlink()
        app = build_annotation_app(cfg, journal=str(journal))
        client = TestClient(app)

        task = client.get("/api/tasks/next", params={"condition": "retrieval"}).json()
        assert task["condition"] == "retrieval"
        assert len(task["retrieved"]) == 3

        unmodified = client.post(
            f"/api/tasks/{task['task_id']}/submission",
            json={"edited_text": task["editable_text"]},
        )
        assert unmodified.status_code == 422

        edited = task["editable_text"] + " but the mood soured"
        accepted = client.post(
            f"/api/tasks/{task['task_id']}/submission",
            json={"edited_text": edited, "annotator_id": "acc"},
        )
        assert accepted.status_code == 200
        computed = accepted.json()["computed"]
        assert computed["self_bleu"] == pytest.approx(metrics.self_bleu(task["editable_text"], edited))
        assert computed["levenshtein"] == pytest.approx(
            metrics.norm_levenshtein(task["editable_text"], edited)
        )
        assert computed["perturbation_type"] == metrics.classify_perturbation(
            task["editable_text"], edited
        ).value

        submitted = 1
        while submitted < 10:
            nxt = client.get("/api/tasks/next", params={"annotator_id": f"bot{submitted % 3}"})
            body = nxt.json()
            resp = client.post(
                f"/api/tasks/{body['task_id']}/submission",
                json={
                    "edited_text": body["editable_text"] + f" take {submitted}",
                    "annotator_id": f"bot{submitted % 3}",
                },
            )
            assert resp.status_code == 200
            submitted += 1

        report = client.get("/api/report").json()
        assert report["total_submissions"] == 10
        tasks_by_id = {t.task_id: t for t in app.state.annotation_tasks}
        assert report == server.replay_report(journal, tasks_by_id)
        _ok("[secondary] annotation round trip and journal replay")
