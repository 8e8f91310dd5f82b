import numpy as np
import pytest

from cfgen import index
from cfgen.data import CorpusDocument


def _docs(n, prefix="d"):
    return [CorpusDocument(doc_id=f"{prefix}{i:05d}", text=f"text {i}", source="t") for i in range(n)]


def _unit(rng, n, d):
    mat = rng.normal(size=(n, d))
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def brute_force_top_k(doc_ids, vectors, query, k):
    """Independent per-row scan oracle with (score desc, doc_id asc) order."""
    scored = [(float(np.dot(vectors[i], query)), doc_ids[i]) for i in range(len(doc_ids))]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [(doc_id, score) for score, doc_id in scored[:k]]


class TestExact:
    def test_single_document(self):
        idx = index.build_exact(_docs(1), np.array([[1.0, 0.0]]))
        assert index.search(idx, np.array([0.3, 0.7]), 1)[0][0] == "d00000"

    def test_zero_documents_error(self):
        with pytest.raises(index.IndexError_):
            index.build_exact([], np.zeros((0, 4)))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        docs = _docs(100)
        vecs = _unit(rng, 100, 16)
        idx = index.build_exact(docs, vecs)
        ids = [d.doc_id for d in docs]
        for _ in range(20):
            q = _unit(rng, 1, 16)[0]
            got = index.search(idx, q, 10)
            want = brute_force_top_k(ids, vecs, q, 10)
            assert [g[0] for g in got] == [w[0] for w in want]

    def test_hand_example(self):
        docs = [CorpusDocument(doc_id="a", text="x", source=""), CorpusDocument(doc_id="b", text="y", source="")]
        idx = index.build_exact(docs, np.array([[1.0, 0.0], [0.0, 1.0]]))
        out = index.search(idx, np.array([0.9, 0.1]), 1)
        assert out == [("a", pytest.approx(0.9))]

    def test_k_larger_than_corpus(self):
        rng = np.random.default_rng(1)
        idx = index.build_exact(_docs(5), _unit(rng, 5, 8))
        assert len(index.search(idx, _unit(rng, 1, 8)[0], 50)) == 5

    def test_tie_break_ascending_doc_id(self):
        docs = [CorpusDocument(doc_id=i, text="t", source="") for i in ("z", "a", "m")]
        vecs = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        idx = index.build_exact(docs, vecs)
        assert [d for d, _ in index.search(idx, np.array([1.0, 0.0]), 3)] == ["a", "m", "z"]

    def test_duplicate_doc_id_rejected(self):
        docs = [CorpusDocument(doc_id="a", text="x", source=""), CorpusDocument(doc_id="a", text="y", source="")]
        with pytest.raises(index.IndexError_):
            index.build_exact(docs, np.zeros((2, 4)))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(1)
        idx = index.build_exact(_docs(3), _unit(rng, 3, 8))
        with pytest.raises(index.IndexError_):
            index.search(idx, np.zeros(9), 1)


class TestKMeans:
    def test_two_separated_clouds(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(6, 4)) * 0.05 + np.array([10.0, 0, 0, 0])
        b = rng.normal(size=(6, 4)) * 0.05 + np.array([-10.0, 0, 0, 0])
        pts = np.vstack([a, b])
        _, assign, _ = index.kmeans(pts, 2, seed=3)
        # every point in cloud a shares a label; cloud b gets the other
        assert len(set(assign[:6])) == 1
        assert len(set(assign[6:])) == 1
        assert assign[0] != assign[6]

    def test_two_clouds_match_exhaustive_partition(self):
        # brute-force the best 2-partition by sum of squared distances on
        # <= 12 points and compare objectives
        from itertools import combinations

        rng = np.random.default_rng(11)
        pts = np.vstack([
            rng.normal(size=(5, 3)) * 0.2 + np.array([4.0, 0, 0]),
            rng.normal(size=(5, 3)) * 0.2 + np.array([-4.0, 0, 0]),
        ])

        def objective(groups):
            total = 0.0
            for g in groups:
                sub = pts[list(g)]
                total += float(((sub - sub.mean(axis=0)) ** 2).sum())
            return total

        best = None
        all_idx = set(range(len(pts)))
        for size in range(1, len(pts)):
            for left in combinations(range(len(pts)), size):
                val = objective([left, tuple(all_idx - set(left))])
                best = val if best is None else min(best, val)
        _, assign, history = index.kmeans(pts, 2, seed=0)
        got = objective([tuple(np.flatnonzero(assign == c)) for c in (0, 1)])
        assert got == pytest.approx(best, rel=1e-9)

    def test_k_equals_n_degenerate(self):
        rng = np.random.default_rng(2)
        pts = _unit(rng, 8, 4)
        centroids, assign, _ = index.kmeans(pts, 8, seed=1)
        assert sorted(assign.tolist()) == list(range(8))
        # every point is its own centroid
        for i, c in enumerate(assign):
            assert np.allclose(centroids[c], pts[i])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pts = _unit(rng, 50, 8)
        c1, a1, _ = index.kmeans(pts, 5, seed=42)
        c2, a2, _ = index.kmeans(pts, 5, seed=42)
        assert np.array_equal(c1, c2)
        assert np.array_equal(a1, a2)

    def test_objective_non_increasing(self):
        rng = np.random.default_rng(4)
        for seed in range(5):
            pts = rng.normal(size=(120, 6))
            _, _, history = index.kmeans(pts, 10, seed=seed)
            assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_k_exceeds_corpus(self):
        with pytest.raises(index.IndexError_):
            index.kmeans(np.zeros((3, 2)), 4)


class TestIvf:
    def test_probe_all_equals_exact(self):
        rng = np.random.default_rng(8)
        docs = _docs(60)
        vecs = _unit(rng, 60, 8)
        exact = index.build_exact(docs, vecs)
        params = index.IvfParams(k_centroids=10, n_probe=10, kmeans_seed=5)
        ivf = index.build_ivf(docs, vecs, params)
        for _ in range(15):
            q = _unit(rng, 1, 8)[0]
            assert index.search(ivf, q, 7) == index.search(exact, q, 7)

    def test_same_seed_identical_centroids(self):
        rng = np.random.default_rng(9)
        docs = _docs(40)
        vecs = _unit(rng, 40, 8)
        params = index.IvfParams(k_centroids=6, n_probe=2, kmeans_seed=11)
        a = index.build_ivf(docs, vecs, params)
        b = index.build_ivf(docs, vecs, params)
        assert np.array_equal(a.ivf.centroids, b.ivf.centroids)

    def test_k_exceeds_corpus_size(self):
        rng = np.random.default_rng(1)
        with pytest.raises(index.IndexError_):
            index.build_ivf(_docs(5), _unit(rng, 5, 4), index.IvfParams(k_centroids=6, n_probe=1))

    def test_n_probe_validation(self):
        with pytest.raises(index.IndexError_):
            index.IvfParams(k_centroids=10, n_probe=11)
        with pytest.raises(index.IndexError_):
            index.IvfParams(k_centroids=10, n_probe=0)

    def test_recall_monotone_in_n_probe(self):
        rng = np.random.default_rng(12)
        n, d = 2000, 32
        centers = _unit(rng, 40, d)
        vecs = centers[rng.integers(0, 40, size=n)] + 0.2 * rng.normal(size=(n, d))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        docs = _docs(n)
        exact = index.build_exact(docs, vecs)
        ivf = index.build_ivf(docs, vecs, index.IvfParams(k_centroids=50, n_probe=5, kmeans_seed=0))
        queries = _unit(rng, 40, d)
        prev = -1.0
        for n_probe in (1, 5, 20, 50):
            recalls = []
            for q in queries:
                want = {doc for doc, _ in index.search(exact, q, 10)}
                got = {doc for doc, _ in index.search(ivf, q, 10, n_probe=n_probe)}
                recalls.append(len(want & got) / 10)
            mean = float(np.mean(recalls))
            assert mean >= prev - 1e-9
            prev = mean
        assert prev == 1.0  # n_probe == k probes everything


class TestPersistence:
    def test_ivf_round_trip_search_equal(self, tmp_path):
        rng = np.random.default_rng(13)
        docs = _docs(1000)
        vecs = _unit(rng, 1000, 16)
        ivf = index.build_ivf(docs, vecs, index.IvfParams(k_centroids=20, n_probe=5, kmeans_seed=2))
        path = tmp_path / "index.cfix"
        index.save_index(ivf, path, meta={"config_hash": "x"})
        loaded = index.load_index(path)
        assert loaded.kind == "ivf"
        assert loaded.ivf.params == ivf.ivf.params
        for _ in range(100):
            q = _unit(rng, 1, 16)[0]
            assert index.search(loaded, q, 10) == index.search(ivf, q, 10)

    def test_exact_round_trip_kind_preserved(self, tmp_path):
        rng = np.random.default_rng(14)
        idx = index.build_exact(_docs(10), _unit(rng, 10, 4))
        path = tmp_path / "index.cfix"
        index.save_index(idx, path)
        assert index.load_index(path).kind == "exact"

    def test_truncated_file(self, tmp_path):
        rng = np.random.default_rng(15)
        idx = index.build_exact(_docs(10), _unit(rng, 10, 4))
        path = tmp_path / "index.cfix"
        index.save_index(idx, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(index.IndexError_, match="truncated"):
            index.load_index(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "index.cfix"
        path.write_bytes(b"WHAT" + b"\x00" * 64)
        with pytest.raises(index.IndexError_, match="magic"):
            index.load_index(path)


class TestExactOracleProperty:
    def test_random_corpora_queries_and_k(self):
        rng = np.random.default_rng(16)
        for _ in range(8):
            n = int(rng.integers(5, 80))
            d = int(rng.integers(2, 24))
            docs = _docs(n)
            vecs = _unit(rng, n, d)
            idx = index.build_exact(docs, vecs)
            ids = [doc.doc_id for doc in docs]
            for _ in range(4):
                q = _unit(rng, 1, d)[0]
                k = int(rng.integers(1, n + 3))
                got = index.search(idx, q, k)
                want = brute_force_top_k(ids, vecs, q, k)
                assert [g[0] for g in got] == [w[0] for w in want]
                for (_, gs), (_, ws) in zip(got, want):
                    assert gs == pytest.approx(ws, rel=1e-12, abs=1e-12)
