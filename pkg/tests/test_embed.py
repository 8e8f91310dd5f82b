import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from cfgen import embed


class TestHashedEmbed:
    def test_repeated_trigram_is_one_hot(self):
        vec = embed.hashed_test_embed("aaaa", 16)
        assert np.count_nonzero(vec) == 1
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-12
        assert abs(abs(vec).max() - 1.0) < 1e-12

    def test_self_cosine_is_one(self):
        for text in ("hello world", "x", "ab", "the same text twice"):
            v = embed.hashed_test_embed(text, 64)
            if np.linalg.norm(v) > 0:
                assert abs(float(v @ v) - 1.0) < 1e-12

    def test_deterministic(self):
        a = embed.hashed_test_embed("some text", 128, seed=3)
        b = embed.hashed_test_embed("some text", 128, seed=3)
        assert np.array_equal(a, b)
        c = embed.hashed_test_embed("some text", 128, seed=4)
        assert not np.array_equal(a, c)

    def test_disjoint_trigram_collision_rate(self):
        # texts are built from disjoint alphabets so their 3-gram sets are
        # disjoint; at dimension 4096 with <= 10 grams per side the
        # birthday bound keeps the per-pair collision probability < 0.025
        rng = np.random.default_rng(42)
        dim = 4096
        collisions = 0
        trials = 1000
        for _ in range(trials):
            n1, n2 = rng.integers(3, 13, size=2)  # gram counts 1..10
            t1 = "".join(chr(97 + int(c)) for c in rng.integers(0, 13, size=n1 + 2))
            t2 = "".join(chr(110 + int(c)) for c in rng.integers(0, 13, size=n2 + 2))
            v1 = embed.hashed_test_embed(t1, dim)
            v2 = embed.hashed_test_embed(t2, dim)
            if abs(float(v1 @ v2)) > 1e-12:
                collisions += 1
        assert collisions / trials < 0.025


class TestEmbedBatch:
    def test_same_text_identical_rows(self):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=32)
        mat = embed.embed_batch(["same words", "same words"], cfg)
        assert np.array_equal(mat[0], mat[1])

    def test_rows_unit_norm(self):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=64)
        mat = embed.embed_batch(["first text", "second text", "third text"], cfg)
        assert mat.shape == (3, 64)
        assert np.allclose(np.linalg.norm(mat, axis=1), 1.0, atol=1e-9)

    def test_batching_invariance(self):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=48)
        t = ["one text", "two text"]
        u = ["three text", "four text", "five text"]
        combined = embed.embed_batch(t + u, cfg)
        stacked = np.vstack([embed.embed_batch(t, cfg), embed.embed_batch(u, cfg)])
        assert np.array_equal(combined, stacked)

    def test_empty_text_rejected(self):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=32)
        with pytest.raises(ValueError):
            embed.embed_batch(["fine", "   "], cfg)

    def test_remote_requires_endpoint(self):
        with pytest.raises(ValueError):
            embed.EmbeddingBackendConfig(kind="remote", dimension=32)

    def test_dimension_minimum(self):
        with pytest.raises(ValueError):
            embed.EmbeddingBackendConfig(kind="hashed_test", dimension=1)


class _ServiceState:
    def __init__(self, dimension, fail_first=0, nan_row=False):
        self.dimension = dimension
        self.fail_first = fail_first
        self.nan_row = nan_row
        self.requests = 0
        self.batch_sizes = []


def _make_server(state):
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            state.requests += 1
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            texts = body["texts"]
            state.batch_sizes.append(len(texts))
            if state.requests <= state.fail_first:
                self.send_response(429)
                self.end_headers()
                return
            rows = []
            for i, _ in enumerate(texts):
                row = [1.0 if j == i % state.dimension else 0.0 for j in range(state.dimension)]
                rows.append(row)
            if state.nan_row:
                rows[0][0] = float("nan")
            payload = json.dumps({"embeddings": rows}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server


class TestRemoteBackend:
    def _cfg(self, server, dimension, batch_size=4, **kw):
        return embed.EmbeddingBackendConfig(
            kind="remote",
            dimension=dimension,
            batch_size=batch_size,
            endpoint=f"http://127.0.0.1:{server.server_address[1]}/embed",
            backoff_base=0.01,
            **kw,
        )

    def test_request_count_is_ceil_n_over_batch(self):
        state = _ServiceState(dimension=8)
        server = _make_server(state)
        try:
            cfg = self._cfg(server, 8, batch_size=4)
            mat = embed.embed_batch([f"text {i}" for i in range(10)], cfg)
            assert mat.shape == (10, 8)
            assert state.requests == 3  # ceil(10 / 4)
            assert max(state.batch_sizes) <= 4
        finally:
            server.shutdown()

    def test_retry_on_429_then_success(self):
        state = _ServiceState(dimension=8, fail_first=2)
        server = _make_server(state)
        try:
            cfg = self._cfg(server, 8, batch_size=8)
            mat = embed.embed_batch(["a text"], cfg)
            assert mat.shape == (1, 8)
            assert state.requests == 3
        finally:
            server.shutdown()

    def test_dimension_mismatch_is_error(self):
        state = _ServiceState(dimension=6)
        server = _make_server(state)
        try:
            cfg = self._cfg(server, 8)
            with pytest.raises(embed.EmbeddingError, match="dimension"):
                embed.embed_batch(["a text"], cfg)
        finally:
            server.shutdown()

    def test_nan_response_is_error(self):
        state = _ServiceState(dimension=8, nan_row=True)
        server = _make_server(state)
        try:
            cfg = self._cfg(server, 8)
            with pytest.raises(embed.EmbeddingError, match="finite"):
                embed.embed_batch(["a text"], cfg)
        finally:
            server.shutdown()

    def test_exhausted_retries_raise(self):
        state = _ServiceState(dimension=8, fail_first=100)
        server = _make_server(state)
        try:
            cfg = self._cfg(server, 8, retries=3)
            with pytest.raises(embed.EmbeddingError, match="3 attempts"):
                embed.embed_batch(["a text"], cfg)
            assert state.requests == 3
        finally:
            server.shutdown()


class TestEmbeddingStore:
    def test_round_trip(self, tmp_path):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=32, seed=5)
        store = embed.EmbeddingStore(dimension=32, backend_id=cfg.backend_id)
        texts = [f"text number {i}" for i in range(7)]
        embed.ensure_embeddings(texts, cfg, store)
        path = tmp_path / "cache.bin"
        store.save(path)
        loaded = embed.EmbeddingStore.load(path)
        assert loaded.backend_id == store.backend_id
        assert np.array_equal(loaded.matrix_for(texts), store.matrix_for(texts))

    def test_missing_text_raises(self):
        store = embed.EmbeddingStore(dimension=8, backend_id="test")
        with pytest.raises(KeyError):
            store.get("never added")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "cache.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(embed.EmbeddingError, match="magic"):
            embed.EmbeddingStore.load(path)

    def test_ensure_computes_only_missing(self):
        cfg = embed.EmbeddingBackendConfig(kind="hashed_test", dimension=16)
        store = embed.EmbeddingStore(dimension=16, backend_id=cfg.backend_id)
        embed.ensure_embeddings(["a text"], cfg, store)
        before = len(store)
        embed.ensure_embeddings(["a text", "b text"], cfg, store)
        assert len(store) == before + 1
