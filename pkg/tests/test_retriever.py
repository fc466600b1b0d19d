"""Dual-encoder retriever tests: encoding, scoring, exact search, distributions, IO."""
import numpy as np
import pytest

from raglab.corpus import build_store
from raglab.errors import DimensionError, EmptyIndex, EmptyInput, ParseError
from raglab.retriever import (Encoder, EmbeddingIndex, RetrievalContext, build_index,
                              encode, encoder_fingerprint, init_dual_encoders, is_stale,
                              load_encoders, load_index, retrieval_distribution,
                              save_encoders, save_index, score, search)
from raglab.vocab import UNK_ID, Vocabulary


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary([f"w{i}" for i in range(50)])


@pytest.fixture(scope="module")
def encoders(vocab):
    return init_dual_encoders(vocab, dim=16, seed=3)


class TestEncode:
    def test_single_token_is_its_row(self, encoders):
        q, _ = encoders
        emb = encode(q, "w5")
        row = q.table[q.vocab.id_of("w5")]
        assert np.array_equal(emb, row)

    def test_two_tokens_mean(self, encoders):
        q, _ = encoders
        r1 = q.table[q.vocab.id_of("w1")]
        r2 = q.table[q.vocab.id_of("w2")]
        assert np.allclose(encode(q, "w1 w2"), (r1 + r2) / 2)

    def test_permutation_invariance(self, encoders):
        # oracle: recompute both orders and compare
        q, _ = encoders
        assert np.allclose(encode(q, "w1 w2 w3"), encode(q, "w3 w1 w2"))

    def test_unknown_maps_to_unk(self, encoders):
        q, _ = encoders
        assert np.array_equal(encode(q, "zzz"), q.table[UNK_ID])

    def test_empty_input(self, encoders):
        q, _ = encoders
        with pytest.raises(EmptyInput):
            encode(q, "   ")

    def test_identical_initialization(self, encoders):
        q, d = encoders
        assert np.array_equal(q.table, d.table)
        assert q.table is not d.table


class TestScore:
    def test_hand_arithmetic(self):
        assert score(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0

    def test_orthogonal(self):
        assert score(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == 0.0

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        q, d = rng.normal(size=8), rng.normal(size=8)
        assert score(q, d) == score(d, q)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            score(np.zeros(3), np.zeros(4))


def _toy_store(n_chunks, words_per_chunk=5):
    docs = []
    rng = np.random.default_rng(12)
    for i in range(n_chunks):
        words = [f"w{int(rng.integers(50))}" for _ in range(words_per_chunk)]
        docs.append(("t", f"c{i} " + " ".join(words)))
    store = build_store(docs, 50)
    assert len(store) == n_chunks
    return store


class TestSearch:
    def test_k1_matches_brute_force(self, vocab):
        q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        store = _toy_store(3)
        index = build_index(store, d_enc)
        q = encode(q_enc, "w1 w2")
        scores = [float(np.dot(row, q)) for row in index.matrix]
        best = max(range(3), key=lambda i: (scores[i], -i))
        assert search(index, q, 1)[0].chunk_id == best

    def test_k_greater_than_n(self, vocab):
        q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        index = build_index(_toy_store(4), d_enc)
        results = search(index, encode(q_enc, "w3"), 10)
        assert len(results) == 4
        assert [r.rank for r in results] == [1, 2, 3, 4]
        assert all(results[i].score >= results[i + 1].score for i in range(3))

    def test_tie_broken_by_lower_id(self, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        store = build_store([("a", "w1 w2"), ("b", "w9"), ("c", "w1 w2")], 50)
        index = build_index(store, d_enc)
        results = search(index, encode(d_enc, "w1 w2"), 3)
        tied = [r for r in results if r.chunk_id in (0, 2)]
        assert tied[0].chunk_id == 0 and tied[1].chunk_id == 2

    def test_brute_force_oracle_200_queries(self, vocab):
        # full-scan oracle over 1000 chunks: rank the score vector with an
        # independent pure-python sort; ids and order must match exactly
        q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        store = _toy_store(1000)
        index = build_index(store, d_enc)
        rng = np.random.default_rng(77)
        for _ in range(200):
            words = " ".join(f"w{int(rng.integers(50))}" for _ in range(4))
            q = encode(q_enc, words)
            k = int(rng.integers(1, 20))
            got = [(r.chunk_id, r.score) for r in search(index, q, k)]
            scores = [float(s) for s in index.matrix @ q]
            order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
            expected = [(i, scores[i]) for i in order[:k]]
            assert got == expected

    def test_empty_index(self, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        index = EmbeddingIndex(matrix=np.zeros((0, 16), dtype=np.float32),
                               store=_toy_store(1), fingerprint=b"0" * 32)
        with pytest.raises(EmptyIndex):
            search(index, np.zeros(16, dtype=np.float32), 1)

    def test_text_query_requires_encoder(self, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        index = build_index(_toy_store(3), d_enc)
        with pytest.raises(ValueError):
            search(index, "w1", 1)


class TestRetrievalDistribution:
    def test_two_scores_softmax(self, vocab):
        from raglab.retriever import RetrievalResult
        results = [RetrievalResult(chunk_id=0, score=1.0, rank=1),
                   RetrievalResult(chunk_id=1, score=0.0, rank=2)]
        probs = retrieval_distribution(results)
        assert probs[0] == pytest.approx(0.73106, abs=1e-5)
        assert probs[1] == pytest.approx(0.26894, abs=1e-5)

    def test_equal_scores_uniform(self):
        from raglab.retriever import RetrievalResult
        results = [RetrievalResult(chunk_id=i, score=2.5, rank=i + 1) for i in range(4)]
        assert np.allclose(retrieval_distribution(results), 0.25)

    def test_single_result(self):
        from raglab.retriever import RetrievalResult
        probs = retrieval_distribution([RetrievalResult(chunk_id=0, score=-3.0, rank=1)])
        assert probs.tolist() == [1.0]

    def test_sums_to_one(self):
        from raglab.retriever import RetrievalResult
        rng = np.random.default_rng(5)
        for _ in range(50):
            results = [RetrievalResult(chunk_id=i, score=float(s), rank=i + 1)
                       for i, s in enumerate(rng.normal(size=8) * 10)]
            assert abs(retrieval_distribution(results).sum() - 1.0) < 1e-9

    def test_shift_invariance(self):
        from raglab.retriever import RetrievalResult
        rng = np.random.default_rng(6)
        scores = rng.normal(size=6)
        a = [RetrievalResult(chunk_id=i, score=float(s), rank=i + 1)
             for i, s in enumerate(scores)]
        b = [RetrievalResult(chunk_id=i, score=float(s + 123.0), rank=i + 1)
             for i, s in enumerate(scores)]
        assert np.abs(retrieval_distribution(a) - retrieval_distribution(b)).max() < 1e-9


class TestFingerprint:
    def test_any_mutation_changes_fingerprint(self, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        fp = encoder_fingerprint(d_enc)
        mutated = Encoder(kind="document", vocab=vocab, table=d_enc.table.copy())
        mutated.table[10, 3] += 1e-6
        assert encoder_fingerprint(mutated) != fp

    def test_staleness_detection(self, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        index = build_index(_toy_store(3), d_enc)
        assert not is_stale(index, d_enc)
        d_enc.table[0, 0] += 0.5
        assert is_stale(index, d_enc)


class TestIO:
    def test_index_round_trip(self, tmp_path, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        store = _toy_store(7)
        index = build_index(store, d_enc)
        path = tmp_path / "x.ridx"
        save_index(index, path)
        loaded = load_index(path, store)
        assert np.array_equal(loaded.matrix, index.matrix)
        assert loaded.fingerprint == index.fingerprint

    def test_index_store_size_mismatch(self, tmp_path, vocab):
        _, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        index = build_index(_toy_store(7), d_enc)
        path = tmp_path / "x.ridx"
        save_index(index, path)
        with pytest.raises(ParseError):
            load_index(path, _toy_store(6))

    def test_encoder_round_trip(self, tmp_path, vocab):
        q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        d_enc.trainable = False
        path = tmp_path / "e.rdec"
        save_encoders(q_enc, d_enc, path)
        q2, d2 = load_encoders(path)
        assert np.array_equal(q2.table, q_enc.table)
        assert np.array_equal(d2.table, d_enc.table)
        assert q2.vocab == vocab
        assert q2.trainable and not d2.trainable

    def test_retrieval_context(self, vocab):
        q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=5)
        store = _toy_store(10)
        rctx = RetrievalContext(store=store, index=build_index(store, d_enc),
                                query_encoder=q_enc)
        pairs = rctx.weighted_chunks("w1 w2 w3", 4)
        assert len(pairs) == 4
        assert abs(sum(w for _, w in pairs) - 1.0) < 1e-9
