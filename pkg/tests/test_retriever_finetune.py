"""LM-supervised retriever tuning tests: targets, KL, caching, training dynamics."""
import math

import numpy as np
import pytest

import raglab.retriever_finetune as rft
from raglab.corpus import build_store
from raglab.errors import ContractViolation, NoEligibleChunks
from raglab.lm import LanguageModel, LMConfig
from raglab.retriever import (RetrievalContext, build_index, encoder_fingerprint,
                              init_dual_encoders, save_index, softmax)
from raglab.retriever_finetune import (LSRBatch, LSRConfig, kl_clamp_warnings, kl_loss,
                                       load_supervision_cache, lsr_distribution,
                                       lsr_loss_and_query_grad, lsr_train,
                                       make_corpus_examples, make_mti_examples,
                                       mean_reciprocal_rank, precompute_supervision,
                                       reset_kl_clamp_warnings, save_supervision_cache)
from raglab.lm_finetune import FTExample
from raglab.vocab import Vocabulary


def words(n, tag="w"):
    return " ".join(f"{tag}{i}" for i in range(n))


class TestMakeCorpusExamples:
    def test_120_token_chunk_split(self):
        store = build_store([("s", words(120))], 200)
        examples, skipped = make_corpus_examples(store, 10, seed=0)
        assert skipped == 0 and len(examples) == 1
        ex = examples[0]
        assert ex.x == " ".join(f"w{i}" for i in range(50))
        assert ex.y == " ".join(f"w{i}" for i in range(70, 120))
        assert ex.origin == "corpus"

    def test_exactly_100_tokens_eligible(self):
        store = build_store([("s", words(100))], 200)
        examples, _ = make_corpus_examples(store, 10, seed=0)
        assert len(examples) == 1
        assert examples[0].x.split() == [f"w{i}" for i in range(50)]
        assert examples[0].y.split() == [f"w{i}" for i in range(50, 100)]

    def test_short_chunk_skipped_and_counted(self):
        store = build_store([("s", words(80)), ("s", words(130, "v"))], 200)
        examples, skipped = make_corpus_examples(store, 10, seed=0)
        assert skipped == 1 and len(examples) == 1

    def test_sample_size_exhaustion(self):
        store = build_store([("s", words(110, f"t{j}x")) for j in range(5)], 200)
        examples, _ = make_corpus_examples(store, 50, seed=1)
        assert len(examples) == 5
        assert len({e.x for e in examples}) == 5

    def test_no_eligible_chunks(self):
        store = build_store([("s", words(20))], 200)
        with pytest.raises(NoEligibleChunks):
            make_corpus_examples(store, 5, seed=0)

    def test_mti_examples(self):
        ft = [FTExample(task_name="q", category="open_qa", instruction="what is x",
                        output="y")]
        out = make_mti_examples(ft)
        assert out[0].x == "what is x" and out[0].y == "y" and out[0].origin == "mti"


class TestLsrDistribution:
    def test_equal_scores_uniform(self):
        t = lsr_distribution(np.log([0.3, 0.3, 0.3]), tau=0.5)
        assert np.allclose(t.probs, 1 / 3)

    def test_direct_evaluation_oracle(self):
        # probabilities [0.9, 0.5] at tau 0.2 -> softmax([4.5, 2.5])
        t = lsr_distribution(np.log([0.9, 0.5]), tau=0.2)
        assert t.probs[0] == pytest.approx(0.8808, abs=1e-4)
        assert t.probs[1] == pytest.approx(0.1192, abs=1e-4)

    def test_high_temperature_limit(self):
        t = lsr_distribution(np.log([0.9, 0.1, 0.4]), tau=1e6)
        assert np.abs(t.probs - 1 / 3).max() < 1e-6

    def test_per_token_average(self):
        lp = np.array([-10.0, -20.0])
        t = lsr_distribution(lp, tau=0.2, normalization="tok", y_token_count=10)
        expected = softmax(np.exp(lp / 10) / 0.2)
        assert np.allclose(t.probs, expected)

    def test_auto_switches_on_length(self):
        lp = np.array([-3.0, -5.0])
        short = lsr_distribution(lp, 0.1, "auto", y_token_count=5)
        seq = lsr_distribution(lp, 0.1, "seq")
        assert np.allclose(short.probs, seq.probs)
        long = lsr_distribution(lp, 0.1, "auto", y_token_count=50)
        tok = lsr_distribution(lp, 0.1, "tok", y_token_count=50)
        assert np.allclose(long.probs, tok.probs)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            lsr_distribution(np.log([0.5, 0.5]), tau=0.0)

    def test_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            lp = -rng.exponential(5.0, size=8)
            t = lsr_distribution(lp, tau=0.01)
            assert abs(t.probs.sum() - 1.0) < 1e-9


class TestKlLoss:
    def test_identical_is_zero(self):
        p = np.array([0.25, 0.25, 0.5])
        assert kl_loss(p, p.copy()) == 0.0

    def test_hand_oracle(self):
        # KL([0.7311, 0.2689] || [0.5, 0.5]) = 0.1110 nats
        p = np.array([0.7311, 0.2689])
        assert kl_loss(p, np.array([0.5, 0.5])) == pytest.approx(0.1110, abs=1e-3)

    def test_asymmetry(self):
        p = np.array([0.7311, 0.2689])
        q = np.array([0.5, 0.5])
        assert kl_loss(p, q) != kl_loss(q, p)

    def test_non_negativity_10000_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            k = int(rng.integers(2, 8))
            p = softmax(rng.normal(size=k) * 3)
            q = softmax(rng.normal(size=k) * 3)
            kl = kl_loss(p, q)
            assert kl >= 0.0
            if np.abs(p - q).max() < 1e-12:
                assert kl == 0.0
            if np.abs(p - q).max() > 1e-6:
                assert kl > 0.0

    def test_zero_entry_clamped_with_counter(self):
        reset_kl_clamp_warnings()
        p = np.array([0.5, 0.5])
        value = kl_loss(p, np.array([1.0, 0.0]))
        assert math.isfinite(value)
        assert kl_clamp_warnings() == 1
        reset_kl_clamp_warnings()

    def test_shift_invariance_of_retrieval_softmax(self):
        scores = np.array([1.0, -0.5, 2.0, 0.0])
        target = softmax(np.array([0.5, 0.5, 1.0, 0.1]))
        a = kl_loss(softmax(scores), target)
        b = kl_loss(softmax(scores + 1234.5), target)
        assert abs(a - b) < 1e-9


@pytest.fixture(scope="module")
def pipeline():
    """Small store + encoders + LM, enough to precompute real supervision."""
    docs = [("s", f"the color of ent{i} is val{i % 5} " + words(4, f"f{i}n"))
            for i in range(12)]
    store = build_store(docs, 60)
    texts = [c.text for c in store.chunks]
    vocab = Vocabulary.build(texts + ["what is the color of"])
    q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=4)
    index = build_index(store, d_enc)
    rctx = RetrievalContext(store=store, index=index, query_encoder=q_enc)
    model = LanguageModel(vocab, LMConfig(dim=16, heads=2, layers=2, window=64), seed=5)
    examples = [rft.LSRExample(x=f"what is the color of ent{i}", y=f"val{i % 5}",
                               origin="corpus" if i % 3 else "mti") for i in range(6)]
    return rctx, model, examples, d_enc, q_enc


class TestPrecomputeSupervision:
    def test_k_chunks_per_example(self, pipeline):
        rctx, model, examples, _, _ = pipeline
        batches = precompute_supervision(examples, rctx, model, k=10)
        assert all(len(b.chunk_ids) == 10 for b in batches)
        assert all(np.isfinite(b.lm_logprobs).all() for b in batches)
        assert all(b.lm_logprobs.max() <= 0 for b in batches)

    def test_k_must_be_at_least_two(self, pipeline):
        rctx, model, examples, _, _ = pipeline
        with pytest.raises(ValueError):
            precompute_supervision(examples, rctx, model, k=1)

    def test_cache_round_trip_bit_identical(self, pipeline, tmp_path):
        rctx, model, examples, _, _ = pipeline
        p1, p2 = tmp_path / "a.lsr", tmp_path / "b.lsr"
        batches = precompute_supervision(examples, rctx, model, k=4, cache_path=p1)
        save_supervision_cache(load_supervision_cache(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()
        loaded = load_supervision_cache(p1)
        for a, b in zip(batches, loaded):
            assert a.x_text == b.x_text and a.origin == b.origin
            assert np.array_equal(a.chunk_ids, b.chunk_ids)
            assert np.array_equal(a.lm_logprobs, b.lm_logprobs)

    def test_rerun_writes_identical_cache(self, pipeline, tmp_path):
        rctx, model, examples, _, _ = pipeline
        p1, p2 = tmp_path / "r1.lsr", tmp_path / "r2.lsr"
        precompute_supervision(examples, rctx, model, k=4, cache_path=p1)
        precompute_supervision(examples, rctx, model, k=4, cache_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_cache_hit_skips_lm_scoring(self, pipeline, tmp_path, monkeypatch):
        rctx, model, examples, _, _ = pipeline
        path = tmp_path / "c.lsr"
        precompute_supervision(examples, rctx, model, k=4, cache_path=path)
        calls = {"n": 0}

        def counting_log_prob(*args, **kwargs):
            calls["n"] += 1
            raise AssertionError("must not score on a cache hit")

        monkeypatch.setattr(rft, "log_prob", counting_log_prob)
        batches = precompute_supervision(examples, rctx, model, k=4, cache_path=path)
        assert calls["n"] == 0 and len(batches) == len(examples)


class TestLsrTrain:
    def test_requires_frozen_document_encoder(self, pipeline):
        rctx, model, examples, d_enc, q_enc = pipeline
        batches = precompute_supervision(examples, rctx, model, k=4)
        d = init_dual_encoders(q_enc.vocab, dim=16, seed=4)[1]
        assert d.trainable
        with pytest.raises(ContractViolation):
            lsr_train(q_enc, d, rctx.index, batches, LSRConfig(steps=1))

    def test_training_reduces_kl_and_freezes_documents(self, pipeline):
        rctx, model, examples, _, _ = pipeline
        batches = precompute_supervision(examples, rctx, model, k=4)
        q_enc, d_enc = init_dual_encoders(rctx.query_encoder.vocab, dim=16, seed=4)
        d_enc.trainable = False
        d_before = d_enc.table.copy()
        fp_before = encoder_fingerprint(d_enc)
        index_before = rctx.index.matrix.copy()
        targets_before = [b.lm_logprobs.tobytes() for b in batches]
        config = LSRConfig(tau=0.05, lr=5e-3, steps=120, batch_size=4, seed=0,
                           val_frac=0.0)
        trained, metrics = lsr_train(q_enc, d_enc, rctx.index, batches, config)
        early = np.mean([m["kl"] for m in metrics[:10]])
        late = np.mean([m["kl"] for m in metrics[-10:]])
        assert late < early
        assert np.array_equal(d_enc.table, d_before)
        assert encoder_fingerprint(d_enc) == fp_before
        assert np.array_equal(rctx.index.matrix, index_before)
        assert [b.lm_logprobs.tobytes() for b in batches] == targets_before

    def test_planted_instance_direction(self, pipeline):
        # chunk A has the higher frozen LM score but the lower initial retrieval
        # score; training must widen s(x,A) - s(x,B)
        rctx, model, _, _, _ = pipeline
        vocab = rctx.query_encoder.vocab
        rng = np.random.default_rng(9)
        for trial in range(10):
            q_enc, d_enc = init_dual_encoders(vocab, dim=16, seed=100 + trial)
            d_enc.trainable = False
            index = build_index(rctx.store, d_enc)
            x = f"what is the color of ent{trial % 12}"
            ids = vocab.encode(x)
            q = q_enc.table[ids].mean(axis=0)
            scores = index.matrix @ q
            lo, hi = np.argsort(scores)[:2]  # two lowest-scored chunks
            a, b = (int(lo), int(hi))  # A scores lower initially, gets higher LM score
            batch = LSRBatch(example_id=0, x_text=x, y_token_count=1,
                             chunk_ids=np.array([a, b]),
                             ret_scores=scores[[a, b]].astype(np.float32),
                             lm_logprobs=np.array([-0.2, -3.0], dtype=np.float32),
                             origin="corpus")
            gap_before = float(scores[a] - scores[b])
            config = LSRConfig(tau=0.5, lr=1e-2, steps=100, batch_size=2, seed=trial,
                               val_frac=0.0, normalization="seq")
            trained, _ = lsr_train(q_enc, d_enc, index, [batch], config)
            q_after = trained.table[ids].mean(axis=0)
            s_after = index.matrix @ q_after
            assert float(s_after[a] - s_after[b]) > gap_before

    def test_mrr_improves_on_training_batches(self, pipeline):
        rctx, model, examples, _, _ = pipeline
        batches = precompute_supervision(examples, rctx, model, k=4)
        q_enc, d_enc = init_dual_encoders(rctx.query_encoder.vocab, dim=16, seed=4)
        d_enc.trainable = False
        before = mean_reciprocal_rank(q_enc, rctx.index, batches)
        config = LSRConfig(tau=0.05, lr=5e-3, steps=150, batch_size=4, seed=0,
                           val_frac=0.0)
        trained, _ = lsr_train(q_enc, d_enc, rctx.index, batches, config)
        after = mean_reciprocal_rank(trained, rctx.index, batches)
        assert after >= before


class TestLsrGradientCheck:
    def test_kl_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        v, d, k = 12, 6, 4
        table = rng.normal(0, 0.1, (v, d))
        doc_vecs = rng.normal(0, 0.5, (k, d))
        target = softmax(rng.normal(size=k))
        x_ids = [2, 5, 5, 9]

        def closure(t):
            return lsr_loss_and_query_grad(t, x_ids, doc_vecs, target)[0]

        _, dq, _ = lsr_loss_and_query_grad(table, x_ids, doc_vecs, target)
        counts = {2: 1, 5: 2, 9: 1}
        analytic = np.zeros_like(table)
        for row, count in counts.items():
            analytic[row] = dq * count / len(x_ids)
        eps = 1e-7
        checked = 0
        for row in (2, 5, 9, 0):
            for col in range(d):
                t = table.copy()
                t[row, col] += eps
                up = closure(t)
                t[row, col] -= 2 * eps
                down = closure(t)
                numeric = (up - down) / (2 * eps)
                a = analytic[row, col]
                rel = abs(numeric - a) / max(abs(numeric) + abs(a), 1e-8)
                assert rel <= 1e-4, f"grad mismatch at ({row},{col})"
                checked += 1
        assert checked >= 20
