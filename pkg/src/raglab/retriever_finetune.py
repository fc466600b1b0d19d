"""LM-supervised retriever fine-tuning.

Top-k chunks and their LM answer likelihoods are precomputed once with the
initial encoders, turned into a temperature-softmaxed target distribution,
and the query encoder alone is trained to minimize KL(retrieval ‖ target).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, NoEligibleChunks, ParseError
from .corpus import ChunkStore
from .fusion import build_augmented_prompt
from .lm import AdamState, LanguageModel, TrainSchedule, log_prob
from .lm_finetune import FTExample, query_text
from .retriever import Encoder, EmbeddingIndex, RetrievalContext
from .vocab import BOS_ID, split_words

CACHE_MAGIC = b"LSR1"
CORPUS_SPLIT_TOKENS = 50  # prefix/suffix lengths for self-supervised examples
MIN_CORPUS_TOKENS = 2 * CORPUS_SPLIT_TOKENS
SEQ_PROB_MAX_TOKENS = 10  # "auto" normalization switches to per-token above this

_clamp_warnings = 0


def kl_clamp_warnings() -> int:
    """Number of times a zero target entry was clamped since the last reset."""
    return _clamp_warnings


def reset_kl_clamp_warnings() -> None:
    global _clamp_warnings
    _clamp_warnings = 0


@dataclass(frozen=True)
class LSRExample:
    x: str
    y: str
    origin: str  # "mti" or "corpus"


@dataclass
class LSRBatch:
    """Frozen supervision for one example: top-k chunks, their retrieval scores
    at precompute time, and the LM log-likelihood of y under each chunk."""

    example_id: int
    x_text: str
    y_token_count: int
    chunk_ids: np.ndarray    # (k,) int64
    ret_scores: np.ndarray   # (k,) float32
    lm_logprobs: np.ndarray  # (k,) float32
    origin: str


@dataclass
class LSRTarget:
    probs: np.ndarray  # (k,) float64, sums to 1
    tau: float


def make_corpus_examples(store: ChunkStore, sample_size: int,
                         seed: int) -> tuple[list[LSRExample], int]:
    """Self-supervised pairs: first 50 tokens as input, last 50 as target.

    Chunks shorter than 100 tokens are skipped; the skip count is returned.
    """
    eligible = []
    skipped = 0
    for chunk in store.chunks:
        words = split_words(chunk.text)
        if len(words) < MIN_CORPUS_TOKENS:
            skipped += 1
            continue
        eligible.append((" ".join(words[:CORPUS_SPLIT_TOKENS]),
                         " ".join(words[-CORPUS_SPLIT_TOKENS:])))
    if not eligible:
        raise NoEligibleChunks(f"no chunk has >= {MIN_CORPUS_TOKENS} tokens")
    rng = np.random.default_rng(seed)
    picks = sorted(rng.permutation(len(eligible))[:sample_size])
    return [LSRExample(x=eligible[i][0], y=eligible[i][1], origin="corpus")
            for i in picks], skipped


def make_mti_examples(examples: list[FTExample]) -> list[LSRExample]:
    """Instruction-tuning examples recast as retriever supervision (templated query as x)."""
    return [LSRExample(x=query_text(ex), y=ex.output, origin="mti") for ex in examples]


def precompute_supervision(examples: list[LSRExample], retrieval: RetrievalContext,
                           model: LanguageModel, k: int,
                           cache_path: str | Path | None = None) -> list[LSRBatch]:
    """Retrieve top-k with the initial query encoder and score y once per chunk.

    When ``cache_path`` exists it is loaded verbatim and no scoring happens.
    Overlong chunks are tail-truncated by the augmentation policy, never dropped.
    """
    if k < 2:
        raise ValueError("k must be >= 2 for a non-vacuous target distribution")
    if cache_path is not None and Path(cache_path).exists():
        return load_supervision_cache(cache_path)
    batches = []
    for i, ex in enumerate(examples):
        results = retrieval.top(ex.x, k)
        y_ids = model.vocab.encode(ex.y)
        budget = model.config.window - len(y_ids) - 1
        lps = []
        for r in results:
            prompt = build_augmented_prompt(retrieval.store[r.chunk_id], ex.x, budget)
            prefix = [BOS_ID] + model.vocab.encode(prompt.text)
            lps.append(log_prob(model, y_ids, prefix))
        batches.append(LSRBatch(
            example_id=i, x_text=ex.x, y_token_count=len(y_ids),
            chunk_ids=np.array([r.chunk_id for r in results], dtype=np.int64),
            ret_scores=np.array([r.score for r in results], dtype=np.float32),
            lm_logprobs=np.array(lps, dtype=np.float32), origin=ex.origin))
    if cache_path is not None:
        save_supervision_cache(batches, cache_path)
    return batches


def save_supervision_cache(batches: list[LSRBatch], path: str | Path) -> None:
    if not batches:
        raise ValueError("refusing to write an empty supervision cache")
    k = len(batches[0].chunk_ids)
    parts = [CACHE_MAGIC, struct.pack("<2Q", len(batches), k)]
    for b in batches:
        x_raw = b.x_text.encode("utf-8")
        parts.append(struct.pack("<QBQI", b.example_id, 1 if b.origin == "mti" else 0,
                                 b.y_token_count, len(x_raw)))
        parts.append(x_raw)
        parts.append(np.ascontiguousarray(b.chunk_ids, dtype="<i8").tobytes())
        parts.append(np.ascontiguousarray(b.ret_scores, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b.lm_logprobs, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_supervision_cache(path: str | Path) -> list[LSRBatch]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ParseError(f"bad supervision cache magic {raw[:4]!r}")
    count, k = struct.unpack_from("<2Q", raw, 4)
    offset = 4 + 16
    batches = []
    for _ in range(count):
        example_id, origin_flag, y_tokens, x_len = struct.unpack_from("<QBQI", raw, offset)
        offset += 8 + 1 + 8 + 4
        x_text = raw[offset:offset + x_len].decode("utf-8")
        offset += x_len
        chunk_ids = np.frombuffer(raw, dtype="<i8", count=k, offset=offset).copy()
        offset += 8 * k
        ret_scores = np.frombuffer(raw, dtype="<f4", count=k, offset=offset).copy()
        offset += 4 * k
        lm_logprobs = np.frombuffer(raw, dtype="<f4", count=k, offset=offset).copy()
        offset += 4 * k
        batches.append(LSRBatch(example_id=example_id, x_text=x_text, y_token_count=y_tokens,
                                chunk_ids=chunk_ids, ret_scores=ret_scores,
                                lm_logprobs=lm_logprobs,
                                origin="mti" if origin_flag else "corpus"))
    return batches


def lsr_distribution(lm_logprobs: np.ndarray, tau: float, normalization: str = "seq",
                     y_token_count: int | None = None) -> LSRTarget:
    """Temperature softmax over the LM probability of the answer under each chunk.

    ``seq`` exponentiates the whole-sequence probability (the literal rule);
    ``tok`` uses the per-token average probability, which keeps the target
    informative for long outputs; ``auto`` picks per length.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    lp = np.asarray(lm_logprobs, dtype=np.float64)
    if normalization == "auto":
        if y_token_count is None:
            raise ValueError("auto normalization needs y_token_count")
        normalization = "seq" if y_token_count <= SEQ_PROB_MAX_TOKENS else "tok"
    if normalization == "tok":
        if not y_token_count:
            raise ValueError("tok normalization needs a positive y_token_count")
        lp = lp / y_token_count
    elif normalization != "seq":
        raise ValueError(f"unknown normalization {normalization!r}")
    z = np.exp(lp) / tau
    z = z - z.max()
    e = np.exp(z)
    return LSRTarget(probs=e / e.sum(), tau=tau)


def kl_loss(p: np.ndarray, target: LSRTarget | np.ndarray) -> float:
    """KL(p ‖ target) in nats; zero target entries are clamped at 1e-12."""
    global _clamp_warnings
    q = target.probs if isinstance(target, LSRTarget) else np.asarray(target, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if np.any(q <= 0):
        _clamp_warnings += int(np.count_nonzero(q <= 0))
        q = np.maximum(q, 1e-12)
    return float(np.sum(p * np.log(p / q)))


def query_embedding_ids(encoder: Encoder, text: str) -> list[int]:
    ids = encoder.vocab.encode(text)
    if not ids:
        raise ValueError("query text tokenizes to nothing")
    return ids


def lsr_loss_and_query_grad(q_table: np.ndarray, x_ids: list[int], doc_vecs: np.ndarray,
                            target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL loss for one example plus its gradient w.r.t. the pooled query embedding.

    Returns (loss, d_loss/d_qemb, p) where p is the retrieval softmax over the
    frozen chunk set. Differentiation path: qemb -> scores -> softmax -> KL.
    """
    q = q_table[x_ids].mean(axis=0)
    scores = doc_vecs @ q
    z = scores - scores.max()
    e = np.exp(z)
    p = e / e.sum()
    logq = np.log(np.maximum(target, 1e-12))
    a = np.log(p) - logq
    loss = float(np.sum(p * a))
    ds = p * (a - loss)
    dq = doc_vecs.T @ ds
    return loss, dq, p


@dataclass
class LSRConfig:
    tau: float = 0.01
    normalization: str = "auto"  # seq | tok | auto
    lr: float = 1e-5
    steps: int = 200
    batch_size: int = 8
    corpus_frac: float = 0.95
    mti_frac: float = 0.05
    eval_every: int = 0
    val_frac: float = 0.1
    seed: int = 0


def _ranks_of_best(query_encoder: Encoder, index: EmbeddingIndex,
                   batches: list[LSRBatch]) -> list[int]:
    ranks = []
    for b in batches:
        ids = query_encoder.vocab.encode(b.x_text) or [0]
        q = query_encoder.table[ids].mean(axis=0)
        scores = index.matrix[b.chunk_ids] @ q
        best = int(np.argmax(b.lm_logprobs))
        rank = 1 + int(np.sum((scores > scores[best])
                              | ((scores == scores[best])
                                 & (b.chunk_ids < b.chunk_ids[best]))))
        ranks.append(rank)
    return ranks


def mean_reciprocal_rank(query_encoder: Encoder, index: EmbeddingIndex,
                         batches: list[LSRBatch]) -> float:
    """MRR of the chunk with the highest frozen LM score under the current ranking."""
    ranks = _ranks_of_best(query_encoder, index, batches)
    return float(np.mean([1.0 / r for r in ranks]))


def lsr_train(query_encoder: Encoder, doc_encoder: Encoder, index: EmbeddingIndex,
              batches: list[LSRBatch], config: LSRConfig) -> tuple[Encoder, list[dict]]:
    """Train the query encoder against the frozen supervision targets.

    The document encoder must be flagged frozen; its parameters and the index
    rows are never touched. Targets are computed once up front and reused
    verbatim at every step.
    """
    if doc_encoder.trainable:
        raise ContractViolation("document encoder must be frozen (trainable=False)")
    if not query_encoder.trainable:
        raise ContractViolation("query encoder is flagged frozen; nothing to train")
    if not batches:
        raise ValueError("no supervision batches")

    targets = [lsr_distribution(b.lm_logprobs, config.tau, config.normalization,
                                b.y_token_count).probs for b in batches]
    rng = np.random.default_rng([config.seed, 32452843])
    order = rng.permutation(len(batches))
    n_val = min(len(batches) - 1, int(round(config.val_frac * len(batches))))
    val_idx = [int(i) for i in order[:n_val]]
    train_idx = [int(i) for i in order[n_val:]]
    by_origin = {"corpus": [i for i in train_idx if batches[i].origin == "corpus"],
                 "mti": [i for i in train_idx if batches[i].origin == "mti"]}
    fracs = {"corpus": config.corpus_frac, "mti": config.mti_frac}
    origins = [o for o in ("corpus", "mti") if by_origin[o]]
    probs = np.array([fracs[o] for o in origins], dtype=np.float64)
    if probs.sum() <= 0:
        raise ValueError("origin mixture assigns no mass to any available origin")
    probs = probs / probs.sum()

    schedule = TrainSchedule(peak_lr=config.lr, end_lr=config.lr, warmup_steps=0,
                             total_steps=config.steps)
    opt = AdamState({"table": query_encoder.table}, schedule)
    doc_mat = index.matrix.astype(np.float64)
    table64 = query_encoder.table.astype(np.float64)
    metrics: list[dict] = []
    for step in range(config.steps):
        grad = np.zeros_like(table64)
        loss_total = 0.0
        for _ in range(config.batch_size):
            origin = origins[int(rng.choice(len(origins), p=probs))]
            i = by_origin[origin][int(rng.integers(len(by_origin[origin])))]
            b = batches[i]
            ids = query_embedding_ids(query_encoder, b.x_text)
            loss, dq, _ = lsr_loss_and_query_grad(table64, ids, doc_mat[b.chunk_ids], targets[i])
            loss_total += loss
            for t in ids:
                grad[t] += dq / len(ids)
        grad /= config.batch_size
        opt.apply({"table": table64}, {"table": grad})
        row = {"step": step + 1, "kl": loss_total / config.batch_size}
        if config.eval_every > 0 and val_idx and (step + 1) % config.eval_every == 0:
            query_encoder.table = table64.astype(np.float32)
            row["val_mrr"] = mean_reciprocal_rank(query_encoder, index,
                                                  [batches[i] for i in val_idx])
        metrics.append(row)
    query_encoder.table = table64.astype(np.float32)
    return query_encoder, metrics
