"""Trainable dual-encoder retriever: mean-pooled token-embedding encoders,
dot-product scoring, exact top-k search, and the re-normalized retrieval
distribution used to weight ensemble members.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Chunk, ChunkStore
from .errors import DimensionError, EmptyIndex, EmptyInput, ParseError
from .vocab import RESERVED_TOKENS, Vocabulary

INDEX_MAGIC = b"RIDX1"
ENCODER_MAGIC = b"RDEC1"
DEFAULT_DIM = 64
INIT_SCALE = 0.1


@dataclass
class Encoder:
    """One side of the dual encoder: a trainable token-embedding table with mean pooling."""

    kind: str  # "query" or "document"
    vocab: Vocabulary
    table: np.ndarray  # (|V|, d) float32
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.table.shape[1]


def init_dual_encoders(vocab: Vocabulary, dim: int = DEFAULT_DIM, seed: int = 0,
                       scale: float = INIT_SCALE) -> tuple[Encoder, Encoder]:
    """Seeded uniform(-scale, scale) initialization.

    Both tables start bit-identical so that untrained retrieval already scores
    lexical overlap; only the query side diverges during fine-tuning.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-scale, scale, (len(vocab), dim)).astype(np.float32)
    return (Encoder(kind="query", vocab=vocab, table=table.copy(), trainable=True),
            Encoder(kind="document", vocab=vocab, table=table.copy(), trainable=True))


def encode(encoder: Encoder, text: str) -> np.ndarray:
    """Mean of the token embedding rows; deterministic, order-invariant."""
    ids = encoder.vocab.encode(text)
    if not ids:
        raise EmptyInput("cannot encode empty text")
    return encoder.table[ids].mean(axis=0)


def score(q: np.ndarray, d: np.ndarray) -> float:
    if q.shape != d.shape:
        raise DimensionError(f"embedding shapes differ: {q.shape} vs {d.shape}")
    return float(np.dot(q, d))


@dataclass(frozen=True)
class RetrievalResult:
    chunk_id: int
    score: float
    rank: int  # 1-based


@dataclass
class EmbeddingIndex:
    """Dense matrix of document embeddings aligned to chunk-store ids."""

    matrix: np.ndarray  # (n, d) float32
    store: ChunkStore
    fingerprint: bytes  # sha256 of the document-encoder parameters


def encoder_fingerprint(encoder: Encoder) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(encoder.table, dtype="<f4").tobytes()).digest()


def build_index(store: ChunkStore, doc_encoder: Encoder) -> EmbeddingIndex:
    if len(store) == 0:
        raise EmptyIndex("cannot index an empty store")
    rows = np.stack([encode(doc_encoder, chunk.text) for chunk in store.chunks])
    return EmbeddingIndex(matrix=rows.astype(np.float32), store=store,
                          fingerprint=encoder_fingerprint(doc_encoder))


def is_stale(index: EmbeddingIndex, doc_encoder: Encoder) -> bool:
    return index.fingerprint != encoder_fingerprint(doc_encoder)


def search(index: EmbeddingIndex, query: str | np.ndarray, k: int,
           encoder: Encoder | None = None) -> list[RetrievalResult]:
    """Exact top-k by full scan; ties broken by ascending chunk id."""
    if index.matrix.shape[0] == 0:
        raise EmptyIndex("index has no rows")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if isinstance(query, str):
        if encoder is None:
            raise ValueError("searching with query text requires a query encoder")
        q = encode(encoder, query)
    else:
        q = np.asarray(query)
    if q.shape[0] != index.matrix.shape[1]:
        raise DimensionError(f"query dim {q.shape[0]} != index dim {index.matrix.shape[1]}")
    scores = index.matrix @ q
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[: min(k, scores.shape[0])]
    return [RetrievalResult(chunk_id=int(i), score=float(scores[i]), rank=r + 1)
            for r, i in enumerate(order)]


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def retrieval_distribution(results: list[RetrievalResult]) -> np.ndarray:
    """Softmax of the retrieval scores, re-normalized among the returned chunks."""
    if not results:
        raise ValueError("retrieval_distribution needs at least one result")
    return softmax(np.array([r.score for r in results]))


@dataclass
class RetrievalContext:
    """Bundle of store + index + query encoder, enough to retrieve weighted chunks."""

    store: ChunkStore
    index: EmbeddingIndex
    query_encoder: Encoder

    def top(self, query_text: str, k: int) -> list[RetrievalResult]:
        return search(self.index, query_text, k, encoder=self.query_encoder)

    def weighted_chunks(self, query_text: str, k: int) -> list[tuple[Chunk, float]]:
        results = self.top(query_text, k)
        weights = retrieval_distribution(results)
        return [(self.store[r.chunk_id], float(w)) for r, w in zip(results, weights)]


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Binary index: RIDX1, n and d as u64 LE, f32 LE rows, 32-byte encoder fingerprint."""
    n, d = index.matrix.shape
    blob = (INDEX_MAGIC + struct.pack("<2Q", n, d)
            + np.ascontiguousarray(index.matrix, dtype="<f4").tobytes()
            + index.fingerprint)
    Path(path).write_bytes(blob)


def load_index(path: str | Path, store: ChunkStore) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if raw[:5] != INDEX_MAGIC:
        raise ParseError(f"bad index magic {raw[:5]!r}")
    n, d = struct.unpack_from("<2Q", raw, 5)
    offset = 5 + 16
    matrix = np.frombuffer(raw, dtype="<f4", count=n * d, offset=offset).reshape(n, d).copy()
    fingerprint = raw[offset + n * d * 4: offset + n * d * 4 + 32]
    if len(fingerprint) != 32:
        raise ParseError("truncated index file: missing fingerprint")
    if n != len(store):
        raise ParseError(f"index rows {n} != store size {len(store)}")
    return EmbeddingIndex(matrix=matrix, store=store, fingerprint=fingerprint)


def save_encoders(query_encoder: Encoder, doc_encoder: Encoder, path: str | Path) -> None:
    """Dual-encoder checkpoint: shared vocabulary plus both parameter tables."""
    if query_encoder.vocab != doc_encoder.vocab:
        raise ValueError("query and document encoders must share a vocabulary")
    words = query_encoder.vocab.words
    parts = [ENCODER_MAGIC,
             struct.pack("<2Q2B", query_encoder.dim, len(words),
                         int(query_encoder.trainable), int(doc_encoder.trainable))]
    for word in words:
        raw = word.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    parts.append(np.ascontiguousarray(query_encoder.table, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(doc_encoder.table, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_encoders(path: str | Path) -> tuple[Encoder, Encoder]:
    raw = Path(path).read_bytes()
    if raw[:5] != ENCODER_MAGIC:
        raise ParseError(f"bad encoder checkpoint magic {raw[:5]!r}")
    dim, n_words, q_train, d_train = struct.unpack_from("<2Q2B", raw, 5)
    offset = 5 + 18
    words = []
    for _ in range(n_words):
        (length,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        words.append(raw[offset:offset + length].decode("utf-8"))
        offset += length
    vocab = Vocabulary(words)
    v_total = n_words + len(RESERVED_TOKENS)
    count = v_total * dim
    q_table = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(v_total, dim).copy()
    offset += count * 4
    d_table = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(v_total, dim).copy()
    return (Encoder(kind="query", vocab=vocab, table=q_table, trainable=bool(q_train)),
            Encoder(kind="document", vocab=vocab, table=d_table, trainable=bool(d_train)))
