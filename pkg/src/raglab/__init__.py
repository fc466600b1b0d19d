"""Desk-scale retrieval-augmented language model laboratory.

Core pieces: a chunked retrieval corpus, a trainable dual-encoder retriever,
a small autoregressive LM with hand-written gradients, parallel in-context
augmentation with ensemble inference, retrieval-augmented instruction tuning,
and LM-supervised retriever fine-tuning.
"""
from . import corpus, fusion, harness, lm, lm_finetune, retriever, retriever_finetune
from .corpus import Chunk, ChunkStore, build_store, chunk_document, load_store, save_store
from .lm import LanguageModel, LMConfig, TokenSequence
from .retriever import (Encoder, EmbeddingIndex, RetrievalContext, RetrievalResult,
                        build_index, encode, init_dual_encoders, search)

__version__ = "0.1.0"
