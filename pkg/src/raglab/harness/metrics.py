"""Answer metrics with the standard open-QA normalization."""
from __future__ import annotations

import string
from collections import Counter
from collections.abc import Iterable, Sequence

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop English articles, collapse whitespace."""
    words = text.lower().translate(_PUNCT_TABLE).split()
    return " ".join(w for w in words if w not in _ARTICLES)


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 if the normalized prediction equals any normalized gold answer."""
    if not golds:
        raise ValueError("golds must be non-empty")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, golds: Sequence[str]) -> float:
    """Max over golds of the harmonic mean of token precision and recall."""
    if not golds:
        raise ValueError("golds must be non-empty")
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1(pred_tokens, normalize_answer(g).split()) for g in golds)


def accuracy(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0
