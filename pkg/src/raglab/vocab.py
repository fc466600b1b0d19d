"""Whitespace word tokenizer and the vocabulary shared by the LM and the retriever encoders.

Tokens are maximal runs of non-whitespace characters. Reserved ids occupy
0..3 and never collide with learned word types.
"""
from __future__ import annotations

from collections import Counter
from collections.abc import Iterable

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
UNK_TEXT = "<unk>"

DEFAULT_VOCAB_CAP = 8192


def split_words(text: str) -> list[str]:
    """Split text into whitespace-separated words (collapsing runs of whitespace)."""
    return text.split()


class Vocabulary:
    """Bijective word<->id mapping over non-reserved types; reserved ids are fixed at 0..3."""

    def __init__(self, words: Iterable[str]):
        self._id_to_word = list(RESERVED_TOKENS)
        self._word_to_id: dict[str, int] = {}
        for word in words:
            if word in self._word_to_id or word in RESERVED_TOKENS:
                raise ValueError(f"duplicate or reserved vocabulary entry: {word!r}")
            self._word_to_id[word] = len(self._id_to_word)
            self._id_to_word.append(word)

    @classmethod
    def build(cls, texts: Iterable[str], max_types: int = DEFAULT_VOCAB_CAP) -> "Vocabulary":
        """Build from raw texts: most frequent types first, ties broken lexicographically."""
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(split_words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls(word for word, _ in ranked[:max_types])

    def __len__(self) -> int:
        return len(self._id_to_word)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._id_to_word == other._id_to_word

    def id_of(self, word: str) -> int:
        return self._word_to_id.get(word, UNK_ID)

    def word_of(self, token_id: int) -> str:
        return self._id_to_word[token_id]

    @property
    def words(self) -> list[str]:
        """Non-reserved word types in id order."""
        return self._id_to_word[len(RESERVED_TOKENS):]

    def encode(self, text: str) -> list[int]:
        """Tokenize text to ids; out-of-vocabulary words map to UNK."""
        return [self.id_of(w) for w in split_words(text)]

    def decode(self, ids: Iterable[int]) -> str:
        """Render ids back to text; UNK renders as the fixed "<unk>" marker, PAD/BOS/EOS are skipped."""
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(UNK_TEXT if i == UNK_ID else self._id_to_word[i])
        return " ".join(out)
