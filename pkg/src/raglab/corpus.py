"""Document chunking and the persistent chunk store that serves as the retrieval corpus.

Documents are split into equal-sized word-bounded chunks: n = ceil(W / max_words)
chunks whose word counts differ by at most one, concatenating back to the original
word sequence. Stores are newline-delimited UTF-8 files, one chunk per line.
"""
from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidDocument, ParseError
from .vocab import split_words

STORE_MAGIC = "#chunkstore v1"


@dataclass(frozen=True)
class Chunk:
    """One retrievable text unit with a store-unique id."""

    id: int
    source: str
    text: str
    word_count: int

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"chunk id must be non-negative, got {self.id}")
        if not self.text:
            raise ValueError("chunk text must be non-empty")
        actual = len(split_words(self.text))
        if actual != self.word_count:
            raise ValueError(f"word_count {self.word_count} != actual {actual}")


@dataclass
class ChunkStore:
    """Ordered, deduplicated collection of chunks with dense ids 0..n-1."""

    chunks: list[Chunk]
    max_words: int
    # build-time metadata, not serialized and not part of equality
    duplicates_dropped: int = field(default=0, compare=False)

    def __len__(self) -> int:
        return len(self.chunks)

    def __getitem__(self, chunk_id: int) -> Chunk:
        return self.chunks[chunk_id]

    def validate(self) -> None:
        """Check the store invariants: dense sorted ids, unique (source, text), size bound."""
        seen: set[tuple[str, str]] = set()
        for i, chunk in enumerate(self.chunks):
            if chunk.id != i:
                raise ValueError(f"chunk ids not dense: position {i} holds id {chunk.id}")
            if chunk.word_count > self.max_words:
                raise ValueError(f"chunk {i} has {chunk.word_count} words > max_words {self.max_words}")
            key = (chunk.source, chunk.text)
            if key in seen:
                raise ValueError(f"duplicate (source, text) at chunk {i}")
            seen.add(key)


def chunk_document(text: str, max_words: int, source: str = "doc") -> list[Chunk]:
    """Split one document into ceil(W / max_words) equal-sized chunks.

    The remainder is distributed round-robin, so the first W mod n chunks get
    one extra word; every chunk ends up with at most ceil(W/n) <= max_words words.
    """
    if max_words < 1:
        raise ValueError(f"max_words must be >= 1, got {max_words}")
    words = split_words(text)
    if not words:
        raise InvalidDocument("document is empty after whitespace normalization")
    total = len(words)
    n = -(-total // max_words)  # ceil
    base, extra = divmod(total, n)
    chunks = []
    pos = 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        piece = words[pos:pos + size]
        pos += size
        chunks.append(Chunk(id=i, source=source, text=" ".join(piece), word_count=size))
    return chunks


def build_store(
    documents: Sequence[tuple[str, str]],
    max_words: int | Mapping[str, int],
) -> ChunkStore:
    """Chunk all documents into one store, deduplicating on (source, text).

    ``max_words`` is either a single limit or a per-source mapping. The store
    records the largest limit used; the duplicate count is kept on the result.
    """
    if not documents:
        raise InvalidDocument("no documents supplied")
    chunks: list[Chunk] = []
    seen: set[tuple[str, str]] = set()
    dropped = 0
    limit_used = 0
    for source, text in documents:
        if "\t" in source or "\n" in source:
            raise InvalidDocument(f"source tag may not contain tabs or newlines: {source!r}")
        limit = max_words[source] if isinstance(max_words, Mapping) else max_words
        limit_used = max(limit_used, limit)
        for piece in chunk_document(text, limit, source=source):
            key = (piece.source, piece.text)
            if key in seen:
                dropped += 1
                continue
            seen.add(key)
            chunks.append(Chunk(id=len(chunks), source=piece.source, text=piece.text,
                                word_count=piece.word_count))
    return ChunkStore(chunks=chunks, max_words=limit_used, duplicates_dropped=dropped)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str, line_number: int) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch != "\\":
            out.append(ch)
            i += 1
            continue
        if i + 1 >= len(text):
            raise ParseError("dangling backslash escape", line_number)
        nxt = text[i + 1]
        if nxt == "\\":
            out.append("\\")
        elif nxt == "t":
            out.append("\t")
        elif nxt == "n":
            out.append("\n")
        else:
            raise ParseError(f"unknown escape \\{nxt}", line_number)
        i += 2
    return "".join(out)


def save_store(store: ChunkStore, path: str | Path) -> None:
    """Write the store as one record per line: id<TAB>source<TAB>word_count<TAB>text."""
    lines = [f"{STORE_MAGIC} max_words={store.max_words}"]
    for chunk in store.chunks:
        lines.append(f"{chunk.id}\t{chunk.source}\t{chunk.word_count}\t{_escape(chunk.text)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_store(path: str | Path) -> ChunkStore:
    """Read a store file back; raises ParseError (with line number) on malformed records."""
    raw = Path(path).read_text(encoding="utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty store file", 1)
    header = lines[0]
    prefix = f"{STORE_MAGIC} max_words="
    if not header.startswith(prefix):
        raise ParseError(f"bad header {header!r}", 1)
    try:
        max_words = int(header[len(prefix):])
    except ValueError:
        raise ParseError(f"bad max_words in header {header!r}", 1) from None
    chunks = []
    for offset, line in enumerate(lines[1:]):
        line_number = offset + 2
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", line_number)
        id_str, source, count_str, text = fields
        try:
            chunk_id, word_count = int(id_str), int(count_str)
        except ValueError:
            raise ParseError("non-integer id or word_count", line_number) from None
        try:
            chunk = Chunk(id=chunk_id, source=source, text=_unescape(text, line_number),
                          word_count=word_count)
        except ValueError as exc:
            raise ParseError(str(exc), line_number) from None
        if chunk.id != len(chunks):
            raise ParseError(f"non-dense chunk id {chunk.id}", line_number)
        chunks.append(chunk)
    store = ChunkStore(chunks=chunks, max_words=max_words)
    try:
        store.validate()
    except ValueError as exc:
        raise ParseError(str(exc), len(lines)) from None
    return store
