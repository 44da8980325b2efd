"""Exact dense retrieval: corpus chunking, a flat inner-product index, and
budgeted context formatting.

Rows and queries are unit-normalized, so inner product equals cosine
similarity and search is an exact top-K linear scan with deterministic
tie-breaking (smaller passage id wins).

File formats
------------
* Corpus input: JSON lines, one article per line, fields {"title", "text"}.
* Passages: JSON lines, fields {"id", "title", "body"}.
* Vector files (embeddings and indices share one layout): a fixed binary
  header -- magic b"RGIX", u32 version, u32 dim, u64 n, all little-endian --
  followed by n*dim float32 vector components (row-major) and n int64
  passage ids.  Round trips are bit-exact.

The context budget is counted in whitespace-delimited tokens: the core is
model-agnostic and never sees a tokenizer, so budgets expressed in model
tokens must be converted by the caller.

Index construction is single-writer; a built index is immutable and safe
for concurrent searches.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError, InputError

VECTOR_FILE_MAGIC = b"RGIX"
VECTOR_FILE_VERSION = 1
UNIT_NORM_TOL = 1e-6

_HEADER = struct.Struct("<4sIIQ")


@dataclass(frozen=True)
class PassageRecord:
    id: int
    title: str
    body: str


@dataclass(frozen=True)
class SearchHit:
    id: int
    score: float


@dataclass(frozen=True)
class ContextBlock:
    """Formatted retrieval context, capped at the token budget."""

    text: str
    token_count: int
    truncated: bool


def chunk_corpus(
    articles: Iterable[tuple[str, str]],
    size: int = 1000,
    overlap: int = 100,
    min_chars: int = 200,
) -> list[PassageRecord]:
    """Slide fixed-size character windows over each article.

    Windows advance by size - overlap; a final window shorter than
    min_chars is dropped, so articles shorter than min_chars yield nothing.
    Passage ids are assigned sequentially across the whole corpus.
    """
    if size <= overlap or overlap < 0:
        raise ConfigError(f"need size > overlap >= 0, got size={size}, overlap={overlap}")
    if not 0 < min_chars <= size:
        raise ConfigError(f"need 0 < min_chars <= size, got min_chars={min_chars}")
    stride = size - overlap
    passages: list[PassageRecord] = []
    next_id = 0
    for title, text in articles:
        for start in range(0, len(text), stride):
            piece = text[start : start + size]
            if len(piece) < min_chars:
                break  # windows only get shorter from here
            passages.append(PassageRecord(id=next_id, title=title, body=piece))
            next_id += 1
    return passages


def normalize(vector: Sequence[float]) -> np.ndarray:
    """Scale a vector to unit Euclidean norm, preserving direction."""
    v = np.asarray(vector, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise InputError("vector must be 1-D and non-empty")
    if not np.all(np.isfinite(v)):
        raise InputError("vector contains non-finite values")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InputError("cannot normalize a zero vector")
    return v / norm


@dataclass(frozen=True)
class EmbeddingIndex:
    """Unit-normalized vectors with aligned passage ids.

    Vectors are stored float32 (the on-disk precision); ids are int64.
    """

    dim: int
    vectors: np.ndarray
    ids: np.ndarray

    def __post_init__(self) -> None:
        vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        ids = np.ascontiguousarray(np.asarray(self.ids, dtype=np.int64))
        if self.dim < 1:
            raise InputError(f"dim must be >= 1, got {self.dim}")
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise InputError(f"vectors must have shape (n, {self.dim})")
        if ids.ndim != 1 or ids.shape[0] != vectors.shape[0]:
            raise InputError("ids are not aligned with vector rows")
        if not np.all(np.isfinite(vectors)):
            raise InputError("index vectors contain non-finite values")
        if vectors.shape[0] > 0:
            norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
            worst = float(np.abs(norms - 1.0).max())
            if worst > UNIT_NORM_TOL:
                raise InputError(f"index rows must be unit-normalized (worst deviation {worst:.3g})")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return int(self.vectors.shape[0])


def search(index: EmbeddingIndex, query: Sequence[float], k: int) -> list[SearchHit]:
    """Exact top-k rows by inner product (equivalent to a full linear scan).

    Score ties break toward the smaller passage id.  Returns all n rows
    when n < k.
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise InputError(f"query dimensionality {q.shape} does not match index dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise InputError("query contains non-finite values")
    if index.n == 0:
        return []
    scores = index.vectors.astype(np.float64) @ q
    order = np.lexsort((index.ids, -scores))
    top = order[: min(k, index.n)]
    return [SearchHit(id=int(index.ids[i]), score=float(scores[i])) for i in top]


def format_context(
    hits: Sequence[SearchHit],
    passages: Mapping[int, PassageRecord] | Sequence[PassageRecord],
    ctx_budget: int,
) -> ContextBlock:
    """Concatenate "[title] body" blocks in hit order within a token budget.

    Blocks are separated by newlines; once the whitespace-token budget is
    reached the current passage is cut mid-way and the block is marked
    truncated.
    """
    if ctx_budget < 0:
        raise ConfigError(f"ctx_budget must be >= 0, got {ctx_budget}")
    if not isinstance(passages, Mapping):
        passages = {p.id: p for p in passages}
    parts: list[str] = []
    used = 0
    truncated = False
    for hit in hits:
        record = passages.get(hit.id)
        if record is None:
            raise DataError(f"hit references unknown passage id {hit.id}")
        remaining = ctx_budget - used
        if remaining <= 0:
            truncated = True
            break
        block = f"[{record.title}] {record.body}"
        tokens = block.split()
        if len(tokens) <= remaining:
            parts.append(block)
            used += len(tokens)
        else:
            parts.append(" ".join(tokens[:remaining]))
            used = ctx_budget
            truncated = True
            break
    return ContextBlock(text="\n".join(parts), token_count=used, truncated=truncated)


@dataclass(frozen=True)
class Retriever:
    """Bundles an index, its passages, and the top-K / budget settings."""

    index: EmbeddingIndex
    passages: Mapping[int, PassageRecord]
    top_k: int = 5
    ctx_budget: int = 256

    def fetch(self, query_embedding: Sequence[float]) -> ContextBlock:
        hits = search(self.index, query_embedding, self.top_k)
        return format_context(hits, self.passages, self.ctx_budget)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Write the binary vector-file layout (bit-exact round trip)."""
    header = _HEADER.pack(VECTOR_FILE_MAGIC, VECTOR_FILE_VERSION, index.dim, index.n)
    payload = index.vectors.astype("<f4").tobytes() + index.ids.astype("<i8").tobytes()
    Path(path).write_bytes(header + payload)


def load_index(path: str | Path) -> EmbeddingIndex:
    """Read a vector file, validating header, sizes, and row norms."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: too short for a vector-file header")
    magic, version, dim, n = _HEADER.unpack_from(blob)
    if magic != VECTOR_FILE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VECTOR_FILE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise FormatError(f"{path}: bad dimensionality {dim}")
    expected = _HEADER.size + n * dim * 4 + n * 8
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)} (truncated or corrupt)")
    vec_bytes = blob[_HEADER.size : _HEADER.size + n * dim * 4]
    id_bytes = blob[_HEADER.size + n * dim * 4 :]
    vectors = np.frombuffer(vec_bytes, dtype="<f4").reshape(n, dim)
    ids = np.frombuffer(id_bytes, dtype="<i8")
    try:
        return EmbeddingIndex(dim=dim, vectors=vectors, ids=ids)
    except InputError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Corpus / passage JSONL I/O
# ---------------------------------------------------------------------------


def read_articles(path: str | Path) -> list[tuple[str, str]]:
    """Read one {"title", "text"} object per line."""
    articles = []
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj, dict) or set(obj) != {"title", "text"}:
            raise DataError(f"{path}:{lineno}: expected fields {{title, text}}")
        articles.append((str(obj["title"]), str(obj["text"])))
    return articles


def write_passages(passages: Sequence[PassageRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            fh.write(json.dumps({"id": p.id, "title": p.title, "body": p.body}, ensure_ascii=False))
            fh.write("\n")


def read_passages(path: str | Path) -> list[PassageRecord]:
    passages = []
    seen: set[int] = set()
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj, dict) or set(obj) != {"id", "title", "body"}:
            raise DataError(f"{path}:{lineno}: expected fields {{id, title, body}}")
        pid = obj["id"]
        if not isinstance(pid, int) or pid in seen:
            raise DataError(f"{path}:{lineno}: passage id {pid!r} missing, non-integer, or duplicated")
        seen.add(pid)
        passages.append(PassageRecord(id=pid, title=str(obj["title"]), body=str(obj["body"])))
    return passages


def _read_jsonl(path: str | Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield lineno, json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
