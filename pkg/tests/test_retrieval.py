"""Chunking, exact search (against a per-row dot-product scan oracle),
context budgeting, and bit-exact index persistence."""

import numpy as np
import pytest

from raggate.errors import ConfigError, DataError, FormatError, InputError
from raggate.retrieval import (
    ContextBlock,
    EmbeddingIndex,
    PassageRecord,
    Retriever,
    SearchHit,
    chunk_corpus,
    format_context,
    load_index,
    normalize,
    read_articles,
    read_passages,
    save_index,
    search,
    write_passages,
)


def random_unit_rows(rng, n, dim):
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def scan_oracle(index, query, k):
    """Independent top-k: per-row dot products, python sort by (-score, id)."""
    q = np.asarray(query, dtype=np.float64)
    scored = [
        (float(np.dot(index.vectors[i].astype(np.float64), q)), int(index.ids[i]))
        for i in range(index.n)
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [(pid, s) for s, pid in scored[:k]]


class TestChunking:
    def test_stride_arithmetic(self):
        passages = chunk_corpus([("T", "x" * 1500)])
        assert [len(p.body) for p in passages] == [1000, 600]
        assert passages[0].body == "x" * 1000

    def test_short_article_dropped(self):
        assert chunk_corpus([("T", "x" * 150)]) == []

    def test_exact_window(self):
        passages = chunk_corpus([("T", "x" * 1000)])
        assert len(passages) == 1 and len(passages[0].body) == 1000

    def test_ids_sequential_across_articles(self):
        passages = chunk_corpus([("A", "x" * 1000), ("B", "y" * 1000)])
        assert [p.id for p in passages] == [0, 1]
        assert [p.title for p in passages] == ["A", "B"]

    def test_coverage_and_overlap(self):
        rng = np.random.default_rng(51)
        for _ in range(50):
            length = int(rng.integers(0, 5000))
            size = int(rng.integers(50, 400))
            overlap = int(rng.integers(0, size))
            min_chars = int(rng.integers(1, size + 1))
            text = "a" * length
            passages = chunk_corpus([("T", text)], size=size, overlap=overlap, min_chars=min_chars)
            stride = size - overlap
            covered_end = 0
            for i, p in enumerate(passages):
                start = i * stride
                assert p.body == text[start : start + size]
                if i > 0 and len(passages[i - 1].body) == size:
                    assert start == (i - 1) * stride + stride  # consecutive windows overlap by `overlap`
                covered_end = start + len(p.body)
            uncovered = length - covered_end
            if passages:
                assert uncovered < min_chars  # only a short tail may be dropped
            else:
                assert length < min_chars or size > length

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigError):
            chunk_corpus([], size=100, overlap=100)
        with pytest.raises(ConfigError):
            chunk_corpus([], size=100, overlap=10, min_chars=200)


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)

    def test_idempotent(self):
        v = normalize([1.0, 2.0, 2.0])
        np.testing.assert_allclose(normalize(v), v, atol=1e-12)

    def test_axis(self):
        np.testing.assert_allclose(normalize([2.0, 0.0, 0.0]), [1.0, 0.0, 0.0], atol=0)

    def test_rejects_zero_vector(self):
        with pytest.raises(InputError):
            normalize([0.0, 0.0])


class TestSearch:
    def test_orthonormal_basis(self):
        index = EmbeddingIndex(dim=4, vectors=np.eye(4), ids=np.arange(4))
        hits = search(index, [0.0, 0.0, 1.0, 0.0], 1)
        assert hits[0].id == 2
        assert hits[0].score == pytest.approx(1.0, abs=1e-6)

    def test_tie_breaks_to_smaller_id(self):
        v = normalize([1.0, 1.0, 0.0])
        index = EmbeddingIndex(dim=3, vectors=np.stack([v, v]), ids=np.array([7, 3]))
        hits = search(index, v, 1)
        assert hits[0].id == 3

    def test_matches_scan_oracle(self):
        rng = np.random.default_rng(52)
        index = EmbeddingIndex(
            dim=8, vectors=random_unit_rows(rng, 100, 8), ids=np.arange(100)
        )
        for _ in range(20):
            query = normalize(rng.normal(size=8))
            hits = search(index, query, 5)
            oracle = scan_oracle(index, query, 5)
            assert [h.id for h in hits] == [pid for pid, _ in oracle]
            for hit, (_, score) in zip(hits, oracle):
                assert hit.score == pytest.approx(score, abs=1e-12)

    def test_scaling_does_not_change_ranking(self):
        rng = np.random.default_rng(53)
        index = EmbeddingIndex(dim=6, vectors=random_unit_rows(rng, 40, 6), ids=np.arange(40))
        raw = rng.normal(size=6)
        ids_a = [h.id for h in search(index, normalize(raw), 10)]
        ids_b = [h.id for h in search(index, normalize(raw * 37.5), 10)]
        assert ids_a == ids_b

    def test_small_index_returns_all(self):
        rng = np.random.default_rng(54)
        index = EmbeddingIndex(dim=4, vectors=random_unit_rows(rng, 3, 4), ids=np.arange(3))
        assert len(search(index, normalize(rng.normal(size=4)), 10)) == 3

    def test_hits_sorted_non_increasing(self):
        rng = np.random.default_rng(55)
        index = EmbeddingIndex(dim=5, vectors=random_unit_rows(rng, 50, 5), ids=np.arange(50))
        hits = search(index, normalize(rng.normal(size=5)), 50)
        scores = [h.score for h in hits]
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_rejects_dim_mismatch(self):
        index = EmbeddingIndex(dim=4, vectors=np.eye(4), ids=np.arange(4))
        with pytest.raises(InputError):
            search(index, [1.0, 0.0], 1)

    def test_empty_index_returns_no_hits(self):
        index = EmbeddingIndex(dim=3, vectors=np.zeros((0, 3)), ids=np.zeros(0, dtype=np.int64))
        assert search(index, [1.0, 0.0, 0.0], 5) == []

    def test_rejects_unnormalized_rows(self):
        with pytest.raises(InputError):
            EmbeddingIndex(dim=2, vectors=np.array([[3.0, 4.0]]), ids=np.array([0]))


class TestFormatContext:
    passages = {
        0: PassageRecord(0, "Paris", "capital of France"),
        1: PassageRecord(1, "Rome", "capital of Italy since antiquity"),
    }

    def test_single_hit_counting_oracle(self):
        block = format_context([SearchHit(0, 0.9)], self.passages, 100)
        assert block == ContextBlock(text="[Paris] capital of France", token_count=4, truncated=False)

    def test_zero_budget(self):
        block = format_context([SearchHit(0, 0.9)], self.passages, 0)
        assert block.text == "" and block.token_count == 0 and block.truncated

    def test_zero_budget_no_hits(self):
        block = format_context([], self.passages, 0)
        assert not block.truncated

    def test_mid_passage_truncation(self):
        hits = [SearchHit(0, 0.9), SearchHit(1, 0.8)]
        block = format_context(hits, self.passages, 6)
        assert block.text == "[Paris] capital of France\n[Rome] capital"
        assert block.token_count == 6 and block.truncated

    def test_budget_never_exceeded(self):
        rng = np.random.default_rng(56)
        for _ in range(100):
            budget = int(rng.integers(0, 15))
            hits = [SearchHit(int(i), 1.0) for i in rng.permutation(2)]
            block = format_context(hits, self.passages, budget)
            assert block.token_count <= budget
            assert len(block.text.split()) == block.token_count

    def test_exact_fit_is_not_truncated(self):
        block = format_context([SearchHit(0, 0.9)], self.passages, 4)
        assert block.token_count == 4 and not block.truncated

    def test_unresolvable_id(self):
        with pytest.raises(DataError):
            format_context([SearchHit(99, 0.5)], self.passages, 10)

    def test_retriever_fetch(self):
        v = np.eye(2)
        index = EmbeddingIndex(dim=2, vectors=v, ids=np.array([0, 1]))
        retriever = Retriever(index=index, passages=self.passages, top_k=1, ctx_budget=10)
        block = retriever.fetch([1.0, 0.0])
        assert block.text.startswith("[Paris]")


class TestPersistence:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(57)
        index = EmbeddingIndex(dim=16, vectors=random_unit_rows(rng, 32, 16), ids=np.arange(32) * 3)
        path = tmp_path / "index.bin"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.dim == index.dim
        assert np.array_equal(loaded.vectors, index.vectors)
        assert np.array_equal(loaded.ids, index.ids)
        # a second save produces identical bytes
        path2 = tmp_path / "again.bin"
        save_index(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_empty_index_roundtrip(self, tmp_path):
        index = EmbeddingIndex(dim=8, vectors=np.zeros((0, 8)), ids=np.zeros(0, dtype=np.int64))
        path = tmp_path / "empty.bin"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.n == 0 and loaded.dim == 8

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(58)
        index = EmbeddingIndex(dim=4, vectors=random_unit_rows(rng, 10, 4), ids=np.arange(10))
        path = tmp_path / "index.bin"
        save_index(index, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_index(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "index.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_index(path)

    def test_norm_violation_rejected(self, tmp_path):
        # hand-build a file whose single row is not unit length
        import struct

        header = struct.pack("<4sIIQ", b"RGIX", 1, 2, 1)
        payload = np.array([[3.0, 4.0]], dtype="<f4").tobytes() + np.array([0], dtype="<i8").tobytes()
        path = tmp_path / "bad.bin"
        path.write_bytes(header + payload)
        with pytest.raises(FormatError):
            load_index(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            load_index(tmp_path / "absent.bin")

    def test_golden_wire_layout(self, tmp_path):
        # pin the exact byte layout so other languages can rely on it:
        # magic | u32 version | u32 dim | u64 n | n*dim f32 | n i64
        import struct

        index = EmbeddingIndex(dim=2, vectors=np.array([[1.0, 0.0]]), ids=np.array([5]))
        path = tmp_path / "golden.bin"
        save_index(index, path)
        expected = (
            b"RGIX"
            + struct.pack("<I", 1)
            + struct.pack("<I", 2)
            + struct.pack("<Q", 1)
            + struct.pack("<ff", 1.0, 0.0)
            + struct.pack("<q", 5)
        )
        assert path.read_bytes() == expected


class TestCorpusIO:
    def test_articles_roundtrip(self, tmp_path):
        path = tmp_path / "articles.jsonl"
        path.write_text('{"title": "A", "text": "hello"}\n{"title": "B", "text": "world"}\n')
        assert read_articles(path) == [("A", "hello"), ("B", "world")]

    def test_passages_roundtrip(self, tmp_path):
        passages = [PassageRecord(0, "A", "body one"), PassageRecord(1, "B", "body two")]
        path = tmp_path / "passages.jsonl"
        write_passages(passages, path)
        assert read_passages(path) == passages

    def test_duplicate_passage_id_rejected(self, tmp_path):
        path = tmp_path / "passages.jsonl"
        path.write_text('{"id": 0, "title": "A", "body": "x"}\n{"id": 0, "title": "B", "body": "y"}\n')
        with pytest.raises(DataError):
            read_passages(path)

    def test_bad_article_fields(self, tmp_path):
        path = tmp_path / "articles.jsonl"
        path.write_text('{"title": "A"}\n')
        with pytest.raises(DataError):
            read_articles(path)
