"""Dense encoding: mean-pooled transformer embeddings, unit-normalized,
written in the primary pipeline's binary vector-file layout.

The E5-style "query: " / "passage: " prefixes are applied here, per the
encoder convention; the primary never sees them.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from raggate.retrieval import EmbeddingIndex, read_passages, save_index

from .jobs import EmbedJob


class TextEncoder:
    """Mean pooling over the last hidden state, followed by L2 norm."""

    def __init__(self, model_path: str, max_length: int = 256):
        self.tokenizer = AutoTokenizer.from_pretrained(model_path)
        self.model = AutoModel.from_pretrained(model_path)
        self.model.eval()
        self.max_length = max_length
        self.dim = int(self.model.config.hidden_size)

    @torch.no_grad()
    def encode(self, texts: Sequence[str], batch_size: int = 16) -> np.ndarray:
        """Unit-normalized float32 vectors, one row per input text."""
        rows = []
        for start in range(0, len(texts), batch_size):
            batch = list(texts[start : start + batch_size])
            enc = self.tokenizer(
                batch,
                return_tensors="pt",
                padding=True,
                truncation=True,
                max_length=self.max_length,
            )
            hidden = self.model(**enc).last_hidden_state
            mask = enc["attention_mask"].unsqueeze(-1).to(hidden.dtype)
            pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
            rows.append(pooled.to(torch.float64).numpy())
        stacked = np.concatenate(rows, axis=0)
        norms = np.linalg.norm(stacked, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("encoder produced a zero vector")
        return (stacked / norms).astype(np.float32)

    def encode_one(self, text: str) -> np.ndarray:
        return self.encode([text], batch_size=1)[0]


def embed_corpus(job: EmbedJob) -> EmbeddingIndex:
    """Embed every passage in a primary passage file and persist the
    vectors (with aligned passage ids) as a primary vector file."""
    passages = read_passages(job.passages_path)
    encoder = TextEncoder(job.encoder)
    texts = [f"{job.passage_prefix}{p.title} {p.body}" for p in passages]
    vectors = encoder.encode(texts, batch_size=job.batch_size)
    index = EmbeddingIndex(
        dim=encoder.dim,
        vectors=vectors,
        ids=np.asarray([p.id for p in passages], dtype=np.int64),
    )
    save_index(index, job.output_path)
    return index
