"""Deterministic synthetic replay trace used across the pipeline tests.

Run as a script to (re)generate tests/data/replay50.jsonl; the tests both
build the records in memory and read the committed file, so any drift
between the two shows up as a failure.

Construction notes:
  * margin scores are spread over (0, 1): record i uses 20 equal gaps
    -ln((i + 0.5) / 50), so exp(-gap) recovers (i + 0.5) / 50;
  * variance disagreement is scripted per step to sweep [0, 2/3];
  * both branch answers are recorded with mixed benefit: retrieval fixes
    some queries and breaks others;
  * query embeddings are unit basis vectors in dim 8, matching the tiny
    passage corpus built by `basis_retriever_parts`.
"""

import math
from pathlib import Path

from raggate.gates import StepStat
from raggate.traces import TraceRecord, write_traces

N_QUERIES = 50
K = 20
DIM = 8

DATA_PATH = Path(__file__).parent / "data" / "replay50.jsonl"


def _samples_for(i: int) -> list[list[int]]:
    """3 x K token matrix whose disagreement count is scripted by i."""
    target = (2 * K * i) // (N_QUERIES - 1)  # 0 .. 2K disagreeing slots
    rows = [[0] * K for _ in range(3)]
    remaining = target
    for t in range(K):
        if remaining >= 2:
            rows[0][t], rows[1][t], rows[2][t] = 1, 2, 3  # all distinct
            remaining -= 2
        elif remaining == 1:
            rows[0][t], rows[1][t], rows[2][t] = 1, 1, 2  # one dissenter
            remaining -= 1
        else:
            rows[0][t] = rows[1][t] = rows[2][t] = 4 + (t % 3)
    return rows


def build_records() -> list[TraceRecord]:
    records = []
    for i in range(N_QUERIES):
        margin_target = (i + 0.5) / N_QUERIES
        gap = -math.log(margin_target)
        entropy = 1.4 * margin_target
        steps = [StepStat(entropy_nats=entropy, gap=gap) for _ in range(K)]
        gold = f"answer {i}"
        no_ctx_correct = i % 3 != 0
        with_ctx_correct = i % 2 == 0
        embedding = [0.0] * DIM
        embedding[i % DIM] = 1.0
        records.append(
            TraceRecord(
                query_id=f"q{i:03d}",
                question=f"what is item {i}?",
                gold_answers=[gold, f"the answer {i}"],
                steps=steps,
                answer_no_ctx=gold if no_ctx_correct else f"wrong guess {i}",
                answer_with_ctx=gold if with_ctx_correct else f"distracted {i}",
                out_tokens_no_ctx=5 + (i % 7),
                out_tokens_with_ctx=8 + (i % 5),
                samples=_samples_for(i),
                query_embedding=embedding,
            )
        )
    return records


def basis_retriever_parts():
    """A dim-8 identity index plus one passage per axis."""
    import numpy as np

    from raggate.retrieval import EmbeddingIndex, PassageRecord

    index = EmbeddingIndex(dim=DIM, vectors=np.eye(DIM), ids=np.arange(DIM))
    passages = {
        j: PassageRecord(id=j, title=f"Topic {j}", body=f"facts about topic {j} " * 3)
        for j in range(DIM)
    }
    return index, passages


if __name__ == "__main__":
    DATA_PATH.parent.mkdir(parents=True, exist_ok=True)
    write_traces(build_records(), DATA_PATH)
    print(f"wrote {N_QUERIES} records to {DATA_PATH}")
