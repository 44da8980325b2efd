"""Replay trace files: the wire format between a model-side extractor and
this package's offline pipeline.

A trace file is JSON lines.  The first line is a header object

    {"schema": "prefix-gate-trace", "version": 1}

and every following line is one record with exactly these fields (the two
optional ones may be omitted):

    query_id            str, unique within the file
    question            str
    gold_answers        list[str]
    steps               list of {"entropy_nats": float, "gap": float}
    samples             optional list[N][k] of int token ids (variance gate)
    answer_no_ctx       str   greedy answer decoded without context
    answer_with_ctx     str   greedy answer decoded with retrieved context
    out_tokens_no_ctx   int
    out_tokens_with_ctx int
    query_embedding     optional list[float]

Both branch answers are always required so one extraction supports
arbitrary threshold sweeps offline.  Unknown fields are rejected.  Emission
uses a canonical key order and repr-exact floats, so parse -> emit -> parse
is stable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import DataError
from .gates import PrefixDraft, StepStat, StochasticPrefixSet

TRACE_SCHEMA = "prefix-gate-trace"
TRACE_VERSION = 1

_REQUIRED_FIELDS = {
    "query_id",
    "question",
    "gold_answers",
    "steps",
    "answer_no_ctx",
    "answer_with_ctx",
    "out_tokens_no_ctx",
    "out_tokens_with_ctx",
}
_OPTIONAL_FIELDS = {"samples", "query_embedding"}


@dataclass
class TraceRecord:
    query_id: str
    question: str
    gold_answers: list[str]
    steps: list[StepStat]
    answer_no_ctx: str
    answer_with_ctx: str
    out_tokens_no_ctx: int
    out_tokens_with_ctx: int
    samples: Optional[list[list[int]]] = None
    query_embedding: Optional[list[float]] = None

    def draft(self, k: Optional[int] = None) -> PrefixDraft:
        """The recorded greedy draft, optionally truncated to k steps."""
        if k is not None and k > len(self.steps):
            raise DataError(
                f"record {self.query_id!r} has only {len(self.steps)} draft steps, need k={k}"
            )
        steps = self.steps if k is None else self.steps[:k]
        return PrefixDraft(steps=tuple(steps))

    def prefix_set(self, temperature: float, n: Optional[int] = None, k: Optional[int] = None) -> StochasticPrefixSet:
        """The recorded sampled prefixes, optionally truncated to n rows / k columns."""
        if self.samples is None:
            raise DataError(f"record {self.query_id!r} carries no sampled prefixes")
        full = StochasticPrefixSet(
            samples=tuple(tuple(row) for row in self.samples), temperature=temperature
        )
        return full.truncated(n=n, k=k)


def _validate_record(obj: dict, where: str) -> TraceRecord:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: record is not an object")
    fields = set(obj)
    missing = _REQUIRED_FIELDS - fields
    unknown = fields - _REQUIRED_FIELDS - _OPTIONAL_FIELDS
    if missing:
        raise DataError(f"{where}: missing fields {sorted(missing)}")
    if unknown:
        raise DataError(f"{where}: unknown fields {sorted(unknown)}")
    if not isinstance(obj["query_id"], str) or not obj["query_id"]:
        raise DataError(f"{where}: query_id must be a non-empty string")
    if not isinstance(obj["gold_answers"], list) or not all(isinstance(g, str) for g in obj["gold_answers"]):
        raise DataError(f"{where}: gold_answers must be a list of strings")
    for name in ("answer_no_ctx", "answer_with_ctx"):
        if not isinstance(obj[name], str):
            raise DataError(f"{where}: {name} must be a string (both branch answers are required)")
    for name in ("out_tokens_no_ctx", "out_tokens_with_ctx"):
        if not isinstance(obj[name], int) or isinstance(obj[name], bool) or obj[name] < 0:
            raise DataError(f"{where}: {name} must be a non-negative integer")
    raw_steps = obj["steps"]
    if not isinstance(raw_steps, list) or not raw_steps:
        raise DataError(f"{where}: steps must be a non-empty list")
    steps = []
    for i, s in enumerate(raw_steps):
        if not isinstance(s, dict) or set(s) != {"entropy_nats", "gap"}:
            raise DataError(f"{where}: steps[{i}] must have exactly entropy_nats and gap")
        try:
            steps.append(StepStat(entropy_nats=float(s["entropy_nats"]), gap=float(s["gap"])))
        except Exception as exc:
            raise DataError(f"{where}: steps[{i}]: {exc}") from exc
    samples = obj.get("samples")
    if samples is not None:
        if (
            not isinstance(samples, list)
            or len(samples) < 2
            or not all(isinstance(r, list) and len(r) == len(samples[0]) for r in samples)
            or not all(isinstance(t, int) and not isinstance(t, bool) and t >= 0 for r in samples for t in r)
        ):
            raise DataError(f"{where}: samples must be a rectangular list[N>=2][k] of token ids")
        if len(samples[0]) == 0:
            raise DataError(f"{where}: sampled prefixes must be non-empty")
    embedding = obj.get("query_embedding")
    if embedding is not None:
        if not isinstance(embedding, list) or not all(isinstance(v, (int, float)) for v in embedding):
            raise DataError(f"{where}: query_embedding must be a list of numbers")
        embedding = [float(v) for v in embedding]
    return TraceRecord(
        query_id=obj["query_id"],
        question=str(obj["question"]),
        gold_answers=list(obj["gold_answers"]),
        steps=steps,
        answer_no_ctx=obj["answer_no_ctx"],
        answer_with_ctx=obj["answer_with_ctx"],
        out_tokens_no_ctx=obj["out_tokens_no_ctx"],
        out_tokens_with_ctx=obj["out_tokens_with_ctx"],
        samples=samples,
        query_embedding=embedding,
    )


def load_traces(path: str | Path) -> list[TraceRecord]:
    """Parse and validate a trace file; any schema violation raises DataError."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: invalid JSON header: {exc}") from exc
    if not isinstance(header, dict) or header.get("schema") != TRACE_SCHEMA:
        raise DataError(f"{path}: missing or wrong schema header (expected {TRACE_SCHEMA!r})")
    if header.get("version") != TRACE_VERSION:
        raise DataError(f"{path}: unsupported trace version {header.get('version')!r}")
    records = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        record = _validate_record(obj, f"{path}:{lineno}")
        if record.query_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate query_id {record.query_id!r}")
        seen.add(record.query_id)
        records.append(record)
    if not records:
        raise DataError(f"{path}: trace file has a header but no records")
    return records


def record_to_dict(record: TraceRecord) -> dict:
    """Canonical JSON-ready form (fixed key order, optionals omitted when absent)."""
    out = {
        "query_id": record.query_id,
        "question": record.question,
        "gold_answers": list(record.gold_answers),
        "steps": [{"entropy_nats": s.entropy_nats, "gap": s.gap} for s in record.steps],
        "answer_no_ctx": record.answer_no_ctx,
        "answer_with_ctx": record.answer_with_ctx,
        "out_tokens_no_ctx": record.out_tokens_no_ctx,
        "out_tokens_with_ctx": record.out_tokens_with_ctx,
    }
    if record.samples is not None:
        out["samples"] = [list(row) for row in record.samples]
    if record.query_embedding is not None:
        out["query_embedding"] = list(record.query_embedding)
    return out


def write_traces(records: Sequence[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema": TRACE_SCHEMA, "version": TRACE_VERSION}) + "\n")
        for record in records:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
