"""Per-query gated inference: draft, score, decide, optionally retrieve and
format context, then generate.

The generator is pluggable.  Any object with the three capabilities below
works; the bundled TraceReplayGenerator replays recorded model traces so
whole evaluations run offline and deterministically.

    decode_prefix(prompt, k)                        -> PrefixDraft
    sample_prefixes(prompt, k, n, temperature, seed) -> StochasticPrefixSet
    generate(prompt)                                 -> (answer, out_tokens)

decode_prefix must be deterministic for a fixed prompt (greedy), and
sample_prefixes deterministic for a fixed seed.  Queries are independent:
run_dataset may process them in any order (or concurrently) and aggregates
deterministically.

Latency is simulated, never measured: seconds derive from token counts via
CostParams.per_token_cost plus a fixed per-retrieval overhead.  The
dataset summary reports the mean added seconds over a no-draft,
no-retrieval reference pass under the same cost parameters.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

from .calibration import CostParams
from .errors import DataError, InputError
from .gates import (
    GateConfig,
    GateScore,
    PrefixDraft,
    StochasticPrefixSet,
    decide,
    score_prefix,
)
from .metrics import exact_match, f1
from .retrieval import Retriever
from .traces import TraceRecord

DEFAULT_PROMPT_TEMPLATE = "Answer the question in as few words as possible.\nQuestion: {question}\nAnswer:"

POLICIES = ("gate", "always", "never")

DEFAULT_COST = CostParams(t_draft=20, t_ctx=0, e_out0=0, e_out1=0)


@dataclass(frozen=True)
class Prompt:
    """A prompt plus enough structure for replay generators to branch on."""

    query_id: str
    question: str
    text: str
    context: Optional[str] = None

    @property
    def has_context(self) -> bool:
        return self.context is not None


class Generator(Protocol):
    def decode_prefix(self, prompt: Prompt, k: int) -> PrefixDraft: ...

    def sample_prefixes(
        self, prompt: Prompt, k: int, n: int, temperature: float, seed: int
    ) -> StochasticPrefixSet: ...

    def generate(self, prompt: Prompt) -> tuple[str, int]: ...


class TraceReplayGenerator:
    """Replays recorded drafts, sampled prefixes, and both-branch answers."""

    def __init__(self, records: Iterable[TraceRecord]):
        self._records: dict[str, TraceRecord] = {}
        for record in records:
            if record.query_id in self._records:
                raise DataError(f"duplicate query_id {record.query_id!r} in replay table")
            self._records[record.query_id] = record

    def _lookup(self, query_id: str) -> TraceRecord:
        record = self._records.get(query_id)
        if record is None:
            raise DataError(f"no recorded trace for query {query_id!r}")
        return record

    def decode_prefix(self, prompt: Prompt, k: int) -> PrefixDraft:
        record = self._lookup(prompt.query_id)
        # A replayed draft cannot extend past what was recorded.
        return record.draft(min(k, len(record.steps)))

    def sample_prefixes(
        self, prompt: Prompt, k: int, n: int, temperature: float, seed: int
    ) -> StochasticPrefixSet:
        record = self._lookup(prompt.query_id)
        if record.samples is None:
            raise DataError(f"trace for query {prompt.query_id!r} has no sampled prefixes")
        k_avail = len(record.samples[0])
        return record.prefix_set(temperature=temperature, n=n, k=min(k, k_avail))

    def generate(self, prompt: Prompt) -> tuple[str, int]:
        record = self._lookup(prompt.query_id)
        if prompt.has_context:
            return record.answer_with_ctx, record.out_tokens_with_ctx
        return record.answer_no_ctx, record.out_tokens_no_ctx

    def query_embedding(self, query_id: str) -> Optional[list[float]]:
        return self._lookup(query_id).query_embedding


@dataclass(frozen=True)
class Example:
    """One evaluation query (the dataset-side record)."""

    query_id: str
    question: str
    gold_answers: tuple[str, ...]


def load_examples(path: str | Path) -> list[Example]:
    """Read {"query_id", "question", "gold_answers"} JSON lines."""
    examples = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict) or set(obj) != {"query_id", "question", "gold_answers"}:
            raise DataError(f"{path}:{lineno}: expected fields {{query_id, question, gold_answers}}")
        examples.append(
            Example(
                query_id=str(obj["query_id"]),
                question=str(obj["question"]),
                gold_answers=tuple(str(g) for g in obj["gold_answers"]),
            )
        )
    return examples


@dataclass(frozen=True)
class RunRecord:
    """Per-query pipeline outcome."""

    query_id: str
    gate_kind: str
    score: float
    retrieved: bool
    recheck_fired: bool
    answer: str
    draft_tokens: int
    context_tokens: float
    output_tokens: int
    latency_s: float
    em: int
    f1: float


def run_record_to_dict(record: RunRecord) -> dict:
    return {
        "query_id": record.query_id,
        "gate_kind": record.gate_kind,
        "score": record.score,
        "retrieved": record.retrieved,
        "recheck_fired": record.recheck_fired,
        "answer": record.answer,
        "draft_tokens": record.draft_tokens,
        "context_tokens": record.context_tokens,
        "output_tokens": record.output_tokens,
        "latency_s": record.latency_s,
        "em": record.em,
        "f1": record.f1,
    }


def _query_seed(master_seed: int, query_id: str) -> int:
    # Stable per-query stream: mix the id into the master seed.
    return (master_seed * 0x9E3779B1 + zlib.crc32(query_id.encode("utf-8"))) % 2**32


def _base_prompt(example: Example, template: str) -> Prompt:
    return Prompt(
        query_id=example.query_id,
        question=example.question,
        text=template.format(question=example.question),
    )


def _with_context(base: Prompt, context_text: str) -> Prompt:
    return Prompt(
        query_id=base.query_id,
        question=base.question,
        text=base.text + "\n" + context_text,
        context=context_text,
    )


def _score(
    config: GateConfig, generator: Generator, base: Prompt, seed: int
) -> tuple[GateScore, PrefixDraft]:
    draft = generator.decode_prefix(base, config.k)
    if config.gate_kind == "variance":
        prefixes = generator.sample_prefixes(
            base, config.k, config.n_samples, config.sample_temperature, seed
        )
        return score_prefix(config, prefixes=prefixes), draft
    return score_prefix(config, draft=draft), draft


def _fetch_context(
    retriever: Optional[Retriever],
    query_embedding: Optional[Sequence[float]],
    cost: CostParams,
) -> tuple[str, float]:
    """Real retrieval when an index and embedding are at hand, otherwise a
    simulated context of cost.t_ctx budget units."""
    if retriever is not None and query_embedding is not None:
        block = retriever.fetch(query_embedding)
        return block.text, block.token_count
    return "", cost.t_ctx


def _finish(
    example: Example,
    config: GateConfig,
    generator: Generator,
    *,
    score: GateScore,
    retrieved: bool,
    recheck_fired: bool,
    draft_tokens: int,
    context_tokens: float,
    prompt: Prompt,
    cost: CostParams,
) -> RunRecord:
    answer, out_tokens = generator.generate(prompt)
    latency = cost.per_token_cost * (draft_tokens + context_tokens + out_tokens)
    if retrieved:
        latency += cost.retrieval_overhead
    return RunRecord(
        query_id=example.query_id,
        gate_kind=config.gate_kind,
        score=score.value,
        retrieved=retrieved,
        recheck_fired=recheck_fired,
        answer=answer,
        draft_tokens=draft_tokens,
        context_tokens=context_tokens if retrieved else 0,
        output_tokens=out_tokens,
        latency_s=latency,
        em=exact_match(answer, example.gold_answers),
        f1=f1(answer, example.gold_answers),
    )


def run_query(
    example: Example,
    config: GateConfig,
    generator: Generator,
    retriever: Optional[Retriever] = None,
    query_embedding: Optional[Sequence[float]] = None,
    cost: CostParams = DEFAULT_COST,
    seed: int = 0,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    policy: str = "gate",
) -> RunRecord:
    """One gated query: draft k tokens without retrieval, score, compare to
    tau, retrieve and append context on trigger, then generate.

    policy "always"/"never" forces the decision while keeping scoring and
    accounting identical, so baseline runs are byte-comparable to gated
    runs at the sentinel thresholds.
    """
    if policy not in POLICIES:
        raise InputError(f"unknown policy {policy!r}")
    base = _base_prompt(example, template)
    score, draft = _score(config, generator, base, _query_seed(seed, example.query_id))
    if policy == "gate":
        retrieved = decide(score, config.tau)
    else:
        retrieved = policy == "always"
    context_tokens: float = 0
    prompt = base
    if retrieved:
        context_text, context_tokens = _fetch_context(retriever, query_embedding, cost)
        prompt = _with_context(base, context_text)
    return _finish(
        example,
        config,
        generator,
        score=score,
        retrieved=retrieved,
        recheck_fired=False,
        draft_tokens=draft.k,
        context_tokens=context_tokens,
        prompt=prompt,
        cost=cost,
    )


def run_query_with_recheck(
    example: Example,
    config: GateConfig,
    generator: Generator,
    retriever: Optional[Retriever] = None,
    query_embedding: Optional[Sequence[float]] = None,
    cost: CostParams = DEFAULT_COST,
    seed: int = 0,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    max_output_tokens: int = 4096,
) -> RunRecord:
    """run_query plus a periodic re-check: if the up-front score stays at or
    below tau, the gate re-scores the running prefix every recheck_stride
    output tokens and retrieves at most once, on the first crossing.

    On a trigger the prompt is rebuilt with context and the answer is
    regenerated from it; tokens drafted before the trigger stay accounted
    as draft tokens.
    """
    if config.recheck_stride is None:
        raise InputError("config.recheck_stride must be set for re-check runs")
    base = _base_prompt(example, template)
    query_seed = _query_seed(seed, example.query_id)
    score, draft = _score(config, generator, base, query_seed)
    if decide(score, config.tau):
        # Triggered up front; the re-check path never activates.
        context_text, context_tokens = _fetch_context(retriever, query_embedding, cost)
        return _finish(
            example,
            config,
            generator,
            score=score,
            retrieved=True,
            recheck_fired=False,
            draft_tokens=draft.k,
            context_tokens=context_tokens,
            prompt=_with_context(base, context_text),
            cost=cost,
        )

    running = score
    length = draft.k
    fired = False
    while length + config.recheck_stride <= max_output_tokens:
        target = length + config.recheck_stride
        extended = generator.decode_prefix(base, target)
        if extended.k < target:
            break  # generation ended before the next checkpoint
        length = target
        if config.gate_kind == "variance":
            prefixes = generator.sample_prefixes(
                base, length, config.n_samples, config.sample_temperature, query_seed
            )
            running = score_prefix(config, prefixes=prefixes)
        else:
            running = score_prefix(config, draft=extended)
        if decide(running, config.tau):
            fired = True
            break

    if fired:
        context_text, context_tokens = _fetch_context(retriever, query_embedding, cost)
        return _finish(
            example,
            config,
            generator,
            score=running,
            retrieved=True,
            recheck_fired=True,
            draft_tokens=length,
            context_tokens=context_tokens,
            prompt=_with_context(base, context_text),
            cost=cost,
        )
    return _finish(
        example,
        config,
        generator,
        score=score,
        retrieved=False,
        recheck_fired=False,
        draft_tokens=draft.k,
        context_tokens=0,
        prompt=base,
        cost=cost,
    )


@dataclass(frozen=True)
class DatasetSummary:
    n: int
    failures: int
    em_pct: float
    f1_pct: float
    retrieval_rate: float
    mean_tokens: float
    mean_latency_s: float
    never_latency_s: float
    delta_latency_s: float

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "failures": self.failures,
            "em_pct": self.em_pct,
            "f1_pct": self.f1_pct,
            "retrieval_rate": self.retrieval_rate,
            "mean_tokens": self.mean_tokens,
            "mean_latency_s": self.mean_latency_s,
            "never_latency_s": self.never_latency_s,
            "delta_latency_s": self.delta_latency_s,
        }


def run_dataset(
    examples: Sequence[Example],
    config: GateConfig,
    generator: Generator,
    retriever: Optional[Retriever] = None,
    cost: CostParams = DEFAULT_COST,
    seed: int = 0,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    policy: str = "gate",
    recheck: bool = False,
) -> tuple[list[RunRecord], list[tuple[str, str]], DatasetSummary]:
    """Run every query independently; per-query errors are collected, not
    fatal.  Returns (records, failures, summary).

    The summary's delta latency compares against a reference pass that
    decodes every query from the base prompt with no draft and no
    retrieval, priced under the same cost parameters.
    """
    records: list[RunRecord] = []
    failures: list[tuple[str, str]] = []
    never_latencies: list[float] = []
    for example in examples:
        embedding = None
        if hasattr(generator, "query_embedding"):
            try:
                embedding = generator.query_embedding(example.query_id)
            except DataError:
                embedding = None
        try:
            if recheck:
                record = run_query_with_recheck(
                    example, config, generator, retriever, embedding, cost, seed, template
                )
            else:
                record = run_query(
                    example, config, generator, retriever, embedding, cost, seed, template, policy
                )
            base = _base_prompt(example, template)
            _, never_out = generator.generate(base)
        except Exception as exc:  # isolate per-query failures
            failures.append((example.query_id, f"{type(exc).__name__}: {exc}"))
            continue
        records.append(record)
        never_latencies.append(cost.per_token_cost * never_out)

    n = len(records)
    if n == 0:
        summary = DatasetSummary(0, len(failures), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        return records, failures, summary
    mean_latency = math.fsum(r.latency_s for r in records) / n
    never_latency = math.fsum(never_latencies) / n
    summary = DatasetSummary(
        n=n,
        failures=len(failures),
        em_pct=100.0 * math.fsum(r.em for r in records) / n,
        f1_pct=100.0 * math.fsum(r.f1 for r in records) / n,
        retrieval_rate=sum(r.retrieved for r in records) / n,
        mean_tokens=math.fsum(r.draft_tokens + r.context_tokens + r.output_tokens for r in records) / n,
        mean_latency_s=mean_latency,
        never_latency_s=never_latency,
        delta_latency_s=mean_latency - never_latency,
    )
    return records, failures, summary
