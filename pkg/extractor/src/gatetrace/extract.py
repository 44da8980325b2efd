"""Trace extraction from a causal LM: greedy draft statistics, sampled
prefixes, and both-branch answers, written in the primary trace schema.

The extractor dumps sufficient statistics only (per-step exact entropy
over the full softmax, the top-1/top-2 logit gap, sampled token ids); gate
scores themselves are never computed here.  Per-step entropy/gap use the
primary package's own primitives, so there is a single definition of both.

Determinism: greedy decoding is deterministic; sampling is seeded per
query from the job seed, so re-running a job writes byte-identical files.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

from raggate.gates import StepStat, logit_gap, softmax, step_entropy
from raggate.pipeline import Example, load_examples
from raggate.retrieval import format_context, load_index, read_passages, search
from raggate.traces import TraceRecord, write_traces

from .encode import TextEncoder
from .jobs import ExtractionJob, write_provenance


@dataclass
class StepLogitDump:
    """Top-M logits plus what is needed to bound the truncation error."""

    top_logits: list[float]
    logsumexp: float
    tail_mass: float
    tail_entropy_bound: float


def _query_seed(master_seed: int, query_id: str) -> int:
    return (master_seed * 0x9E3779B1 + zlib.crc32(query_id.encode("utf-8"))) % 2**32


def _tail_entropy_bound(tail_mass: float, tail_atoms: int) -> float:
    """Max entropy a distribution tail of this mass over this many atoms
    can contribute: tail_mass * log(atoms / tail_mass)."""
    if tail_mass <= 0.0 or tail_atoms <= 0:
        return 0.0
    return tail_mass * math.log(tail_atoms / tail_mass)


class TraceExtractor:
    def __init__(self, job: ExtractionJob):
        self.job = job
        self.tokenizer = AutoTokenizer.from_pretrained(job.model)
        self.model = AutoModelForCausalLM.from_pretrained(job.model)
        self.model.eval()
        self.encoder = TextEncoder(job.encoder)
        self.index = load_index(job.index_path)
        self.passages = {p.id: p for p in read_passages(job.passages_path)}
        self._pad_id = self.tokenizer.pad_token_id
        if self._pad_id is None:
            self._pad_id = self.tokenizer.eos_token_id
        if self.index.dim != self.encoder.dim:
            raise ValueError(
                f"index dim {self.index.dim} does not match encoder dim {self.encoder.dim}"
            )

    # -- model calls --------------------------------------------------------

    def _encode_prompt(self, text: str) -> dict:
        return self.tokenizer(text, return_tensors="pt")

    @torch.no_grad()
    def _greedy_draft(self, prompt: str) -> tuple[list[StepStat], list[StepLogitDump] | None]:
        """k greedy steps; statistics come from the raw (pre-processor)
        logits so forced-length decoding cannot distort them."""
        enc = self._encode_prompt(prompt)
        out = self.model.generate(
            **enc,
            max_new_tokens=self.job.k,
            min_new_tokens=self.job.k,
            do_sample=False,
            output_logits=True,
            return_dict_in_generate=True,
            pad_token_id=self._pad_id,
        )
        steps: list[StepStat] = []
        dumps: list[StepLogitDump] | None = [] if self.job.top_m else None
        for row_t in out.logits:
            row = row_t[0].to(torch.float64).numpy()
            probs = softmax(row)
            steps.append(StepStat(entropy_nats=step_entropy(probs), gap=logit_gap(row)))
            if dumps is not None:
                dumps.append(self._dump_top_m(row, probs))
        return steps, dumps

    def _dump_top_m(self, row: np.ndarray, probs: np.ndarray) -> StepLogitDump:
        m = min(self.job.top_m, row.size)
        top_idx = np.argsort(row)[::-1][:m]
        shift = float(row.max())
        logsumexp = shift + math.log(float(np.exp(row - shift).sum()))
        tail_mass = max(0.0, 1.0 - float(probs[top_idx].sum()))
        return StepLogitDump(
            top_logits=[float(v) for v in row[top_idx]],
            logsumexp=logsumexp,
            tail_mass=tail_mass,
            tail_entropy_bound=_tail_entropy_bound(tail_mass, row.size - m),
        )

    @torch.no_grad()
    def _sample_prefixes(self, prompt: str, seed: int) -> list[list[int]]:
        enc = self._encode_prompt(prompt)
        torch.manual_seed(seed)
        out = self.model.generate(
            **enc,
            max_new_tokens=self.job.k,
            min_new_tokens=self.job.k,
            do_sample=True,
            temperature=self.job.temperature,
            top_k=0,
            num_return_sequences=self.job.n_samples,
            pad_token_id=self._pad_id,
        )
        prompt_len = enc["input_ids"].shape[1]
        return [[int(t) for t in row[prompt_len:]] for row in out]

    @torch.no_grad()
    def _answer(self, prompt: str) -> tuple[str, int]:
        enc = self._encode_prompt(prompt)
        out = self.model.generate(
            **enc,
            max_new_tokens=self.job.max_answer_tokens,
            do_sample=False,
            pad_token_id=self._pad_id,
        )
        new_ids = out[0][enc["input_ids"].shape[1] :].tolist()
        if self.tokenizer.eos_token_id is not None and self.tokenizer.eos_token_id in new_ids:
            new_ids = new_ids[: new_ids.index(self.tokenizer.eos_token_id)]
        text = self.tokenizer.decode(new_ids, skip_special_tokens=True).strip()
        return text, len(new_ids)

    # -- per-query assembly --------------------------------------------------

    def extract_one(self, example: Example) -> tuple[TraceRecord, list[StepLogitDump] | None]:
        base_prompt = self.job.prompt_template.format(question=example.question)
        steps, dumps = self._greedy_draft(base_prompt)
        samples = self._sample_prefixes(base_prompt, _query_seed(self.job.seed, example.query_id))

        embedding = self.encoder.encode_one(f"{self.job.query_prefix}{example.question}")
        hits = search(self.index, embedding.astype(np.float64), self.job.topk)
        context = format_context(hits, self.passages, self.job.ctx_budget)

        answer_no_ctx, out0 = self._answer(base_prompt)
        answer_with_ctx, out1 = self._answer(base_prompt + "\n" + context.text)

        record = TraceRecord(
            query_id=example.query_id,
            question=example.question,
            gold_answers=list(example.gold_answers),
            steps=steps,
            answer_no_ctx=answer_no_ctx,
            answer_with_ctx=answer_with_ctx,
            out_tokens_no_ctx=out0,
            out_tokens_with_ctx=out1,
            samples=samples,
            query_embedding=[float(v) for v in embedding],
        )
        return record, dumps


def extract_traces(job: ExtractionJob) -> list[TraceRecord]:
    """Run the whole job: read the dataset, extract every query, write the
    trace file (plus the optional top-M logit sidecar and job provenance)."""
    examples = load_examples(job.dataset_path)
    extractor = TraceExtractor(job)
    records = []
    sidecar_lines = []
    for example in examples:
        record, dumps = extractor.extract_one(example)
        records.append(record)
        if dumps is not None:
            sidecar_lines.append(
                {
                    "query_id": record.query_id,
                    "steps": [
                        {
                            "top_logits": d.top_logits,
                            "logsumexp": d.logsumexp,
                            "tail_mass": d.tail_mass,
                            "tail_entropy_bound": d.tail_entropy_bound,
                        }
                        for d in dumps
                    ],
                }
            )
    out_path = Path(job.output_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_traces(records, out_path)
    if job.top_m:
        with open(sidecar_path(out_path), "w", encoding="utf-8") as fh:
            for line in sidecar_lines:
                fh.write(json.dumps(line, separators=(",", ":")) + "\n")
    write_provenance(job, out_path.with_suffix(out_path.suffix + ".job.json"))
    return records


def sidecar_path(trace_path: str | Path) -> Path:
    trace_path = Path(trace_path)
    return trace_path.with_suffix(trace_path.suffix + ".logits.jsonl")
