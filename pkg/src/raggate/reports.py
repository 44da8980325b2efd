"""Threshold sweeps over replay traces and report emission.

Each trace record is scored once; every tau in the grid only re-thresholds
the cached score, so drafts are never recomputed.  The +inf row reproduces
a never-retrieve run and the -inf row an always-retrieve run exactly.

Reports are emitted as CSV (repr-exact floats, parse-stable) or as a
markdown table formatted for reading: EM/F1 to one decimal, rates and
seconds to three, and "--" in the tau column for the +/-inf baseline
rows.
"""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass
from typing import Sequence

from .calibration import CostParams
from .errors import ConfigError
from .gates import GateConfig, score_prefix
from .metrics import exact_match, f1
from .traces import TraceRecord

REPORT_FORMATS = ("csv", "md")


@dataclass(frozen=True)
class MetricRow:
    """One operating point: quality, retrieval rate, and simulated cost."""

    tau: float
    em: float
    f1: float
    retrieval_rate: float
    delta_latency_s: float
    mean_tokens: float

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "em": self.em,
            "f1": self.f1,
            "retrieval_rate": self.retrieval_rate,
            "delta_latency_s": self.delta_latency_s,
            "mean_tokens": self.mean_tokens,
        }


@dataclass(frozen=True)
class _ScoredQuery:
    u: float
    em0: int
    f10: float
    em1: int
    f11: float
    draft_tokens: int
    out0: int
    out1: int


def score_traces(records: Sequence[TraceRecord], config: GateConfig) -> list[tuple[str, float]]:
    """Gate score per record under config (first k steps / sample columns)."""
    out = []
    for record in records:
        if config.gate_kind == "variance":
            prefixes = record.prefix_set(
                temperature=config.sample_temperature,
                n=config.n_samples,
                k=min(config.k, len(record.samples[0])) if record.samples else None,
            )
            score = score_prefix(config, prefixes=prefixes)
        else:
            score = score_prefix(config, draft=record.draft(min(config.k, len(record.steps))))
        out.append((record.query_id, score.value))
    return out


def _score_for_sweep(records: Sequence[TraceRecord], config: GateConfig) -> list[_ScoredQuery]:
    scored = []
    values = dict(score_traces(records, config))
    for record in records:
        k_used = min(config.k, len(record.steps))
        scored.append(
            _ScoredQuery(
                u=values[record.query_id],
                em0=exact_match(record.answer_no_ctx, record.gold_answers),
                f10=f1(record.answer_no_ctx, record.gold_answers),
                em1=exact_match(record.answer_with_ctx, record.gold_answers),
                f11=f1(record.answer_with_ctx, record.gold_answers),
                draft_tokens=k_used,
                out0=record.out_tokens_no_ctx,
                out1=record.out_tokens_with_ctx,
            )
        )
    return scored


def sweep(
    records: Sequence[TraceRecord],
    config: GateConfig,
    tau_grid: Sequence[float],
    cost: CostParams,
) -> list[MetricRow]:
    """One MetricRow per grid tau, in grid order."""
    if len(tau_grid) == 0:
        raise ConfigError("tau grid is empty")
    scored = _score_for_sweep(records, config)
    n = len(scored)
    if n == 0:
        raise ConfigError("no trace records to sweep")
    rows = []
    for tau in tau_grid:
        hits = 0
        em_terms, f1_terms, token_terms, delta_terms = [], [], [], []
        for q in scored:
            retrieved = q.u > tau
            hits += retrieved
            em_terms.append(q.em1 if retrieved else q.em0)
            f1_terms.append(q.f11 if retrieved else q.f10)
            token_terms.append(
                q.draft_tokens + (cost.t_ctx + q.out1 if retrieved else q.out0)
            )
            extra = cost.retrieval_overhead + cost.per_token_cost * (cost.t_ctx + q.out1 - q.out0)
            delta_terms.append(cost.per_token_cost * q.draft_tokens + (extra if retrieved else 0.0))
        rows.append(
            MetricRow(
                tau=float(tau),
                em=100.0 * math.fsum(em_terms) / n,
                f1=100.0 * math.fsum(f1_terms) / n,
                retrieval_rate=hits / n,
                delta_latency_s=math.fsum(delta_terms) / n,
                mean_tokens=math.fsum(token_terms) / n,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------


def emit_table(headers: Sequence[str], rows: Sequence[Sequence[str]], fmt: str) -> str:
    """Render a generic table as CSV or markdown (shared with the sim lab)."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "md":
        def cell(value: str) -> str:
            return value.replace("|", "\\|")

        lines = ["| " + " | ".join(cell(h) for h in headers) + " |",
                 "|" + "|".join(" --- " for _ in headers) + "|"]
        for row in rows:
            lines.append("| " + " | ".join(cell(v) for v in row) + " |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


METRIC_HEADERS = ("tau", "em", "f1", "retrieval_rate", "delta_latency_s", "mean_tokens")


def emit_report(rows: Sequence[MetricRow], fmt: str) -> str:
    """Render MetricRows; CSV keeps full precision so rows parse back exactly."""
    if fmt == "csv":
        body = [
            [repr(r.tau), repr(r.em), repr(r.f1), repr(r.retrieval_rate),
             repr(r.delta_latency_s), repr(r.mean_tokens)]
            for r in rows
        ]
        return emit_table(METRIC_HEADERS, body, "csv")
    body = [
        [
            "--" if math.isinf(r.tau) else f"{r.tau:g}",
            f"{r.em:.1f}",
            f"{r.f1:.1f}",
            f"{r.retrieval_rate:.3f}",
            f"{r.delta_latency_s:+.3f}",
            f"{r.mean_tokens:.1f}",
        ]
        for r in rows
    ]
    return emit_table(METRIC_HEADERS, body, fmt)


def parse_report_csv(text: str) -> list[MetricRow]:
    """Inverse of emit_report(..., "csv")."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != list(METRIC_HEADERS):
        raise ConfigError(f"unexpected report header {header!r}")
    return [
        MetricRow(
            tau=float(r[0]), em=float(r[1]), f1=float(r[2]),
            retrieval_rate=float(r[3]), delta_latency_s=float(r[4]), mean_tokens=float(r[5]),
        )
        for r in reader
    ]
