"""Selective retrieval gating for RAG pipelines.

The gate reads uncertainty off a short no-context draft and retrieves only
when the score clears a threshold; the rest of the package calibrates that
threshold, serves exact dense retrieval, replays recorded traces, sweeps
accuracy/cost frontiers, and stress-tests the policy on synthetic
populations.
"""

from .calibration import (
    CostParams,
    DevRecord,
    accuracy_opt_threshold,
    delta_latency,
    expected_tokens,
    quantile_threshold,
    realized_rate,
)
from .errors import ConfigError, DataError, FormatError, InputError, RaggateError
from .gates import (
    GateConfig,
    GateScore,
    PrefixDraft,
    StepStat,
    StochasticPrefixSet,
    decide,
    entropy_gate_score,
    logit_gap,
    margin_gate_score,
    margin_score_from_gaps,
    score_prefix,
    softmax,
    step_entropy,
    variance_gate_score,
)
from .metrics import exact_match, f1, normalize_answer
from .pipeline import (
    Example,
    Prompt,
    RunRecord,
    TraceReplayGenerator,
    run_dataset,
    run_query,
    run_query_with_recheck,
)
from .retrieval import (
    ContextBlock,
    EmbeddingIndex,
    PassageRecord,
    Retriever,
    SearchHit,
    chunk_corpus,
    format_context,
    load_index,
    normalize,
    save_index,
    search,
)
from .reports import MetricRow, emit_report, sweep
from .traces import TraceRecord, load_traces, write_traces

__version__ = "0.1.0"
