"""Threshold calibration and the expected-token / latency cost model.

Two ways to pick the decision threshold tau from a dev split:

  * quantile_threshold  -- hit a target retrieval budget rho by taking the
    (1 - rho) empirical quantile of the dev gate scores, counted so that
    the realized retrieval rate never exceeds the budget;
  * accuracy_opt_threshold -- pick the grid tau maximizing gated dev
    accuracy, breaking ties toward fewer retrievals.

The cost model is analytic: expected tokens per query and added seconds
per query relative to a never-retrieve baseline, both driven by the
retrieval rate pi.

Dev score files are tab-separated text, one record per line:

    query_id <TAB> score                      (scores file)
    query_id <TAB> score <TAB> a0 <TAB> a1    (dev outcome file)

Lines starting with '#' are ignored.  All functions here are pure and
deterministic; partition-then-merge parallel counting would give the same
answers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputError

ALWAYS_RETRIEVE_TAU = float("-inf")


def _check_scores(scores: Sequence[float]) -> "np.ndarray":
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InputError("score sample must be 1-D and non-empty")
    if not np.all(np.isfinite(arr)):
        raise InputError("score sample contains non-finite values")
    return arr


def quantile_threshold(scores: Sequence[float], rho: float) -> float:
    """Threshold whose realized retrieval rate on `scores` is the largest
    value not exceeding the budget rho.

    rho=0 returns max(scores) (never retrieve on this sample); rho=1
    returns the -inf sentinel (always retrieve).
    """
    arr = _check_scores(scores)
    if not (0.0 <= rho <= 1.0):
        raise ConfigError(f"budget rho must lie in [0, 1], got {rho!r}")
    n = arr.size
    # Exact floor of rho*n; float multiplication could round up across an
    # integer boundary and overshoot the budget.
    allowed = int(Fraction(rho) * n)
    if allowed >= n:
        return ALWAYS_RETRIEVE_TAU
    return float(np.sort(arr)[n - 1 - allowed])


def realized_rate(scores: Sequence[float], tau: float) -> float:
    """Fraction of scores strictly exceeding tau."""
    arr = _check_scores(scores)
    return int(np.count_nonzero(arr > tau)) / arr.size


@dataclass(frozen=True)
class DevRecord:
    """One dev query: gate score plus correctness with and without retrieval."""

    u: float
    a0: float
    a1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.a0 <= 1.0 and 0.0 <= self.a1 <= 1.0):
            raise InputError(f"a0/a1 must lie in [0, 1], got {self.a0!r}, {self.a1!r}")
        if not math.isfinite(self.u):
            raise InputError(f"score must be finite, got {self.u!r}")

    @property
    def delta(self) -> float:
        return self.a1 - self.a0


def gated_accuracy(dev: Sequence[DevRecord], tau: float) -> float:
    """Mean dev correctness when retrieving exactly on u > tau."""
    if len(dev) == 0:
        raise InputError("dev set is empty")
    return math.fsum(r.a0 + r.delta * (r.u > tau) for r in dev) / len(dev)


def accuracy_opt_threshold(dev: Sequence[DevRecord], grid: Sequence[float]) -> float:
    """Grid tau maximizing gated dev accuracy; ties go to the larger tau
    (fewer retrievals)."""
    if len(dev) == 0 or len(grid) == 0:
        raise InputError("dev set and tau grid must be non-empty")
    best_tau = None
    best_acc = -math.inf
    for tau in grid:
        acc = gated_accuracy(dev, tau)
        if acc > best_acc or (acc == best_acc and tau > best_tau):
            best_tau, best_acc = tau, acc
    return float(best_tau)


@dataclass(frozen=True)
class CostParams:
    """Token and latency cost parameters.

    t_draft       always-incurred draft tokens (the gate's k)
    t_ctx         context tokens added when retrieving
    e_out0        expected output tokens without retrieval
    e_out1        expected output tokens with retrieval
    per_token_cost    seconds per token for latency projection (0 = off)
    retrieval_overhead fixed seconds per retrieval call
    """

    t_draft: float
    t_ctx: float
    e_out0: float
    e_out1: float
    per_token_cost: float = 0.0
    retrieval_overhead: float = 0.0

    def __post_init__(self) -> None:
        for name in ("t_draft", "t_ctx", "e_out0", "e_out1", "per_token_cost", "retrieval_overhead"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v!r}")


def expected_tokens(params: CostParams, pi: float) -> float:
    """Expected LM tokens per query at retrieval rate pi:
    t_draft + (1 - pi) * e_out0 + pi * (t_ctx + e_out1)."""
    if not (0.0 <= pi <= 1.0):
        raise InputError(f"retrieval rate must lie in [0, 1], got {pi!r}")
    return params.t_draft + (1.0 - pi) * params.e_out0 + pi * (params.t_ctx + params.e_out1)


def delta_latency(params: CostParams, pi: float, t_retrieval: float | None = None) -> float:
    """Added seconds per query over the never-retrieve baseline.

    Decomposes into the draft overhead plus, at rate pi, the retrieval call
    and the extra decode cost of the longer with-context prompt.
    """
    if not (0.0 <= pi <= 1.0):
        raise InputError(f"retrieval rate must lie in [0, 1], got {pi!r}")
    overhead = params.retrieval_overhead if t_retrieval is None else t_retrieval
    if not (math.isfinite(overhead) and overhead >= 0):
        raise InputError(f"retrieval time must be finite and >= 0, got {overhead!r}")
    extra_decode = params.t_ctx + params.e_out1 - params.e_out0
    return params.per_token_cost * params.t_draft + pi * (
        overhead + params.per_token_cost * extra_decode
    )


# ---------------------------------------------------------------------------
# Dev score file I/O (tab-separated, one record per line)
# ---------------------------------------------------------------------------


def write_scores(path: str | Path, items: Iterable[tuple[str, float]]) -> int:
    lines = [f"{qid}\t{score!r}\n" for qid, score in items]
    Path(path).write_text("".join(lines), encoding="utf-8")
    return len(lines)


def _data_lines(path: str | Path) -> list[tuple[int, list[str]]]:
    out = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        out.append((lineno, line.split("\t")))
    return out


def load_scores(path: str | Path) -> list[tuple[str, float]]:
    """Parse a two-column scores file into (query_id, score) pairs."""
    items = []
    for lineno, fields in _data_lines(path):
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 'query_id<TAB>score', got {len(fields)} fields")
        try:
            items.append((fields[0], float(fields[1])))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad score {fields[1]!r}") from exc
    if not items:
        raise DataError(f"{path}: no score records")
    return items


def load_dev_records(path: str | Path) -> list[tuple[str, DevRecord]]:
    """Parse a four-column dev file into (query_id, DevRecord) pairs."""
    items = []
    for lineno, fields in _data_lines(path):
        if len(fields) != 4:
            raise DataError(
                f"{path}:{lineno}: expected 'query_id<TAB>score<TAB>a0<TAB>a1', got {len(fields)} fields"
            )
        try:
            rec = DevRecord(u=float(fields[1]), a0=float(fields[2]), a1=float(fields[3]))
        except (ValueError, InputError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        items.append((fields[0], rec))
    if not items:
        raise DataError(f"{path}: no dev records")
    return items
