"""Training-free uncertainty gates over a short no-context prefix draft.

Three signals are supported, each aggregated as the arithmetic mean of a
per-step statistic over the k drafted tokens:

  entropy   mean softmax entropy of the next-token distribution, in nats
  margin    mean exp(-gap/beta), where gap is the top-1 minus top-2 logit
  variance  mean disagreement rate across N stochastic prefix samples

The retrieve/skip decision is a strict comparison against a threshold:
retrieve iff score > tau (a score exactly equal to tau skips retrieval).

Everything here is a pure function over immutable inputs and is safe to
call concurrently.
"""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError

GATE_KINDS = ("entropy", "margin", "variance")

# Tolerance for checking that stored per-step statistics agree with
# statistics recomputed from raw logit rows.
RECOMPUTE_TOL = 1e-9


def _as_row(values: Sequence[float]) -> np.ndarray:
    row = np.asarray(values, dtype=np.float64)
    if row.ndim != 1 or row.size < 2:
        raise InputError("logit row must be 1-D with at least 2 entries")
    if not np.all(np.isfinite(row)):
        raise InputError("logit row contains non-finite values")
    return row


def softmax(row: Sequence[float]) -> np.ndarray:
    """Numerically safe softmax of a logit row (max-subtracted)."""
    values = _as_row(row)
    shifted = values - values.max()
    exps = np.exp(shifted)
    return exps / exps.sum()


def step_entropy(probs: Sequence[float]) -> float:
    """Entropy of one probability vector, in nats.

    0 * log 0 is treated as 0.  The result is clipped into the exact
    mathematical range [0, ln V] to absorb floating-point noise.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise InputError("probability vector must be 1-D and non-empty")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InputError("probability vector has negative or non-finite entries")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InputError(f"probabilities sum to {p.sum()!r}, not 1 within 1e-6")
    nz = p[p > 0]
    h = float(-np.sum(nz * np.log(nz)))
    return min(max(h, 0.0), math.log(p.size))


def logit_gap(row: Sequence[float]) -> float:
    """Top-1 minus top-2 logit value; 0 when the two largest entries tie."""
    values = _as_row(row)
    top2 = np.partition(values, -2)[-2:]
    return float(top2[1] - top2[0])


@dataclass(frozen=True)
class StepStat:
    """Per-step draft statistics sufficient for the entropy and margin gates."""

    entropy_nats: float
    gap: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.entropy_nats) and self.entropy_nats >= 0):
            raise InputError(f"entropy_nats must be finite and >= 0, got {self.entropy_nats!r}")
        if not (math.isfinite(self.gap) and self.gap >= 0):
            raise InputError(f"gap must be finite and >= 0, got {self.gap!r}")


@dataclass(frozen=True)
class PrefixDraft:
    """A k-token no-context draft, stored as per-step statistics.

    Raw logit rows are optional; when present, the stored statistics must
    match statistics recomputed from the rows within RECOMPUTE_TOL.
    """

    steps: tuple[StepStat, ...]
    raw_rows: Optional[tuple[tuple[float, ...], ...]] = None

    def __post_init__(self) -> None:
        if len(self.steps) < 1:
            raise InputError("draft must contain at least one step")
        if self.raw_rows is not None:
            if len(self.raw_rows) != len(self.steps):
                raise InputError("raw_rows length does not match steps")
            for step, row in zip(self.steps, self.raw_rows):
                h = step_entropy(softmax(row))
                g = logit_gap(row)
                if abs(h - step.entropy_nats) > RECOMPUTE_TOL or abs(g - step.gap) > RECOMPUTE_TOL:
                    raise InputError(
                        "stored step statistics disagree with raw logit rows "
                        f"(entropy {step.entropy_nats!r} vs {h!r}, gap {step.gap!r} vs {g!r})"
                    )

    @property
    def k(self) -> int:
        return len(self.steps)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "PrefixDraft":
        """Build a draft from raw logit rows, keeping the rows attached."""
        steps = tuple(
            StepStat(entropy_nats=step_entropy(softmax(r)), gap=logit_gap(r)) for r in rows
        )
        return cls(steps=steps, raw_rows=tuple(tuple(float(v) for v in r) for r in rows))

    def truncated(self, k: int) -> "PrefixDraft":
        """First k steps (k may not exceed the draft length)."""
        if not 1 <= k <= self.k:
            raise InputError(f"cannot truncate draft of length {self.k} to k={k}")
        rows = self.raw_rows[:k] if self.raw_rows is not None else None
        return PrefixDraft(steps=self.steps[:k], raw_rows=rows)


@dataclass(frozen=True)
class StochasticPrefixSet:
    """N sampled prefixes of k token ids each, drawn at one temperature."""

    samples: tuple[tuple[int, ...], ...]
    temperature: float

    def __post_init__(self) -> None:
        if len(self.samples) < 2:
            raise InputError("need at least 2 sampled prefixes")
        k = len(self.samples[0])
        if k < 1:
            raise InputError("sampled prefixes must be non-empty")
        for row in self.samples:
            if len(row) != k:
                raise InputError("sampled prefixes have ragged lengths")
            if any(
                isinstance(t, bool) or not isinstance(t, numbers.Integral) or t < 0 for t in row
            ):
                raise InputError("token ids must be non-negative integers")
        if not (math.isfinite(self.temperature) and self.temperature > 0):
            raise InputError(f"temperature must be > 0, got {self.temperature!r}")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def k(self) -> int:
        return len(self.samples[0])

    def truncated(self, n: Optional[int] = None, k: Optional[int] = None) -> "StochasticPrefixSet":
        n = self.n if n is None else n
        k = self.k if k is None else k
        if not 2 <= n <= self.n or not 1 <= k <= self.k:
            raise InputError(f"cannot truncate {self.n}x{self.k} sample set to {n}x{k}")
        return StochasticPrefixSet(
            samples=tuple(row[:k] for row in self.samples[:n]), temperature=self.temperature
        )


@dataclass(frozen=True)
class GateConfig:
    """Gate kind plus every knob the pipeline needs to score and decide.

    Defaults: k=20 draft tokens, beta=1 margin link temperature, 3 samples
    at temperature 0.7 for the variance gate.
    """

    gate_kind: str
    tau: float
    k: int = 20
    beta: float = 1.0
    n_samples: int = 3
    sample_temperature: float = 0.7
    recheck_stride: Optional[int] = None

    def __post_init__(self) -> None:
        if self.gate_kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.gate_kind!r}; expected one of {GATE_KINDS}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if not self.sample_temperature > 0:
            raise ConfigError(f"sample_temperature must be > 0, got {self.sample_temperature}")
        if math.isnan(self.tau):
            raise ConfigError("tau must not be NaN")
        if self.recheck_stride is not None and self.recheck_stride < 1:
            raise ConfigError(f"recheck_stride must be > 0, got {self.recheck_stride}")


@dataclass(frozen=True)
class GateScore:
    """Scalar uncertainty aggregated over k contributing steps."""

    value: float
    gate_kind: str
    k: int


def _mean(values: Sequence[float]) -> float:
    # np.mean uses pairwise summation, which keeps long reductions stable.
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def entropy_gate_score(draft: PrefixDraft) -> GateScore:
    """Mean per-step entropy of the draft (nats)."""
    value = _mean([s.entropy_nats for s in draft.steps])
    return GateScore(value=value, gate_kind="entropy", k=draft.k)


def margin_score_from_gaps(gaps: Sequence[float], beta: float = 1.0) -> float:
    """Mean exp(-gap/beta) of raw gap values; lies in (0, 1]."""
    if not (math.isfinite(beta) and beta > 0):
        raise ConfigError(f"beta must be > 0, got {beta!r}")
    arr = np.asarray(gaps, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise InputError("need at least one gap value")
    return float(np.mean(np.exp(-arr / beta)))


def margin_gate_score(draft: PrefixDraft, beta: float = 1.0) -> GateScore:
    """Mean exp(-gap/beta) over the draft; lies in (0, 1]."""
    value = margin_score_from_gaps([s.gap for s in draft.steps], beta)
    return GateScore(value=value, gate_kind="margin", k=draft.k)


def variance_gate_score(prefixes: StochasticPrefixSet) -> GateScore:
    """Mean per-step disagreement (N - mode count) / N; lies in [0, (N-1)/N].

    Only the size of the modal count matters, so token ties need no
    tie-breaking rule.  The counts are summed in exact integer arithmetic
    and divided once, so the (N-1)/N upper bound is attained exactly when
    every step has N pairwise-distinct samples.
    """
    n = prefixes.n
    disagreement = 0
    for t in range(prefixes.k):
        counts: dict[int, int] = {}
        for row in prefixes.samples:
            counts[row[t]] = counts.get(row[t], 0) + 1
        disagreement += n - max(counts.values())
    return GateScore(value=disagreement / (n * prefixes.k), gate_kind="variance", k=prefixes.k)


def decide(score: GateScore | float, tau: float) -> bool:
    """Retrieve iff score > tau (strict; a score equal to tau skips)."""
    value = score.value if isinstance(score, GateScore) else float(score)
    return value > tau


def score_prefix(
    config: GateConfig,
    draft: Optional[PrefixDraft] = None,
    prefixes: Optional[StochasticPrefixSet] = None,
) -> GateScore:
    """Score a draft (and/or sampled prefixes) under the configured gate."""
    if config.gate_kind == "variance":
        if prefixes is None:
            raise InputError("variance gate requires sampled prefixes")
        return variance_gate_score(prefixes)
    if draft is None:
        raise InputError(f"{config.gate_kind} gate requires a prefix draft")
    if config.gate_kind == "entropy":
        return entropy_gate_score(draft)
    return margin_gate_score(draft, config.beta)
