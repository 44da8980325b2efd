"""Synthetic populations for checking the gate's accuracy-dominance claims
and the budget-calibration consistency of quantile thresholds.

A population is a list of (u, a0, a1) records.  The dominance checks run on
the *realized* population in exact arithmetic, so they hold whenever the
realized sign conditions hold, with no distributional assumptions; Monte
Carlo enters only through the consistency experiment.

Continuous score distributions are the sensible default here: an atom at
the quantile makes the realized retrieval rate jump (documented pathology,
not a bug).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .calibration import quantile_threshold, realized_rate
from .errors import ConfigError, InputError

DIST_KINDS = ("point", "uniform", "normal")


@dataclass(frozen=True)
class DistSpec:
    """A tiny distribution family: point mass, uniform(a, b), or normal(a, b)
    with b the standard deviation."""

    kind: str
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in DIST_KINDS:
            raise ConfigError(f"unknown distribution kind {self.kind!r}; expected one of {DIST_KINDS}")
        if self.kind == "uniform" and not self.b >= self.a:
            raise ConfigError(f"uniform needs b >= a, got a={self.a}, b={self.b}")
        if self.kind == "normal" and not self.b >= 0:
            raise ConfigError(f"normal needs std >= 0, got {self.b}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "point":
            return np.full(size, self.a, dtype=np.float64)
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size)
        return rng.normal(self.a, self.b, size)

    @property
    def mean(self) -> float:
        return (self.a + self.b) / 2.0 if self.kind == "uniform" else self.a


@dataclass(frozen=True)
class PopulationRecord:
    u: float
    a0: float
    a1: float

    @property
    def delta(self) -> float:
        return self.a1 - self.a0


@dataclass(frozen=True)
class PopulationSpec:
    """Controls for a synthetic population split at tau_star: retrieval
    benefit delta is drawn from delta_low on {u <= tau_star} (mean <= 0)
    and from delta_high on {u > tau_star} (mean >= 0)."""

    n: int
    tau_star: float
    delta_low: DistSpec
    delta_high: DistSpec
    u_dist: DistSpec
    a0_base: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError(f"population size must be >= 1, got {self.n}")
        if not 0.0 <= self.a0_base <= 1.0:
            raise ConfigError(f"a0_base must lie in [0, 1], got {self.a0_base}")
        if self.delta_low.mean > 0:
            raise ConfigError(f"delta_low mean must be <= 0, got {self.delta_low.mean}")
        if self.delta_high.mean < 0:
            raise ConfigError(f"delta_high mean must be >= 0, got {self.delta_high.mean}")


def generate(spec: PopulationSpec) -> list[PopulationRecord]:
    """Sample a population, clip deltas so a0 + delta stays in [0, 1], and
    verify post hoc that the realized conditional delta means keep the
    configured signs (clipping can destroy them; that is invalid-config).
    """
    rng = np.random.default_rng(spec.seed)
    u = spec.u_dist.sample(rng, spec.n)
    a0 = (rng.random(spec.n) < spec.a0_base).astype(np.float64)
    low_draw = spec.delta_low.sample(rng, spec.n)
    high_draw = spec.delta_high.sample(rng, spec.n)
    above = u > spec.tau_star
    delta = np.where(above, high_draw, low_draw)
    delta = np.clip(delta, -a0, 1.0 - a0)

    if np.any(~above):
        low_mean = math.fsum(delta[~above]) / int((~above).sum())
        if low_mean > 0:
            raise ConfigError(
                f"realized mean delta below tau_star is {low_mean:.6g} > 0 after clipping; "
                "population spec is infeasible"
            )
        if spec.delta_low.mean < 0 and low_mean == 0.0:
            raise ConfigError(
                "clipping erased all negative delta mass below tau_star "
                "(e.g. a0_base=0 cannot realize harmful retrieval); population spec is infeasible"
            )
    if np.any(above):
        high_mean = math.fsum(delta[above]) / int(above.sum())
        if high_mean < 0:
            raise ConfigError(
                f"realized mean delta above tau_star is {high_mean:.6g} < 0 after clipping; "
                "population spec is infeasible"
            )
        if spec.delta_high.mean > 0 and high_mean == 0.0:
            raise ConfigError(
                "clipping erased all positive delta mass above tau_star "
                "(e.g. a0_base=1 cannot realize helpful retrieval); population spec is infeasible"
            )
    return [
        PopulationRecord(u=float(u[i]), a0=float(a0[i]), a1=float(a0[i] + delta[i]))
        for i in range(spec.n)
    ]


@dataclass(frozen=True)
class PolicyAccuracy:
    acc_never: float
    acc_always: float
    acc_gate: float
    pi: float


def evaluate_policies(pop: Sequence[PopulationRecord], tau: float) -> PolicyAccuracy:
    """Exact population means for never / always / gated-at-tau."""
    if len(pop) == 0:
        raise InputError("population is empty")
    n = len(pop)
    return PolicyAccuracy(
        acc_never=math.fsum(r.a0 for r in pop) / n,
        acc_always=math.fsum(r.a1 for r in pop) / n,
        acc_gate=math.fsum(r.a0 + r.delta * (r.u > tau) for r in pop) / n,
        pi=sum(r.u > tau for r in pop) / n,
    )


# Dominance margins are exact sums over the realized population; this
# tolerance only absorbs float summation noise.
EXACT_TOL = 1e-12


@dataclass(frozen=True)
class DominanceReport:
    check: str
    status: str  # "pass" | "fail" | "precondition_unmet"
    precondition: str
    precondition_met: bool
    lhs: float
    rhs: float
    margin: float
    pi: float

    def row(self) -> list[str]:
        return [
            self.check,
            self.status,
            self.precondition,
            repr(self.lhs),
            repr(self.rhs),
            repr(self.margin),
            repr(self.pi),
        ]


def check_weak_dominance(pop: Sequence[PopulationRecord], tau_star: float) -> DominanceReport:
    """Gated accuracy at tau_star is at least the never-retrieve accuracy
    whenever the realized mean benefit above tau_star is non-negative."""
    acc = evaluate_policies(pop, tau_star)
    above = [r.delta for r in pop if r.u > tau_star]
    cond_mean = math.fsum(above) / len(above) if above else 0.0
    met = cond_mean >= 0.0
    margin = acc.acc_gate - acc.acc_never
    status = "precondition_unmet" if not met else ("pass" if margin >= -EXACT_TOL else "fail")
    return DominanceReport(
        check="weak_dominance_over_never",
        status=status,
        precondition=f"mean(delta on u > tau*) = {cond_mean:.6g} >= 0",
        precondition_met=met,
        lhs=acc.acc_gate,
        rhs=acc.acc_never,
        margin=margin,
        pi=acc.pi,
    )


def check_always_dominance(pop: Sequence[PopulationRecord], tau_star: float) -> DominanceReport:
    """Gated accuracy at tau_star is at least the always-retrieve accuracy
    when delta <= 0 pointwise on the low-score region; mixed signs there
    skip the check rather than fail it."""
    acc = evaluate_policies(pop, tau_star)
    below = [r.delta for r in pop if r.u <= tau_star]
    met = all(d <= 0.0 for d in below)
    margin = acc.acc_gate - acc.acc_always
    status = "precondition_unmet" if not met else ("pass" if margin >= -EXACT_TOL else "fail")
    return DominanceReport(
        check="dominance_over_always",
        status=status,
        precondition="delta <= 0 pointwise on {u <= tau*}",
        precondition_met=met,
        lhs=acc.acc_gate,
        rhs=acc.acc_always,
        margin=margin,
        pi=acc.pi,
    )


@dataclass(frozen=True)
class ConsistencyReport:
    rho: float
    trials: int
    max_abs_err: float
    within_tol: int
    tol: float
    passed: bool

    def row(self) -> list[str]:
        return [
            repr(self.rho),
            str(self.trials),
            repr(self.max_abs_err),
            str(self.within_tol),
            repr(self.tol),
            "pass" if self.passed else "fail",
        ]


def check_budget_consistency(
    u_dist: DistSpec,
    rho_list: Sequence[float],
    n_calib: int,
    n_eval: int,
    trials: int,
    seed: int = 0,
    tol: float = 0.02,
    min_pass_fraction: float = 0.95,
) -> list[ConsistencyReport]:
    """Per budget rho: calibrate tau on fresh draws, measure the realized
    rate on fresh draws, and report how often |rate - rho| stays within tol.

    rho = 0 is enforced as never-retrieve (+inf threshold): a fresh draw can
    exceed the calibration maximum, so the calibrated max-score threshold
    alone cannot guarantee a zero realized rate.  Score distributions with
    atoms (point masses) break quantile targeting; they are reported as-is.
    """
    if trials < 1 or n_calib < 1 or n_eval < 1:
        raise ConfigError("trials, n_calib, and n_eval must all be >= 1")
    children = np.random.SeedSequence(seed).spawn(trials)
    errors: dict[float, list[float]] = {float(r): [] for r in rho_list}
    for child in children:
        rng = np.random.default_rng(child)
        calib = u_dist.sample(rng, n_calib)
        fresh = u_dist.sample(rng, n_eval)
        for rho in errors:
            tau = math.inf if rho == 0.0 else quantile_threshold(calib, rho)
            errors[rho].append(abs(realized_rate(fresh, tau) - rho))
    reports = []
    for rho, errs in errors.items():
        within = sum(e <= tol for e in errs)
        reports.append(
            ConsistencyReport(
                rho=rho,
                trials=trials,
                max_abs_err=max(errs),
                within_tol=within,
                tol=tol,
                passed=within >= min_pass_fraction * trials,
            )
        )
    return reports


DOMINANCE_HEADERS = ("check", "status", "precondition", "acc_gate", "acc_baseline", "margin", "pi")
CONSISTENCY_HEADERS = ("rho", "trials", "max_abs_err", "within_tol", "tol", "result")
