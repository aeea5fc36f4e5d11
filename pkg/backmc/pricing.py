"""
Monte Carlo estimators on the Euler scheme and on the chain.

The backward estimator stratifies on the terminal grid: every eligible
terminal node gets its own batch of paths sampled back to the spot, and the
stratum means are recombined with the exact terminal marginals.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .chain import UNREACHABLE_FLOOR, ChainApproximation, reverse_transitions, sample_backward, sample_forward
from .exceptions import ValidationError
from .model import ModelSpec, TimeGrid, euler_paths
from .payoffs import PayoffKind, PayoffSpec, payoff_eval
from .rng import BACKWARD_STREAM, BERNOULLI_STREAM, EULER_STREAM, FORWARD_STREAM, SeedLike, seed_sequence, stream

logger = logging.getLogger(__name__)

Z95 = 1.96
MAX_ENUMERATED_PATHS = 2_000_000


@dataclass(frozen=True)
class PriceEstimate:
    price: float
    std_error: float
    n_paths: int
    estimator: str
    wall_time: float = 0.0
    label: str = ""

    @property
    def ci_low(self) -> float:
        return self.price - Z95 * self.std_error

    @property
    def ci_high(self) -> float:
        return self.price + Z95 * self.std_error

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_row(self) -> dict:
        row = asdict(self)
        row.update(ci_low=self.ci_low, ci_high=self.ci_high)
        return row


def _mean_and_error(samples: np.ndarray):
    n = samples.size
    mean = float(np.mean(samples))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / math.sqrt(n))


def price_euler(
    model: ModelSpec,
    time_grid: TimeGrid,
    spec: PayoffSpec,
    n_mc: int,
    seed: SeedLike = 0,
    bridge: str = "bernoulli",
    threads: int = 1,
) -> PriceEstimate:
    """Plain Monte Carlo on Euler paths; barriers use the Bernoulli bridge by default."""
    started = time.perf_counter()
    paths = euler_paths(model, time_grid, n_mc, seed_sequence(seed, EULER_STREAM), threads=threads)
    payoff = payoff_eval(
        spec, paths, time_grid.times, model=model, rng=stream(seed, BERNOULLI_STREAM), bridge=bridge
    )
    price, error = _mean_and_error(payoff)
    return PriceEstimate(price, error, n_mc, "euler", time.perf_counter() - started, spec.describe())


def price_forward(
    chain: ChainApproximation,
    spec: PayoffSpec,
    n_mc: int,
    seed: SeedLike = 0,
    model: Optional[ModelSpec] = None,
) -> PriceEstimate:
    """Ancestral sampling of chain paths from the spot."""
    started = time.perf_counter()
    paths = sample_forward(chain, n_mc, stream(seed, FORWARD_STREAM))
    payoff = payoff_eval(spec, paths.values(), chain.times, model=model)
    price, error = _mean_and_error(payoff)
    return PriceEstimate(price, error, n_mc, "forward", time.perf_counter() - started, spec.describe())


@dataclass(frozen=True, eq=False)
class StratificationPlan:
    indices: np.ndarray
    counts: np.ndarray
    budget: int

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @property
    def total_paths(self) -> int:
        return int(self.counts.sum())

    @property
    def degenerate(self) -> bool:
        return self.size == 0


def make_plan(chain: ChainApproximation, spec: PayoffSpec, n_mc: int, floor: float = UNREACHABLE_FLOOR) -> StratificationPlan:
    """Terminal strata where the payoff can be non-zero, with equal path allocation."""
    if n_mc < 1:
        raise ValidationError(f"n_mc must be >= 1, got {n_mc}")
    points = chain.grids[-1]
    eligible = chain.marginals[-1] > floor
    if spec.kind is PayoffKind.UP_OUT_BARRIER_CALL:
        eligible &= (points >= spec.strike) & (points <= spec.barrier)
    elif spec.kind is PayoffKind.VANILLA_CALL:
        eligible &= points > spec.strike
    elif spec.kind is PayoffKind.VANILLA_PUT:
        eligible &= points < spec.strike
    indices = np.flatnonzero(eligible)
    per_stratum = max(1, n_mc // indices.size) if indices.size else 0
    return StratificationPlan(indices=indices, counts=np.full(indices.size, per_stratum, dtype=int), budget=n_mc)


def price_backward(
    chain: ChainApproximation,
    spec: PayoffSpec,
    plan: StratificationPlan,
    seed: SeedLike = 0,
    model: Optional[ModelSpec] = None,
    threads: int = 1,
) -> PriceEstimate:
    """Sum over strata of P^n_i times the stratum mean; error from the stratum variances.

    Stratum i draws from its own stream, so the estimate does not depend on
    ``threads``.
    """
    started = time.perf_counter()
    if plan.degenerate:
        return PriceEstimate(0.0, 0.0, 0, "backward", time.perf_counter() - started, spec.describe())
    if np.any(plan.indices >= chain.N) or np.any(chain.marginals[-1][plan.indices] <= UNREACHABLE_FLOOR):
        raise ValidationError("stratification plan does not match the chain's terminal grid")
    if not chain.has_backward:
        chain = reverse_transitions(chain)

    def stratum(job):
        index, count = job
        paths = sample_backward(chain, int(index), int(count), stream(seed, BACKWARD_STREAM, int(index)))
        return _mean_and_error(payoff_eval(spec, paths.values(), chain.times, model=model))

    jobs = list(zip(plan.indices, plan.counts))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(stratum, jobs))
    else:
        results = [stratum(job) for job in jobs]

    weights = chain.marginals[-1][plan.indices]
    price = math.fsum(w * mean for w, (mean, _) in zip(weights, results))
    error = math.sqrt(math.fsum((w * se) ** 2 for w, (_, se) in zip(weights, results)))
    logger.debug("backward estimator: %d strata, %d paths", plan.size, plan.total_paths)
    return PriceEstimate(price, error, plan.total_paths, "backward", time.perf_counter() - started, spec.describe())


def exact_chain_price(
    chain: ChainApproximation, spec: PayoffSpec, model: Optional[ModelSpec] = None, method: str = "forward"
) -> float:
    """Price as a finite sum over every chain path (small chains only).

    "forward" weights paths by products of forward transitions; "backward"
    sums P^n_i times the exact backward conditional expectation at node i.
    """
    sizes = [grid.size for grid in chain.grids[1:]]
    if math.prod(sizes) > MAX_ENUMERATED_PATHS:
        raise ValidationError(f"chain has {math.prod(sizes)} paths; too many to enumerate")
    combos = np.array(list(itertools.product(*[range(s) for s in sizes])), dtype=np.int64).reshape(-1, len(sizes))
    indices = np.column_stack([np.zeros(len(combos), dtype=np.int64), combos])
    values = np.column_stack([grid[indices[:, k]] for k, grid in enumerate(chain.grids)])
    payoff = payoff_eval(spec, values, chain.times, model=model)

    if method == "forward":
        weight = np.ones(len(indices))
        for k, matrix in enumerate(chain.forward):
            weight *= matrix[indices[:, k], indices[:, k + 1]]
        return math.fsum(weight * payoff)
    if method != "backward":
        raise ValidationError(f"unknown enumeration method {method!r}")
    if not chain.has_backward:
        chain = reverse_transitions(chain)
    weight = np.ones(len(indices))
    for k, matrix in enumerate(chain.backward):
        weight *= matrix[indices[:, k + 1], indices[:, k]]
    terminal = chain.marginals[-1]
    conditional = np.zeros(chain.N)
    np.add.at(conditional, indices[:, -1], weight * payoff)
    return math.fsum(terminal * conditional)


def black_scholes_call(spot: float, strike: float, maturity: float, rate: float, sigma: float) -> float:
    d1 = (math.log(spot / strike) + (rate + 0.5 * sigma ** 2) * maturity) / (sigma * math.sqrt(maturity))
    d2 = d1 - sigma * math.sqrt(maturity)
    return float(spot * norm.cdf(d1) - strike * math.exp(-rate * maturity) * norm.cdf(d2))


@dataclass
class ErrorRatioCase:
    label: str
    spec: PayoffSpec
    chain: ChainApproximation
    model: Optional[ModelSpec] = None
    time_grid: Optional[TimeGrid] = None
    reference: str = "euler"
    extra: dict = field(default_factory=dict)


def error_ratio_report(
    cases: Sequence[ErrorRatioCase],
    n_mc: int,
    seeds: Sequence[int] = (0,),
    threads: int = 1,
) -> pd.DataFrame:
    """Matched-budget comparison of the reference estimator against the backward one.

    One row per case: mean price and standard error of each estimator over
    ``seeds`` and the median ratio reference SE / backward SE.
    """
    rows: List[dict] = []
    for case in cases:
        chain = case.chain if case.chain.has_backward else reverse_transitions(case.chain)
        plan = make_plan(chain, case.spec, n_mc)
        ref, bwd = [], []
        for seed in seeds:
            if case.reference == "euler":
                if case.model is None or case.time_grid is None:
                    raise ValidationError(f"{case.label}: the Euler reference needs a model and time grid")
                ref.append(price_euler(case.model, case.time_grid, case.spec, n_mc, seed, threads=threads))
            elif case.reference == "forward":
                ref.append(price_forward(chain, case.spec, n_mc, seed, model=case.model))
            else:
                raise ValidationError(f"unknown reference estimator {case.reference!r}")
            bwd.append(price_backward(chain, case.spec, plan, seed, model=case.model, threads=threads))
        ratios = [r.std_error / b.std_error if b.std_error > 0 else math.inf for r, b in zip(ref, bwd)]
        row = {
            "scenario": case.label,
            "reference": case.reference,
            "reference_price": float(np.mean([r.price for r in ref])),
            "reference_se": float(np.mean([r.std_error for r in ref])),
            "backward_price": float(np.mean([b.price for b in bwd])),
            "backward_se": float(np.mean([b.std_error for b in bwd])),
            "error_ratio": float(np.median(ratios)),
            "strata": plan.size,
        }
        row.update(case.extra)
        rows.append(row)
        logger.info("%s: error ratio %.2f", case.label, row["error_ratio"])
    return pd.DataFrame(rows)
