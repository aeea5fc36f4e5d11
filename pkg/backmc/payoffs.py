"""Discounted path payoffs, evaluated on whole matrices of paths at once."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from .exceptions import ValidationError
from .model import ModelSpec, diffusion

DATE_TOL = 1e-9


class PayoffKind(str, Enum):
    ASIAN_CALL = "asian_call"
    UP_OUT_BARRIER_CALL = "up_out_barrier_call"
    AUTO_CALLABLE = "auto_callable"
    VANILLA_CALL = "vanilla_call"
    VANILLA_PUT = "vanilla_put"


class BridgeVariance(str, Enum):
    VARIANCE = "variance"  # sigma^2 dt
    LITERAL = "literal"    # sigma dt


@dataclass(frozen=True)
class PayoffSpec:
    kind: PayoffKind
    maturity: float
    rate: float = 0.0
    strike: Optional[float] = None
    barrier: Optional[float] = None
    bridge_correction: bool = True
    bridge_variance: BridgeVariance = BridgeVariance.VARIANCE
    call_dates: Tuple[float, ...] = ()
    coupons: Tuple[float, ...] = ()
    call_level: Optional[float] = None
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PayoffKind(self.kind))
        object.__setattr__(self, "bridge_variance", BridgeVariance(self.bridge_variance))
        object.__setattr__(self, "call_dates", tuple(float(t) for t in self.call_dates))
        object.__setattr__(self, "coupons", tuple(float(q) for q in self.coupons))
        if not self.maturity > 0:
            raise ValidationError(f"maturity must be positive, got {self.maturity}")
        if self.kind is PayoffKind.AUTO_CALLABLE:
            if not self.call_dates or len(self.call_dates) != len(self.coupons):
                raise ValidationError("an auto-callable needs one coupon per call date")
            if np.any(np.diff(self.call_dates) <= 0) or self.call_dates[0] <= 0:
                raise ValidationError("call dates must be positive and strictly increasing")
            if self.call_dates[-1] > self.maturity + DATE_TOL:
                raise ValidationError("call dates must not exceed maturity")
            if not np.all(np.isfinite(self.coupons)):
                raise ValidationError("coupons must be finite")
            if self.call_level is None or not self.call_level > 0:
                raise ValidationError("auto-callable call level b must be positive")
            return
        if self.strike is None or not self.strike >= 0:
            raise ValidationError(f"{self.kind.value} needs a strike K >= 0")
        if self.kind is PayoffKind.UP_OUT_BARRIER_CALL:
            if self.barrier is None or not self.barrier > self.strike:
                raise ValidationError("barrier B must exceed the strike K")

    @property
    def discount(self) -> float:
        return float(np.exp(-self.rate * self.maturity))

    def describe(self) -> str:
        if self.label:
            return self.label
        if self.kind is PayoffKind.AUTO_CALLABLE:
            return f"{self.kind.value} b={self.call_level:g}"
        if self.kind is PayoffKind.UP_OUT_BARRIER_CALL:
            return f"{self.kind.value} K={self.strike:g} B={self.barrier:g}"
        return f"{self.kind.value} K={self.strike:g}"


def _check_times(spec: PayoffSpec, values: np.ndarray, times: np.ndarray) -> None:
    if values.ndim != 2 or values.shape[1] != times.size:
        raise ValidationError("path matrix must have one column per observation time")
    if abs(times[-1] - spec.maturity) > DATE_TOL:
        raise ValidationError(f"paths end at t={times[-1]:g} but the payoff matures at T={spec.maturity:g}")


def survival_probabilities(
    model: ModelSpec,
    values: np.ndarray,
    times: np.ndarray,
    barrier: float,
    variance: BridgeVariance = BridgeVariance.VARIANCE,
) -> np.ndarray:
    """Probability that the Brownian bridge between consecutive dates stays below ``barrier``.

    Shape (paths, n). Zero when either end is at or above the barrier; one
    when the step has no diffusion and both ends are below.
    """
    left, right = values[:, :-1], values[:, 1:]
    steps = np.diff(times)
    sigma = np.column_stack([
        np.atleast_1d(diffusion(model, t, np.maximum(left[:, k], 0.0))) for k, t in enumerate(times[:-1])
    ])
    if BridgeVariance(variance) is BridgeVariance.VARIANCE:
        spread = sigma ** 2 * steps
    else:
        spread = sigma * steps
    gap = (barrier - left) * (barrier - right)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = 1.0 - np.exp(-2.0 * gap / spread)
    p = np.where(spread > 0, p, 1.0)
    p = np.where((left >= barrier) | (right >= barrier), 0.0, p)
    return np.clip(p, 0.0, 1.0)


def payoff_eval(
    spec: PayoffSpec,
    values: np.ndarray,
    times: np.ndarray,
    model: Optional[ModelSpec] = None,
    rng: Optional[np.random.Generator] = None,
    bridge: str = "expectation",
) -> np.ndarray:
    """Discounted payoff of each path (row of ``values``) observed at ``times``.

    ``bridge`` selects the barrier crossing correction form: "expectation"
    multiplies by the survival probabilities, "bernoulli" kills the path
    with one uniform draw per step.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    times = np.asarray(times, dtype=float)
    _check_times(spec, values, times)
    terminal = values[:, -1]

    if spec.kind is PayoffKind.ASIAN_CALL:
        return spec.discount * np.maximum(values.mean(axis=1) - spec.strike, 0.0)
    if spec.kind is PayoffKind.VANILLA_CALL:
        return spec.discount * np.maximum(terminal - spec.strike, 0.0)
    if spec.kind is PayoffKind.VANILLA_PUT:
        return spec.discount * np.maximum(spec.strike - terminal, 0.0)
    if spec.kind is PayoffKind.UP_OUT_BARRIER_CALL:
        alive = np.all(values < spec.barrier, axis=1)
        payoff = spec.discount * np.maximum(terminal - spec.strike, 0.0) * alive
        if not spec.bridge_correction:
            return payoff
        if model is None:
            raise ValidationError("the bridge correction needs the model's diffusion coefficient")
        p = survival_probabilities(model, values, times, spec.barrier, spec.bridge_variance)
        if bridge == "expectation":
            return payoff * np.prod(p, axis=1)
        if bridge == "bernoulli":
            if rng is None:
                raise ValidationError("Bernoulli bridge sampling needs an rng")
            return payoff * np.all(rng.random(p.shape) < p, axis=1)
        raise ValidationError(f"unknown bridge form {bridge!r}")
    return _autocall(spec, values, times)


def _autocall(spec: PayoffSpec, values: np.ndarray, times: np.ndarray) -> np.ndarray:
    columns = []
    for t in spec.call_dates:
        hit = np.flatnonzero(np.abs(times - t) <= DATE_TOL)
        if not hit.size:
            raise ValidationError(f"call date {t:g} is not an observation date of the paths")
        columns.append(int(hit[0]))
    spot = values[:, 0]
    called = values[:, columns] >= (spot * spec.call_level)[:, None]
    any_call = called.any(axis=1)
    first = np.argmax(called, axis=1)
    call_dates = np.asarray(spec.call_dates)
    coupon_leg = np.exp(-spec.rate * call_dates[first]) * np.asarray(spec.coupons)[first]
    redemption = spec.discount * values[:, -1] / spot
    return np.where(any_call, coupon_leg, redemption)
