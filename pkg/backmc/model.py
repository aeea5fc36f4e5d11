"""
Continuous SDE models, their Euler-Maruyama discretisation and the one-step
conditional Gaussian law shared by quantization and generator construction.

Two dynamics are supported:

    CEV        dX = r X dt + sigma X^alpha dW
    LocalVol   dx = x eta(t, x) dW        (normalised spot, zero drift)

where eta is piecewise constant in time and, inside each segment, a monotone
cubic (PCHIP) spline of x with flat extrapolation.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from .exceptions import ValidationError
from .rng import SeedLike, seed_sequence

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

# Paths are simulated in fixed-size blocks so that results do not depend on
# how many worker threads are used.
EULER_BLOCK_SIZE = 16384


class ModelKind(str, Enum):
    CEV = "cev"
    LOCAL_VOL = "local_vol"


@dataclass(frozen=True)
class LVSegment:
    """One time-homogeneous piece of the local volatility function.

    Applies on ``[previous end, end_time)``; the last segment is closed at its end.
    """

    end_time: float
    x: Tuple[float, ...]
    eta: Tuple[float, ...]
    _spline: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if x.ndim != 1 or x.size < 2 or x.size != eta.size:
            raise ValidationError("an LV segment needs >= 2 knots with matching x and eta")
        if np.any(np.diff(x) <= 0):
            raise ValidationError("LV knot abscissae must be strictly increasing")
        if np.any(eta < 0) or not np.all(np.isfinite(eta)):
            raise ValidationError("LV knot values must be finite and non-negative")
        object.__setattr__(self, "x", tuple(float(v) for v in x))
        object.__setattr__(self, "eta", tuple(float(v) for v in eta))
        object.__setattr__(self, "_spline", PchipInterpolator(x, eta, extrapolate=False))

    def eta_at(self, x: ArrayLike) -> np.ndarray:
        """Monotone spline inside the knot range, flat outside."""
        clipped = np.clip(np.asarray(x, dtype=float), self.x[0], self.x[-1])
        return self._spline(clipped)


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    x0: float
    r: float = 0.0
    cev_sigma: float = 0.0
    cev_alpha: float = 1.0
    lv_segments: Tuple[LVSegment, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if not (self.x0 > 0 and np.isfinite(self.x0)):
            raise ValidationError(f"x0 must be positive, got {self.x0}")
        if self.kind is ModelKind.CEV:
            if not self.cev_sigma > 0:
                raise ValidationError(f"cev_sigma must be positive, got {self.cev_sigma}")
            if not self.cev_alpha > 0:
                raise ValidationError(f"cev_alpha must be positive, got {self.cev_alpha}")
        else:
            if not self.lv_segments:
                raise ValidationError("a local volatility model needs at least one segment")
            ends = np.array([seg.end_time for seg in self.lv_segments])
            if np.any(ends <= 0) or np.any(np.diff(ends) <= 0):
                raise ValidationError("LV segment end times must be positive and strictly increasing")
            object.__setattr__(self, "lv_segments", tuple(self.lv_segments))

    @classmethod
    def cev(cls, x0: float, r: float, sigma: float, alpha: float) -> "ModelSpec":
        return cls(ModelKind.CEV, x0=x0, r=r, cev_sigma=sigma, cev_alpha=alpha)

    @classmethod
    def local_vol(cls, x0: float, r: float, segments: Sequence[LVSegment]) -> "ModelSpec":
        return cls(ModelKind.LOCAL_VOL, x0=x0, r=r, lv_segments=tuple(segments))

    @property
    def segment_ends(self) -> np.ndarray:
        return np.array([seg.end_time for seg in self.lv_segments])

    def segment_index(self, t: float) -> int:
        """Segment containing t: half-open [T_{j-1}, T_j), last one extended to the right."""
        if self.kind is ModelKind.CEV:
            return 0
        idx = int(np.searchsorted(self.segment_ends, t, side="right"))
        return min(idx, len(self.lv_segments) - 1)

    def homogeneous_pieces(self, start: float, end: float) -> List[Tuple[int, float, float]]:
        """Split ``[start, end]`` at segment boundaries into ``(segment, t0, t1)`` pieces."""
        if end < start:
            raise ValidationError(f"interval end {end} precedes start {start}")
        if self.kind is ModelKind.CEV:
            return [(0, start, end)] if end > start else []
        cuts = [start] + [float(T) for T in self.segment_ends[:-1] if start < T < end] + [end]
        return [(self.segment_index(a), a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b > a]


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Ordered simulation or observation times starting at 0."""

    times: np.ndarray

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValidationError("a time grid needs at least two times (n >= 1)")
        if times[0] != 0.0:
            raise ValidationError("a time grid must start at t_0 = 0")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("time grid must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, T: float, n: int) -> "TimeGrid":
        if n < 1 or not T > 0:
            raise ValidationError(f"need T > 0 and n >= 1, got T={T}, n={n}")
        return cls(np.linspace(0.0, T, n + 1))

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def dt(self) -> float:
        steps = self.steps
        if np.ptp(steps) > 1e-12 * max(1.0, self.T):
            raise ValidationError("time grid is not equally spaced; use steps instead of dt")
        return float(self.T / self.n)


def _scalar_or_array(values: np.ndarray) -> ArrayLike:
    return float(values) if values.ndim == 0 else values


def drift(model: ModelSpec, t: float, x: ArrayLike) -> ArrayLike:
    """b(t, x): r x for CEV, 0 for the normalised local volatility process."""
    x = np.asarray(x, dtype=float)
    if model.kind is ModelKind.CEV:
        return _scalar_or_array(model.r * x)
    return _scalar_or_array(np.zeros_like(x))


def diffusion(model: ModelSpec, t: float, x: ArrayLike) -> ArrayLike:
    """sigma(t, x): sigma x^alpha for CEV, eta_seg(x) x for local volatility."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValidationError(f"diffusion is undefined for negative states (min {float(np.min(x))})")
    if model.kind is ModelKind.CEV:
        return _scalar_or_array(model.cev_sigma * np.power(x, model.cev_alpha))
    segment = model.lv_segments[model.segment_index(t)]
    return _scalar_or_array(segment.eta_at(x) * x)


def conditional_law(model: ModelSpec, t_k: float, dt: float, x: ArrayLike) -> Tuple[ArrayLike, ArrayLike]:
    """Mean and stdev of the Euler step from x at t_k: (x + b dt, sigma sqrt(dt))."""
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    mean = x + np.asarray(drift(model, t_k, x)) * dt
    std = np.asarray(diffusion(model, t_k, x)) * np.sqrt(dt)
    return _scalar_or_array(mean), _scalar_or_array(std)


def euler_step(model: ModelSpec, t_k: float, dt: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step with an absorbing floor at 0."""
    mean, std = conditional_law(model, t_k, dt, x)
    return np.maximum(mean + std * z, 0.0)


def _simulate_block(model: ModelSpec, grid: TimeGrid, size: int, seed_seq: np.random.SeedSequence) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    z = rng.standard_normal((size, grid.n))
    paths = np.empty((size, grid.n + 1))
    paths[:, 0] = model.x0
    for k, (t_k, dt) in enumerate(zip(grid.times[:-1], grid.steps)):
        paths[:, k + 1] = euler_step(model, t_k, dt, paths[:, k], z[:, k])
    return paths


def euler_paths(
    model: ModelSpec, grid: TimeGrid, n_paths: int, seed: SeedLike, threads: int = 1
) -> np.ndarray:
    """Simulate ``n_paths`` Euler paths, shape ``(n_paths, n + 1)``.

    Blocks of EULER_BLOCK_SIZE paths draw from streams spawned off ``seed``,
    so the matrix is identical for any thread count.
    """
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    sizes = [EULER_BLOCK_SIZE] * (n_paths // EULER_BLOCK_SIZE)
    if n_paths % EULER_BLOCK_SIZE:
        sizes.append(n_paths % EULER_BLOCK_SIZE)
    streams = [seed_sequence(seed, block) for block in range(len(sizes))]
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda job: _simulate_block(model, grid, *job), zip(sizes, streams)))
    else:
        blocks = [_simulate_block(model, grid, size, ss) for size, ss in zip(sizes, streams)]
    paths = np.vstack(blocks)
    floored = int(np.count_nonzero(paths[:, 1:] == 0.0))
    if floored:
        logger.warning("%d Euler states hit the absorbing floor at 0", floored)
    return paths


def load_lv_csv(path: Union[str, Path]) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Read ``(x, eta)`` knots from a two-column CSV (named ``x``/``eta`` or positional, header optional)."""
    try:
        frame = pd.read_csv(path, header=None)
    except pd.errors.EmptyDataError:
        raise ValidationError(f"{path}: no knots") from None
    if pd.to_numeric(frame.iloc[0], errors="coerce").isna().any():
        frame = pd.read_csv(path)
    if {"x", "eta"}.issubset(frame.columns):
        x, eta = frame["x"], frame["eta"]
    elif frame.shape[1] == 2:
        x, eta = frame.iloc[:, 0], frame.iloc[:, 1]
    else:
        raise ValidationError(f"{path}: expected columns 'x' and 'eta'")
    return tuple(x.astype(float)), tuple(eta.astype(float))


def synthetic_lv_model(x0: float = 1.0, r: float = 0.0032) -> ModelSpec:
    """Smile-shaped piecewise time-homogeneous surface on the normalised spot.

    Stands in for a calibrated EUR/USD surface: four pillars (1, 3, 6, 12
    months) with a mild skew and a term structure in the ATM level.
    """
    x = (0.70, 0.85, 0.95, 1.00, 1.05, 1.15, 1.30)
    shape = np.array([1.45, 1.18, 1.05, 1.00, 0.98, 1.02, 1.12])
    pillars = ((1 / 12, 0.075), (3 / 12, 0.080), (6 / 12, 0.085), (1.0, 0.090))
    segments = [LVSegment(end_time=T, x=x, eta=tuple(atm * shape)) for T, atm in pillars]
    return ModelSpec.local_vol(x0=x0, r=r, segments=segments)
