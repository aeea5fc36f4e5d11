"""
Large time step construction of the chain from the diffusion's generator.

The generator is discretised on a uniform price grid as a tridiagonal rate
matrix with reflecting ends. Transition matrices between any two dates are
products of matrix exponentials, one per time-homogeneous piece, computed by
Pade scaling and squaring.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve

from .chain import ChainApproximation
from .exceptions import GeneratorValidityError, NumericalError, ValidationError
from .model import ModelKind, ModelSpec, diffusion, drift

logger = logging.getLogger(__name__)

PADE_DEGREES = (3, 5, 7, 9, 13)
PADE_THETA = (0.01495585217958292, 0.2539398330063230, 0.9504178996162932, 2.097847961257068, 5.371920351148152)
PADE_COEFFS = {
    3: (120, 60, 12, 1),
    5: (30240, 15120, 3360, 420, 30, 1),
    7: (17297280, 8648640, 1995840, 277200, 25200, 1512, 56, 1),
    9: (17643225600, 8821612800, 2075673600, 302702400, 30270240, 2162160, 110880, 3960, 90, 1),
    13: (
        64764752532480000, 32382376266240000, 7771770303897600, 1187353796428800,
        129060195264000, 10559470521600, 670442572800, 33522128640, 1323241920,
        40840800, 960960, 16380, 182, 1,
    ),
}
# Row sums of a computed exponential may drift this far from 1 before renormalising.
ROW_SUM_TOL = 1e-9
NEGATIVE_TOL = 1e-12
DEFAULT_WIDTH = 5.0


@dataclass(frozen=True, eq=False)
class TridiagonalGenerator:
    """Rates l_i (to i-1), d_i, u_i (to i+1) on a uniform grid; lower[0] = upper[-1] = 0."""

    grid: np.ndarray
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    segment: int = 0

    @property
    def N(self) -> int:
        return self.grid.size

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def to_sparse(self) -> sp.csr_matrix:
        return sp.diags([self.lower[1:], self.diag, self.upper[:-1]], [-1, 0, 1], format="csr")

    def to_dense(self) -> np.ndarray:
        return self.to_sparse().toarray()

    @property
    def rate_norm(self) -> float:
        """Infinity norm, the largest total jump intensity."""
        return float(np.max(np.abs(self.lower) + np.abs(self.diag) + np.abs(self.upper)))

    def courant_step(self) -> float:
        """Largest dt keeping I + dt L a stochastic matrix (explicit Euler stability)."""
        norm = float(np.max(-self.diag))
        return math.inf if norm == 0 else 1.0 / norm

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "node": np.arange(self.N), "point": self.grid,
            "lower": self.lower, "diag": self.diag, "upper": self.upper,
        })


def _check_uniform(grid: np.ndarray) -> float:
    if grid.ndim != 1 or grid.size < 3:
        raise ValidationError("generator grid needs at least 3 points")
    steps = np.diff(grid)
    spacing = float(steps[0])
    if not spacing > 0 or np.max(np.abs(steps - spacing)) > 1e-9 * max(spacing, 1.0):
        raise ValidationError("generator grid must be uniform and increasing")
    return spacing


def build_generator(model: ModelSpec, segment_time: float, grid: np.ndarray) -> TridiagonalGenerator:
    """Central-difference generator of the diffusion on ``grid`` (reflecting ends).

    Coefficients use the drift and volatility in force at ``segment_time``.
    """
    grid = np.asarray(grid, dtype=float)
    spacing = _check_uniform(grid)
    if grid[0] < 0:
        raise ValidationError("generator grid must lie in the positive half-line")
    b = np.asarray(drift(model, segment_time, grid), dtype=float)
    var = np.asarray(diffusion(model, segment_time, grid), dtype=float) ** 2
    lower = -b / (2 * spacing) + var / (2 * spacing ** 2)
    upper = b / (2 * spacing) + var / (2 * spacing ** 2)
    lower[0] = 0.0
    upper[-1] = 0.0
    bad = np.flatnonzero((lower < 0) | (upper < 0))
    if bad.size:
        node = int(bad[0])
        raise GeneratorValidityError(
            f"drift dominates diffusion at node {node} (x={grid[node]:.6g}); refine the grid", node=node
        )
    diag = -(lower + upper)
    return TridiagonalGenerator(grid=grid, lower=lower, diag=diag, upper=upper, segment=model.segment_index(segment_time))


def _pade_uv(A, degree: int, identity):
    c = PADE_COEFFS[degree]
    A2 = A @ A
    if degree == 13:
        A4 = A2 @ A2
        A6 = A4 @ A2
        U = A @ (A6 @ (c[13] * A6 + c[11] * A4 + c[9] * A2) + c[7] * A6 + c[5] * A4 + c[3] * A2 + c[1] * identity)
        V = A6 @ (c[12] * A6 + c[10] * A4 + c[8] * A2) + c[6] * A6 + c[4] * A4 + c[2] * A2 + c[0] * identity
        return U, V
    U = c[1] * identity
    V = c[0] * identity
    power = identity
    for i in range(1, degree // 2 + 1):
        power = power @ A2
        U = U + c[2 * i + 1] * power
        V = V + c[2 * i] * power
    return A @ U, V


def pade_expm(A) -> Tuple[np.ndarray, int]:
    """exp(A) by scaling and squaring; returns the dense result and the exponent s.

    The polynomial stage stays sparse for banded input; the Pade solve is one
    dense LU and the s squarings are dense.
    """
    A = sp.csr_matrix(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValidationError("matrix exponential needs a square matrix")
    identity = sp.identity(n, format="csr")
    norm = float(abs(A).sum(axis=1).max()) if A.nnz else 0.0
    if not np.isfinite(norm):
        raise NumericalError("matrix exponential of a non-finite matrix")
    s = 0
    for degree, theta in zip(PADE_DEGREES, PADE_THETA):
        if norm <= theta:
            break
    else:
        degree = 13
        s = max(0, int(math.ceil(math.log2(norm / PADE_THETA[-1]))))
        A = A / 2.0 ** s
    U, V = _pade_uv(A, degree, identity)
    U, V = U.toarray(), V.toarray()
    F = lu_solve(lu_factor(V - U), V + U)
    for _ in range(s):
        F = F @ F
    return F, s


def _stochastic(F: np.ndarray) -> np.ndarray:
    if F.min() < -NEGATIVE_TOL * max(1.0, F.shape[0]):
        raise NumericalError(f"matrix exponential has a negative entry {F.min():.3e}")
    F = np.clip(F, 0.0, 1.0)
    drift_ = np.max(np.abs(F.sum(axis=1) - 1.0))
    if drift_ > ROW_SUM_TOL:
        raise NumericalError(f"matrix exponential rows drift {drift_:.3e} from 1")
    return F / F.sum(axis=1, keepdims=True)


def expm_transition(gen: Union[TridiagonalGenerator, np.ndarray], duration: float) -> np.ndarray:
    """Row-stochastic ``exp(duration * L)``."""
    if duration < 0:
        raise ValidationError(f"duration must be >= 0, got {duration}")
    rates = gen.to_sparse() if isinstance(gen, TridiagonalGenerator) else sp.csr_matrix(gen)
    if duration == 0:
        return np.eye(rates.shape[0])
    F, _ = pade_expm(rates * duration)
    return _stochastic(F)


def default_grid(model: ModelSpec, horizon: float, N: int, width: float = DEFAULT_WIDTH) -> np.ndarray:
    """Uniform grid on [x0 e^-q, x0 e^q], q = width sigma_ref sqrt(T), shifted so x0 is a node."""
    if N < 3:
        raise ValidationError(f"N must be >= 3, got {N}")
    x0 = model.x0
    sigma_ref = float(diffusion(model, 0.0, x0)) / x0
    q = width * sigma_ref * math.sqrt(horizon)
    lo, hi = x0 * math.exp(-q), x0 * math.exp(q)
    spacing = (hi - lo) / (N - 1)
    i0 = int(round((x0 - lo) / spacing))
    while x0 - i0 * spacing <= 0:
        i0 -= 1
    return x0 + spacing * (np.arange(N) - i0)


@dataclass(frozen=True, eq=False)
class DateMatrixSet:
    dates: np.ndarray
    grid: np.ndarray
    matrices: List[np.ndarray]
    generators: Dict[int, TridiagonalGenerator]

    def to_frame(self, min_prob: float = 0.0) -> pd.DataFrame:
        frames = []
        for k, matrix in enumerate(self.matrices):
            i, j = np.nonzero(matrix > min_prob)
            frames.append(pd.DataFrame({
                "from_date": self.dates[k], "to_date": self.dates[k + 1],
                "from": i, "to": j, "prob": matrix[i, j],
            }))
        return pd.concat(frames, ignore_index=True)


def _check_dates(model: ModelSpec, dates: np.ndarray) -> None:
    if dates.ndim != 1 or dates.size < 2 or dates[0] != 0.0 or np.any(np.diff(dates) <= 0):
        raise ValidationError("observation dates must start at 0 and be strictly increasing")
    if model.kind is ModelKind.LOCAL_VOL and dates[-1] > model.segment_ends[-1] + 1e-12:
        raise ValidationError(
            f"last observation date {dates[-1]} lies beyond the last LV segment ({model.segment_ends[-1]})"
        )


def date_matrices(
    model: ModelSpec, dates: Sequence[float], grid: np.ndarray, threads: int = 1
) -> DateMatrixSet:
    """Full-grid transition matrices between consecutive observation dates."""
    dates = np.asarray(dates, dtype=float)
    _check_dates(model, dates)
    pieces = [model.homogeneous_pieces(a, b) for a, b in zip(dates[:-1], dates[1:])]
    generators: Dict[int, TridiagonalGenerator] = {}
    for seg, t0, _ in (p for interval in pieces for p in interval):
        if seg not in generators:
            generators[seg] = build_generator(model, t0, grid)

    def interval_matrix(interval) -> np.ndarray:
        matrix = np.eye(len(grid))
        for seg, t0, t1 in interval:
            matrix = matrix @ expm_transition(generators[seg], t1 - t0)
        return matrix / matrix.sum(axis=1, keepdims=True)

    if threads > 1 and len(pieces) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            matrices = list(pool.map(interval_matrix, pieces))
    else:
        matrices = [interval_matrix(interval) for interval in pieces]
    return DateMatrixSet(dates=dates, grid=np.asarray(grid, dtype=float), matrices=matrices, generators=generators)


def ltsa_build(
    model: ModelSpec,
    observation_dates: Sequence[float],
    grid: Optional[np.ndarray] = None,
    N: int = 100,
    width: float = DEFAULT_WIDTH,
    threads: int = 1,
) -> ChainApproximation:
    """Chain on the observation dates with a common grid after date 0.

    Slice 0 is the spot; its transition row is the exponential row of the
    grid node nearest x0.
    """
    dates = np.asarray(observation_dates, dtype=float)
    if grid is None:
        grid = default_grid(model, float(dates[-1]), N, width)
    grid = np.asarray(grid, dtype=float)
    matrices = date_matrices(model, dates, grid, threads=threads)
    start = int(np.argmin(np.abs(grid - model.x0)))
    forward = [matrices.matrices[0][start:start + 1, :]] + matrices.matrices[1:]
    grids = [np.array([model.x0])] + [grid] * (dates.size - 1)
    chain = ChainApproximation.from_transitions(dates, grids, forward, builder="ltsa")
    logger.info("LTSA chain built: %d dates, N=%d, %d generator segment(s)", dates.size, grid.size, len(matrices.generators))
    return chain


def vanilla_price(
    chain: ChainApproximation,
    K: float,
    maturity_index: Optional[int] = None,
    discount: float = 1.0,
    kind: str = "call",
) -> float:
    """Discounted scalar product of the slice marginals with the vanilla payoff."""
    m = chain.n if maturity_index is None else maturity_index
    if not 0 <= m <= chain.n:
        raise ValidationError(f"maturity index {m} outside 0..{chain.n}")
    points = chain.grids[m]
    if kind == "call":
        payoff = np.maximum(points - K, 0.0)
    elif kind == "put":
        payoff = np.maximum(K - points, 0.0)
    else:
        raise ValidationError(f"unknown vanilla kind {kind!r}")
    return float(discount * chain.marginals[m] @ payoff)


def generator_report(model: ModelSpec, dates: Sequence[float], grid: np.ndarray) -> pd.DataFrame:
    """Per-interval health of the exponentials: Courant step, scaling exponent, row and semigroup errors."""
    dates = np.asarray(dates, dtype=float)
    _check_dates(model, dates)
    rows = []
    for a, b in zip(dates[:-1], dates[1:]):
        for seg, t0, t1 in model.homogeneous_pieces(a, b):
            gen = build_generator(model, t0, grid)
            tau = t1 - t0
            raw, s = pade_expm(gen.to_sparse() * tau)
            half, _ = pade_expm(gen.to_sparse() * (tau / 2))
            rows.append({
                "start": t0,
                "end": t1,
                "segment": seg,
                "courant_step": gen.courant_step(),
                "explicit_steps": math.ceil(tau / gen.courant_step()) if gen.courant_step() < math.inf else 0,
                "rate_norm": tau * gen.rate_norm,
                "scaling_exponent": s,
                "min_entry": float(raw.min()),
                "row_sum_error": float(np.max(np.abs(raw.sum(axis=1) - 1.0))),
                "semigroup_error": float(np.max(np.abs(half @ half - raw))),
            })
    return pd.DataFrame(rows)
