"""
Recursive marginal quantization of the Euler chain.

Given the grid and marginal probabilities of slice k, the law of the next
Euler state is a finite Gaussian mixture. Every quantity needed here (cell
probabilities, truncated means, distortion, gradient, Hessian) has a closed
form in Phi and phi, so a slice is solved without any simulation:

    Lloyd I        gamma_j <- E[X | X in C_j]
    + Anderson     mixing of the last m Lloyd residuals
    Newton         tridiagonal Hessian, backtracking on ordering
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import ndtr, ndtri

from .anderson import anderson_accelerate
from .chain import ChainApproximation
from .exceptions import SolverError, ValidationError
from .model import ModelSpec, TimeGrid, conditional_law

logger = logging.getLogger(__name__)

EMPTY_CELL_FLOOR = 1e-14
HESSIAN_COND_LIMIT = 1e12
MAX_HALVINGS = 20
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
# Width of the grid laid around a collapsed (Dirac) one-step law.
DEGENERATE_SPREAD = 1e-8


class SolverKind(str, Enum):
    LLOYD = "lloyd"
    ANDERSON = "anderson"
    NEWTON = "newton"


class InitScheme(str, Enum):
    PREV_GRID = "prev_grid"
    EULER_OP = "euler_op"
    MID_POINT = "mid_point"
    EXPECTED_VALUE = "expected_value"


def _strictly_increasing(points: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(points)) and np.all(np.diff(points) > 0))


@dataclass(frozen=True, eq=False)
class QuantizerGrid:
    points: np.ndarray

    def __post_init__(self) -> None:
        points = np.array(self.points, dtype=float).reshape(-1)
        if points.size < 1:
            raise ValidationError("a quantizer grid needs at least one point")
        if not _strictly_increasing(points):
            raise ValidationError("quantizer grid points must be finite and strictly increasing")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def N(self) -> int:
        return self.points.size

    @property
    def half_cells(self) -> np.ndarray:
        """Interior cell boundaries gamma_{j+1/2}, length N - 1."""
        return 0.5 * (self.points[:-1] + self.points[1:])

    @property
    def bounds(self) -> np.ndarray:
        """All N + 1 cell boundaries including -inf and +inf."""
        return np.concatenate(([-np.inf], self.half_cells, [np.inf]))

    def cell_index(self, x) -> np.ndarray:
        """Voronoi cell of each x (ties go to the upper cell)."""
        return np.searchsorted(self.half_cells, x, side="right")


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """One-step law of the Euler chain: sum_s w_s N(means_s, stds_s^2).

    Components with a zero stdev are point masses and are handled exactly.
    """

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        means = np.atleast_1d(np.asarray(self.means, dtype=float))
        stds = np.atleast_1d(np.asarray(self.stds, dtype=float))
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if not (means.shape == stds.shape == weights.shape) or means.ndim != 1:
            raise ValidationError("mixture means, stds and weights must be 1-D of equal length")
        if np.any(stds < 0) or np.any(weights < 0):
            raise ValidationError("mixture stds and weights must be non-negative")
        total = weights.sum()
        if not total > 0:
            raise ValidationError("mixture weights sum to zero")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)
        object.__setattr__(self, "weights", weights / total)

    @classmethod
    def standard_normal(cls) -> "GaussianMixture":
        return cls(np.zeros(1), np.ones(1), np.ones(1))

    @property
    def mean(self) -> float:
        return float(self.weights @ self.means)

    @property
    def std(self) -> float:
        second = self.weights @ (self.stds ** 2 + self.means ** 2)
        return float(np.sqrt(max(second - self.mean ** 2, 0.0)))

    def collapsed_at(self) -> Optional[float]:
        """The common location when every weighted component is the same point mass."""
        live = self.weights > 0
        if np.any(self.stds[live] > 0):
            return None
        atoms = self.means[live]
        if np.ptp(atoms) > 1e-15 * max(1.0, float(np.max(np.abs(atoms)))):
            return None
        return float(atoms[0])


def euler_mixture(
    model: ModelSpec, t_k: float, dt: float, sources: Union[QuantizerGrid, np.ndarray], source_probs: np.ndarray
) -> GaussianMixture:
    """Law of X_{k+1} when X_k is distributed on ``sources`` with ``source_probs``."""
    points = sources.points if isinstance(sources, QuantizerGrid) else np.asarray(sources, dtype=float)
    probs = np.asarray(source_probs, dtype=float)
    if probs.shape != points.shape:
        raise ValidationError("source_probs must match the source grid")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValidationError("source_probs must be a probability vector")
    mean, std = conditional_law(model, t_k, dt, points)
    return GaussianMixture(np.atleast_1d(mean), np.atleast_1d(std), probs)


def _pdf(z: np.ndarray) -> np.ndarray:
    return INV_SQRT_2PI * np.exp(-0.5 * z * z)


def cell_terms(points: np.ndarray, mixture: GaussianMixture) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-component cell integrals, each shaped (components, N).

    Returns P(C_j), E[X 1_{C_j}] and E[(X - gamma_j)^2 1_{C_j}].
    """
    grid = points if isinstance(points, QuantizerGrid) else QuantizerGrid(points)
    gamma = grid.points
    S, N = mixture.means.size, grid.N
    prob = np.zeros((S, N))
    first = np.zeros((S, N))
    dev2 = np.zeros((S, N))

    cont = mixture.stds > 0
    if np.any(cont):
        m = mixture.means[cont][:, None]
        v = mixture.stds[cont][:, None]
        with np.errstate(invalid="ignore"):
            z = (grid.bounds[None, :] - m) / v
            lo, hi = z[:, :-1], z[:, 1:]
            # complementary form in the upper tail
            p = np.where(lo > 0, ndtr(-lo) - ndtr(-hi), ndtr(hi) - ndtr(lo))
            p = np.maximum(p, 0.0)
            phi_lo, phi_hi = _pdf(lo), _pdf(hi)
            zphi_lo = np.where(np.isfinite(lo), lo * phi_lo, 0.0)
            zphi_hi = np.where(np.isfinite(hi), hi * phi_hi, 0.0)
        dphi = phi_lo - phi_hi
        dev = m - gamma[None, :]
        prob[cont] = p
        first[cont] = m * p + v * dphi
        dev2[cont] = dev ** 2 * p + 2.0 * dev * v * dphi + v ** 2 * (p + zphi_lo - zphi_hi)

    atoms = np.flatnonzero(~cont)
    if atoms.size:
        x = mixture.means[atoms]
        cells = grid.cell_index(x)
        prob[atoms, cells] = 1.0
        first[atoms, cells] = x
        dev2[atoms, cells] = (x - gamma[cells]) ** 2
    return prob, first, dev2


@dataclass(frozen=True, eq=False)
class DistortionReport:
    value: float
    gradient: np.ndarray
    weights: np.ndarray

    @property
    def quantization_error(self) -> float:
        return float(np.sqrt(self.value))


def _distortion(points, mixture: GaussianMixture) -> DistortionReport:
    prob, first, dev2 = cell_terms(points, mixture)
    gamma = np.asarray(points.points if isinstance(points, QuantizerGrid) else points, dtype=float)
    w = mixture.weights
    mass = w @ prob
    value = float(np.maximum(w @ dev2, 0.0).sum())
    gradient = 2.0 * (gamma * mass - w @ first)
    return DistortionReport(value=value, gradient=gradient, weights=mass)


def distortion(grid: QuantizerGrid, *args) -> DistortionReport:
    """Distortion E[min_j |X - gamma_j|^2] of ``grid`` and its gradient.

    Call as ``distortion(grid, mixture)`` or with the raw slice inputs
    ``distortion(grid, sources, source_probs, model, t_k, dt)``.
    """
    return _distortion(grid, _as_mixture(args))


def _as_mixture(args: Sequence) -> GaussianMixture:
    if len(args) == 1 and isinstance(args[0], GaussianMixture):
        return args[0]
    if len(args) == 5:
        sources, source_probs, model, t_k, dt = args
        return euler_mixture(model, t_k, dt, sources, source_probs)
    raise TypeError("expected (mixture) or (sources, source_probs, model, t_k, dt)")


def _lloyd_points(points: np.ndarray, mixture: GaussianMixture) -> np.ndarray:
    grid = QuantizerGrid(points)
    prob, first, _ = cell_terms(grid, mixture)
    mass = mixture.weights @ prob
    moment = mixture.weights @ first
    out = np.empty(grid.N)
    full = mass >= EMPTY_CELL_FLOOR
    out[full] = moment[full] / mass[full]
    bounds = grid.bounds
    for j in np.flatnonzero(~full):
        a, b = bounds[j], bounds[j + 1]
        if np.isinf(a) and np.isinf(b):
            out[j] = grid.points[j]
        elif np.isinf(a):
            out[j] = b
        elif np.isinf(b):
            out[j] = a
        else:
            out[j] = 0.5 * (a + b)
    return out


def lloyd_step(grid: QuantizerGrid, *args) -> QuantizerGrid:
    """One Lloyd I update: every point moves to the conditional mean of its cell.

    A cell whose mass is below EMPTY_CELL_FLOOR moves to its midpoint, or to
    its finite boundary for the two unbounded end cells.
    """
    return QuantizerGrid(_lloyd_points(grid.points, _as_mixture(args)))


def boundary_density(points: np.ndarray, mixture: GaussianMixture) -> np.ndarray:
    """Mixture density (continuous part) at the interior cell boundaries."""
    half = 0.5 * (points[:-1] + points[1:])
    cont = mixture.stds > 0
    if not np.any(cont):
        return np.zeros_like(half)
    m = mixture.means[cont][:, None]
    v = mixture.stds[cont][:, None]
    return mixture.weights[cont] @ (_pdf((half[None, :] - m) / v) / v)


def hessian(grid: QuantizerGrid, mixture: GaussianMixture) -> Tuple[np.ndarray, np.ndarray]:
    """Tridiagonal Hessian of the distortion as ``(diag, off)``."""
    points = grid.points
    mass = mixture.weights @ cell_terms(grid, mixture)[0]
    dens = boundary_density(points, mixture)
    half_gap = 0.5 * np.diff(points) * dens
    diag = 2.0 * mass
    diag[:-1] -= half_gap
    diag[1:] -= half_gap
    return diag, -half_gap


def _tridiagonal_dense(diag: np.ndarray, off: np.ndarray) -> np.ndarray:
    return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)


def newton_step(
    grid: QuantizerGrid,
    mixture: GaussianMixture,
    cond_limit: float = HESSIAN_COND_LIMIT,
    max_halvings: int = MAX_HALVINGS,
) -> QuantizerGrid:
    """Newton-Raphson update ``grid - H^{-1} grad`` with halving until ordered.

    Raises SolverError when the Hessian condition number exceeds
    ``cond_limit`` or no step in 2^-max_halvings keeps the points ordered.
    """
    report = _distortion(grid, mixture)
    diag, off = hessian(grid, mixture)
    if grid.N == 1:
        if not diag[0] > 0:
            raise SolverError("Hessian is singular", condition=float("inf"))
        delta = report.gradient / diag
    else:
        condition = float(np.linalg.cond(_tridiagonal_dense(diag, off)))
        if not np.isfinite(condition) or condition > cond_limit:
            raise SolverError(f"Hessian condition number {condition:.3e} exceeds {cond_limit:.0e}", condition=condition)
        banded = np.zeros((3, grid.N))
        banded[0, 1:] = off
        banded[1] = diag
        banded[2, :-1] = off
        delta = solve_banded((1, 1), banded, report.gradient)

    step = 1.0
    for _ in range(max_halvings + 1):
        candidate = grid.points - step * delta
        if _strictly_increasing(candidate):
            return QuantizerGrid(candidate)
        step *= 0.5
    raise SolverError(f"Newton step breaks grid ordering after {max_halvings} halvings")


@dataclass
class SolveResult:
    grid: QuantizerGrid
    iterations: int
    residuals: List[float] = field(default_factory=list)
    converged: bool = False
    fallbacks: int = 0
    distortions: List[float] = field(default_factory=list)


def lloyd_solve(
    mixture: GaussianMixture,
    init: np.ndarray,
    depth: int = 5,
    tol: float = 1e-5,
    max_iter: int = 1000,
    record_distortion: bool = False,
) -> SolveResult:
    """Lloyd I to stationarity, Anderson-accelerated when ``depth > 0``."""
    distortions: List[float] = []

    def record(points: np.ndarray) -> None:
        distortions.append(_distortion(points, mixture).quantization_error)

    if record_distortion:
        record(np.asarray(init, dtype=float))
    outcome = anderson_accelerate(
        lambda x: _lloyd_points(x, mixture),
        np.asarray(init, dtype=float),
        depth=depth,
        tol=tol,
        max_iter=max_iter,
        accept=_strictly_increasing,
        callback=record if record_distortion else None,
    )
    return SolveResult(
        grid=QuantizerGrid(outcome.x),
        iterations=outcome.iterations,
        residuals=outcome.residuals,
        converged=outcome.converged,
        fallbacks=outcome.fallbacks,
        distortions=distortions,
    )


def newton_solve(
    mixture: GaussianMixture,
    init: np.ndarray,
    tol: float = 1e-5,
    max_iter: int = 1000,
    record_distortion: bool = False,
    cond_limit: float = HESSIAN_COND_LIMIT,
) -> SolveResult:
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")
    grid = QuantizerGrid(init)
    result = SolveResult(grid=grid, iterations=0)
    if record_distortion:
        result.distortions.append(_distortion(grid, mixture).quantization_error)
    for it in range(1, max_iter + 1):
        try:
            updated = newton_step(grid, mixture, cond_limit=cond_limit)
        except SolverError as exc:
            raise SolverError(str(exc), iterations=it, condition=exc.condition) from exc
        step = float(np.linalg.norm(updated.points - grid.points))
        grid = updated
        result.residuals.append(step)
        if record_distortion:
            result.distortions.append(_distortion(grid, mixture).quantization_error)
        if step <= tol:
            result.converged = True
            break
    result.grid = grid
    result.iterations = it
    return result


def solve_quantizer(
    mixture: GaussianMixture,
    init: np.ndarray,
    solver: Union[SolverKind, str] = SolverKind.ANDERSON,
    tol: float = 1e-5,
    max_iter: int = 1000,
    depth: int = 5,
    record_distortion: bool = False,
) -> SolveResult:
    solver = SolverKind(solver)
    if solver is SolverKind.NEWTON:
        return newton_solve(mixture, init, tol=tol, max_iter=max_iter, record_distortion=record_distortion)
    depth = depth if solver is SolverKind.ANDERSON else 0
    return lloyd_solve(mixture, init, depth=depth, tol=tol, max_iter=max_iter, record_distortion=record_distortion)


@lru_cache(maxsize=None)
def _standard_normal_points(N: int) -> np.ndarray:
    seeds = ndtri((np.arange(N) + 0.5) / N)
    result = lloyd_solve(GaussianMixture.standard_normal(), seeds, depth=5, tol=1e-12, max_iter=20000)
    if not result.converged:
        logger.warning("standard-normal quantizer N=%d stopped at step %.2e", N, result.residuals[-1])
    return result.grid.points


def standard_normal_quantizer(N: int) -> QuantizerGrid:
    """Stationary N-point quantizer of N(0, 1), computed once per N."""
    if N < 1:
        raise ValidationError(f"N must be >= 1, got {N}")
    return QuantizerGrid(_standard_normal_points(int(N)))


def initial_grid(
    scheme: Union[InitScheme, str],
    model: ModelSpec,
    t_k: float,
    dt: float,
    prev_points: np.ndarray,
    reference: np.ndarray,
) -> np.ndarray:
    """Starting grid for the next slice under one of the four schemes.

    A one-point previous slice (the spot) always uses the Euler operator.
    """
    scheme = InitScheme(scheme)
    mean, std = conditional_law(model, t_k, dt, prev_points)
    mean, std = np.atleast_1d(mean), np.atleast_1d(std)
    if prev_points.size == 1:
        return mean[0] + std[0] * reference
    if prev_points.size != reference.size:
        raise ValidationError("previous grid and reference quantizer sizes differ")
    euler_op = mean + std * reference
    if scheme is InitScheme.PREV_GRID:
        return np.array(prev_points, dtype=float)
    if scheme is InitScheme.EULER_OP:
        return euler_op
    if scheme is InitScheme.MID_POINT:
        return 0.5 * (prev_points + euler_op)
    return mean


def _ordered_start(init: np.ndarray, prev_points: np.ndarray, mixture: GaussianMixture, reference: np.ndarray) -> np.ndarray:
    if _strictly_increasing(init):
        return init
    ordered = np.unique(init[np.isfinite(init)])
    if ordered.size == init.size:
        logger.debug("initial grid was not monotone; sorted it")
        return ordered
    if prev_points.size == init.size and _strictly_increasing(prev_points):
        logger.warning("initial grid has coincident points; starting from the previous grid")
        return np.array(prev_points, dtype=float)
    logger.warning("initial grid has coincident points; starting from a moment-matched grid")
    return mixture.mean + mixture.std * reference


def degenerate_grid(location: float, reference: np.ndarray) -> np.ndarray:
    """Grid around a point mass with reference point N // 2 exactly at ``location``."""
    spread = DEGENERATE_SPREAD * max(1.0, abs(location))
    return location + spread * (reference - reference[reference.size // 2])


def companion_parameters(grid: QuantizerGrid, mixture: GaussianMixture) -> Tuple[np.ndarray, np.ndarray]:
    """Transition rows (one per source) into ``grid`` and the implied marginals."""
    prob, _, _ = cell_terms(grid, mixture)
    transitions = prob / prob.sum(axis=1, keepdims=True)
    marginals = mixture.weights @ transitions
    return transitions, marginals / marginals.sum()


@dataclass
class SliceDiagnostics:
    slice_index: int
    solver: str
    init: str
    iterations: int
    converged: bool
    fallbacks: int = 0
    residuals: List[float] = field(default_factory=list)
    distortions: List[float] = field(default_factory=list)
    final_distortion: float = float("nan")
    degenerate: bool = False


def rmqa_build(
    model: ModelSpec,
    time_grid: TimeGrid,
    N: int,
    solver: Union[SolverKind, str] = SolverKind.ANDERSON,
    init: Union[InitScheme, str] = InitScheme.EULER_OP,
    tol: float = 1e-5,
    max_iter: int = 1000,
    depth: int = 5,
    record_distortion: bool = False,
) -> ChainApproximation:
    """Quantize the Euler chain slice by slice and return the Markov chain.

    Slice 0 is the spot. Each later grid is started from ``init``, solved to
    ``||Gamma^{l+1} - Gamma^l|| <= tol`` and paired with its marginals and the
    transition matrix from the previous slice.
    """
    if N < 2:
        raise ValidationError(f"N must be >= 2, got {N}")
    solver, init = SolverKind(solver), InitScheme(init)
    reference = standard_normal_quantizer(N).points
    grids = [np.array([model.x0])]
    marginals = [np.array([1.0])]
    forward: List[np.ndarray] = []
    diagnostics: List[SliceDiagnostics] = []

    for k, (t_k, dt) in enumerate(zip(time_grid.times[:-1], time_grid.steps)):
        prev, probs = grids[-1], marginals[-1]
        mixture = euler_mixture(model, t_k, dt, prev, probs)
        location = mixture.collapsed_at()
        if location is not None:
            logger.warning("slice %d: one-step law is a point mass at %.6g", k + 1, location)
            grid = QuantizerGrid(degenerate_grid(location, reference))
            diag = SliceDiagnostics(k + 1, solver.value, init.value, 0, True, degenerate=True)
        else:
            start = _ordered_start(initial_grid(init, model, t_k, dt, prev, reference), prev, mixture, reference)
            try:
                result = solve_quantizer(mixture, start, solver, tol, max_iter, depth, record_distortion)
            except SolverError as exc:
                raise exc.at_slice(k + 1) from exc
            if not result.converged:
                logger.warning(
                    "slice %d: %s did not converge in %d iterations (last step %.3e)",
                    k + 1, solver.value, result.iterations, result.residuals[-1],
                )
            grid = result.grid
            diag = SliceDiagnostics(
                k + 1, solver.value, init.value, result.iterations, result.converged,
                fallbacks=result.fallbacks, residuals=result.residuals, distortions=result.distortions,
            )
        diag.final_distortion = _distortion(grid, mixture).value
        transitions, next_marginals = companion_parameters(grid, mixture)
        logger.debug("slice %d: %d iterations, D=%.3e", k + 1, diag.iterations, diag.final_distortion)
        grids.append(np.array(grid.points))
        marginals.append(next_marginals)
        forward.append(transitions)
        diagnostics.append(diag)

    logger.info(
        "RMQA chain built: n=%d N=%d solver=%s init=%s, %d total iterations",
        time_grid.n, N, solver.value, init.value, sum(d.iterations for d in diagnostics),
    )
    return ChainApproximation(
        times=np.asarray(time_grid.times),
        grids=grids,
        marginals=marginals,
        forward=forward,
        builder="rmqa",
        diagnostics=diagnostics,
    )


def robustness_study(
    mixture: GaussianMixture,
    start: np.ndarray,
    solvers: Sequence[Union[SolverKind, str]] = (SolverKind.LLOYD, SolverKind.ANDERSON, SolverKind.NEWTON),
    tol: float = 1e-7,
    max_iter: int = 5000,
    depth: int = 5,
) -> List[dict]:
    """Run each solver from the same start; a Newton failure is reported, not raised."""
    rows = []
    for solver in solvers:
        solver = SolverKind(solver)
        try:
            result = solve_quantizer(mixture, start, solver, tol, max_iter, depth, record_distortion=True)
        except SolverError as exc:
            rows.append({
                "solver": solver.value, "iterations": exc.iterations, "converged": False,
                "failure": str(exc), "condition": exc.condition, "distortions": [], "points": None,
            })
            continue
        rows.append({
            "solver": solver.value, "iterations": result.iterations, "converged": result.converged,
            "failure": "", "condition": float("nan"), "distortions": result.distortions,
            "points": np.array(result.grid.points),
        })
    return rows

