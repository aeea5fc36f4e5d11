"""
Discrete Markov chain on time-indexed grids, shared by both builders.

Holds grids, marginals and forward transition matrices; reverses the
transitions by Bayes' theorem and samples paths in either direction with
alias tables (O(1) per step).
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .exceptions import UnreachableStateError, ValidationError

logger = logging.getLogger(__name__)

UNREACHABLE_FLOOR = 1e-15
STOCHASTIC_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AliasTable:
    """Row-wise alias tables for a stack of discrete distributions.

    ``prob[r, c]`` is the threshold for keeping column c in row r, otherwise
    ``alias[r, c]`` is returned. Rows flagged invalid cannot be sampled.
    """

    prob: np.ndarray
    alias: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, valid: Optional[np.ndarray] = None) -> "AliasTable":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        rows, cols = matrix.shape
        valid = np.ones(rows, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        prob = np.ones((rows, cols))
        alias = np.tile(np.arange(cols), (rows, 1))
        for r in np.flatnonzero(valid):
            prob[r], alias[r] = _vose(matrix[r])
        return cls(prob=prob, alias=alias, valid=valid)

    @property
    def size(self) -> int:
        return self.prob.shape[1]

    def sample(self, rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rows = np.asarray(rows)
        if not np.all(self.valid[rows]):
            bad = int(rows[~self.valid[rows]][0])
            raise UnreachableStateError(f"cannot sample from unreachable state {bad}")
        col = rng.integers(0, self.size, size=rows.shape)
        keep = rng.random(rows.shape) < self.prob[rows, col]
        return np.where(keep, col, self.alias[rows, col])


def _vose(p: np.ndarray):
    """Two-worklist (small/large) construction, O(N)."""
    p = np.asarray(p, dtype=float)
    if p.size == 0:
        raise ValidationError("cannot build an alias table for an empty distribution")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValidationError("alias probabilities must be finite and non-negative")
    total = p.sum()
    if not total > 0:
        raise ValidationError("cannot build an alias table for an all-zero distribution")
    n = p.size
    scaled = p * (n / total)
    prob = np.ones(n)
    alias = np.arange(n)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers are 1 up to roundoff
    return prob, alias


def alias_build(p: np.ndarray) -> AliasTable:
    return AliasTable.from_matrix(np.asarray(p, dtype=float)[None, :])


def alias_sample(table: AliasTable, rng: np.random.Generator, size: Optional[int] = None):
    """One draw (or ``size`` draws) from row 0 of ``table``."""
    if size is None:
        return int(table.sample(np.zeros(1, dtype=int), rng)[0])
    return table.sample(np.zeros(size, dtype=int), rng)


@dataclass(eq=False)
class ChainApproximation:
    """Grids Gamma_0..Gamma_n, marginals P^k and transitions between slices.

    Treated as immutable once built: ``reverse_transitions`` returns a new
    chain, and alias tables are built on first use and then only read.
    """

    times: np.ndarray
    grids: List[np.ndarray]
    marginals: List[np.ndarray]
    forward: List[np.ndarray]
    builder: str = "custom"
    backward: Optional[List[np.ndarray]] = None
    backward_valid: Optional[List[np.ndarray]] = None
    diagnostics: list = field(default_factory=list)
    _alias: Dict[tuple, AliasTable] = field(default_factory=dict, init=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, init=False, repr=False)

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.grids = [np.asarray(g, dtype=float) for g in self.grids]
        self.marginals = [np.asarray(p, dtype=float) for p in self.marginals]
        self.forward = [np.asarray(m, dtype=float) for m in self.forward]
        n = len(self.forward)
        if n < 1 or len(self.grids) != n + 1 or len(self.marginals) != n + 1 or self.times.size != n + 1:
            raise ValidationError("chain needs n + 1 times, grids and marginals for n transition matrices")
        if self.grids[0].size != 1:
            raise ValidationError("slice 0 must be the single spot point")
        for k, (grid, marg) in enumerate(zip(self.grids, self.marginals)):
            if marg.shape != grid.shape:
                raise ValidationError(f"slice {k}: marginal length does not match grid")
            if np.any(marg < 0) or abs(marg.sum() - 1.0) > STOCHASTIC_TOL:
                raise ValidationError(f"slice {k}: marginals are not a probability vector")
        for k, matrix in enumerate(self.forward):
            if matrix.shape != (self.grids[k].size, self.grids[k + 1].size):
                raise ValidationError(f"transition {k}->{k + 1} has shape {matrix.shape}")
            if np.any(matrix < 0) or np.max(np.abs(matrix.sum(axis=1) - 1.0)) > STOCHASTIC_TOL:
                raise ValidationError(f"transition {k}->{k + 1} is not row-stochastic")
            drift = np.abs(self.marginals[k] @ matrix - self.marginals[k + 1]).sum()
            if drift > STOCHASTIC_TOL:
                raise ValidationError(f"slice {k + 1}: marginals inconsistent with transitions ({drift:.2e})")

    @classmethod
    def from_transitions(
        cls, times, grids: List[np.ndarray], forward: List[np.ndarray], builder: str = "custom"
    ) -> "ChainApproximation":
        """Build a chain from transitions alone, propagating P^0 = (1)."""
        grids = [np.asarray(g, dtype=float) for g in grids]
        forward = [np.asarray(m, dtype=float) for m in forward]
        if len(grids) != len(forward) + 1:
            raise ValidationError("chain needs n + 1 grids for n transition matrices")
        if grids[0].size != 1:
            raise ValidationError("slice 0 must be the single spot point")
        for k, matrix in enumerate(forward):
            if matrix.shape != (grids[k].size, grids[k + 1].size):
                raise ValidationError(f"transition {k}->{k + 1} has shape {matrix.shape}")
        marginals = [np.array([1.0])]
        for matrix in forward:
            nxt = marginals[-1] @ matrix
            marginals.append(nxt / nxt.sum())
        return cls(times=times, grids=grids, marginals=marginals, forward=forward, builder=builder)

    @property
    def n(self) -> int:
        return len(self.forward)

    @property
    def N(self) -> int:
        return self.grids[-1].size

    @property
    def x0(self) -> float:
        return float(self.grids[0][0])

    @property
    def has_backward(self) -> bool:
        return self.backward is not None

    def _table(self, key: tuple, build) -> AliasTable:
        table = self._alias.get(key)
        if table is None:
            with self._lock:
                table = self._alias.get(key)
                if table is None:
                    table = build()
                    self._alias[key] = table
        return table

    def forward_table(self, k: int) -> AliasTable:
        return self._table(("forward", k), lambda: AliasTable.from_matrix(self.forward[k]))

    def backward_table(self, k: int) -> AliasTable:
        """Alias tables for the rows of the k+1 -> k backward matrix."""
        if self.backward is None:
            raise ValidationError("backward matrices have not been built; call reverse_transitions")
        return self._table(
            ("backward", k), lambda: AliasTable.from_matrix(self.backward[k], self.backward_valid[k])
        )


def reverse_transitions(chain: ChainApproximation, floor: float = UNREACHABLE_FLOOR) -> ChainApproximation:
    """Bayes reversal: B^k[j, i] = Pi^k[i, j] P^k_i / P^{k+1}_j.

    States with P^{k+1}_j <= ``floor`` get an invalid (all-zero) row and
    states with P^k_i <= ``floor`` are never entered backward.
    """
    backward, valid = [], []
    for k, matrix in enumerate(chain.forward):
        source = np.where(chain.marginals[k] > floor, chain.marginals[k], 0.0)
        joint = source[:, None] * matrix
        mass = joint.sum(axis=0)
        ok = (chain.marginals[k + 1] > floor) & (mass > 0)
        rows = np.zeros((matrix.shape[1], matrix.shape[0]))
        rows[ok] = joint[:, ok].T / mass[ok, None]
        rows[ok] /= rows[ok].sum(axis=1, keepdims=True)
        backward.append(rows)
        valid.append(ok)
        if not ok.all():
            logger.debug("slice %d: %d unreachable states", k + 1, int((~ok).sum()))
    return replace(chain, backward=backward, backward_valid=valid)


@dataclass(frozen=True, eq=False)
class PathSet:
    """Sampled chain paths as grid indices, shape (n_paths, n + 1), in forward time."""

    indices: np.ndarray
    times: np.ndarray
    grids: List[np.ndarray]

    @property
    def n_paths(self) -> int:
        return self.indices.shape[0]

    def values(self) -> np.ndarray:
        return np.column_stack([grid[self.indices[:, k]] for k, grid in enumerate(self.grids)])

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values(), columns=[f"t{k}" for k in range(len(self.grids))])
        frame.index.name = "path"
        return frame


def sample_backward(
    chain: ChainApproximation, terminal_index: int, n_paths: int, rng: np.random.Generator
) -> PathSet:
    """Paths pinned at grid node ``terminal_index`` of the last slice, drawn back to the spot."""
    if chain.backward is None:
        raise ValidationError("backward matrices have not been built; call reverse_transitions")
    if not 0 <= terminal_index < chain.N:
        raise ValidationError(f"terminal index {terminal_index} outside grid of size {chain.N}")
    if chain.marginals[-1][terminal_index] <= UNREACHABLE_FLOOR:
        raise UnreachableStateError(f"terminal state {terminal_index} has zero marginal mass")
    indices = np.zeros((n_paths, chain.n + 1), dtype=np.int64)
    indices[:, -1] = terminal_index
    for k in range(chain.n - 1, 0, -1):
        indices[:, k] = chain.backward_table(k).sample(indices[:, k + 1], rng)
    return PathSet(indices=indices, times=chain.times, grids=chain.grids)


def sample_forward(chain: ChainApproximation, n_paths: int, rng: np.random.Generator) -> PathSet:
    indices = np.zeros((n_paths, chain.n + 1), dtype=np.int64)
    for k in range(chain.n):
        indices[:, k + 1] = chain.forward_table(k).sample(indices[:, k], rng)
    return PathSet(indices=indices, times=chain.times, grids=chain.grids)


def sample_marginal(chain: ChainApproximation, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` states of slice k straight from P^k, without simulating a path."""
    if not 0 <= k <= chain.n:
        raise ValidationError(f"slice {k} outside 0..{chain.n}")
    table = chain._table(("marginal", k), lambda: alias_build(chain.marginals[k]))
    return chain.grids[k][alias_sample(table, rng, size=n)]


def chain_frame(chain: ChainApproximation) -> pd.DataFrame:
    """Long table of (slice, node, time, point, marginal)."""
    frames = [
        pd.DataFrame({
            "slice": k,
            "node": np.arange(grid.size),
            "time": chain.times[k],
            "point": grid,
            "marginal": marg,
        })
        for k, (grid, marg) in enumerate(zip(chain.grids, chain.marginals))
    ]
    return pd.concat(frames, ignore_index=True)


def transition_frame(chain: ChainApproximation, min_prob: float = 0.0) -> pd.DataFrame:
    """Non-negligible forward transition entries as (slice, from, to, prob)."""
    frames = []
    for k, matrix in enumerate(chain.forward):
        i, j = np.nonzero(matrix > min_prob)
        frames.append(pd.DataFrame({"slice": k, "from": i, "to": j, "prob": matrix[i, j]}))
    return pd.concat(frames, ignore_index=True)
