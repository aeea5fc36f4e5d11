"""
Anderson acceleration for fixed-point maps x = g(x).

Difference form with a QR factorisation of the residual-difference matrix
that is updated column by column (insert newest, delete oldest) instead of
being refactorised each iteration.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.linalg import LinAlgError, qr_delete, qr_insert, solve_triangular

from .exceptions import ValidationError

logger = logging.getLogger(__name__)

FixedPointMap = Callable[[np.ndarray], np.ndarray]


@dataclass
class AndersonResult:
    x: np.ndarray
    iterations: int
    residuals: List[float] = field(default_factory=list)
    converged: bool = False
    fallbacks: int = 0
    # Constrained mixing weights (sum to 1) of the last accelerated step.
    weights: Optional[np.ndarray] = None


class AndersonHistory:
    """Sliding window of residual and map differences with an economic QR of dF."""

    def __init__(self, depth: int, cond_limit: float = 1e10):
        self.depth = depth
        self.cond_limit = cond_limit
        self.dF: List[np.ndarray] = []
        self.dG: List[np.ndarray] = []
        self.Q: Optional[np.ndarray] = None
        self.R: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.dF)

    def clear(self) -> None:
        self.dF.clear()
        self.dG.clear()
        self.Q = self.R = None

    def _refactor(self) -> None:
        if not self.dF:
            self.Q = self.R = None
            return
        self.Q, self.R = np.linalg.qr(np.column_stack(self.dF), mode="reduced")

    def _drop_oldest(self) -> None:
        self.dF.pop(0)
        self.dG.pop(0)
        if not self.dF:
            self.Q = self.R = None
            return
        try:
            self.Q, self.R = qr_delete(self.Q, self.R, 0, 1, which="col")
        except (LinAlgError, ValueError):
            self._refactor()

    def push(self, df: np.ndarray, dg: np.ndarray) -> None:
        if not np.any(df):
            return
        if len(self.dF) >= self.depth:
            self._drop_oldest()
        self.dF.append(df)
        self.dG.append(dg)
        if self.Q is None or self.Q.shape[1] >= self.Q.shape[0]:
            self._refactor()
        else:
            try:
                self.Q, self.R = qr_insert(self.Q, self.R, df, self.R.shape[1], which="col")
            except (LinAlgError, ValueError):
                self._refactor()
        self._trim()

    def _trim(self) -> None:
        while len(self.dF) > 1 and np.linalg.cond(self.R) > self.cond_limit:
            self._drop_oldest()
        if self.R is not None and np.linalg.cond(self.R) > self.cond_limit:
            self.clear()

    def coefficients(self, f: np.ndarray) -> np.ndarray:
        """Least-squares gamma minimising ||f - dF gamma||."""
        return solve_triangular(self.R, self.Q.T @ f, lower=False)

    def step(self, g_x: np.ndarray, f: np.ndarray) -> tuple:
        gamma = self.coefficients(f)
        x_next = g_x - np.column_stack(self.dG) @ gamma
        return x_next, _mixing_weights(gamma)


def _mixing_weights(gamma: np.ndarray) -> np.ndarray:
    m = gamma.size
    alpha = np.empty(m + 1)
    alpha[0] = gamma[0]
    alpha[1:m] = np.diff(gamma)
    alpha[m] = 1.0 - gamma[-1]
    return alpha


def anderson_accelerate(
    g: FixedPointMap,
    x0: np.ndarray,
    depth: int = 5,
    tol: float = 1e-5,
    max_iter: int = 1000,
    accept: Optional[Callable[[np.ndarray], bool]] = None,
    callback: Optional[Callable[[np.ndarray], None]] = None,
    cond_limit: float = 1e10,
    blowup: float = 10.0,
) -> AndersonResult:
    """Iterate ``x <- g(x)`` with Anderson mixing of the last ``depth`` residuals.

    ``depth == 0`` is the plain fixed-point iteration. An accelerated candidate
    is replaced by ``g(x)`` when ``accept`` rejects it, when it is not finite,
    or when its residual grows more than ``blowup`` times. Stops once
    ``||x_{l+1} - x_l|| <= tol``.
    """
    if depth < 0:
        raise ValidationError(f"Anderson depth must be >= 0, got {depth}")
    if max_iter < 1:
        raise ValidationError(f"max_iter must be >= 1, got {max_iter}")

    x = np.array(x0, dtype=float)
    history = AndersonHistory(min(depth, x.size), cond_limit) if depth else None
    g_x = g(x)
    f = g_x - x
    result = AndersonResult(x=x, iterations=0)
    prev_g: Optional[np.ndarray] = None
    prev_f: Optional[np.ndarray] = None
    best_x, best_step = x, np.inf

    for it in range(1, max_iter + 1):
        if history is not None and prev_f is not None:
            history.push(f - prev_f, g_x - prev_g)

        x_next = g_x
        if history is not None and len(history):
            candidate, weights = history.step(g_x, f)
            ok = np.all(np.isfinite(candidate)) and (accept is None or accept(candidate))
            if ok:
                x_next = candidate
                result.weights = weights
            else:
                result.fallbacks += 1
                history.clear()

        g_next = g(x_next)
        f_next = g_next - x_next
        if (
            x_next is not g_x
            and np.linalg.norm(f_next) > blowup * max(np.linalg.norm(f), np.finfo(float).tiny)
        ):
            # Residual blew up: take the plain step and restart the window.
            result.fallbacks += 1
            history.clear()
            x_next = g_x
            g_next = g(x_next)
            f_next = g_next - x_next

        step = float(np.linalg.norm(x_next - x))
        result.residuals.append(step)
        if step < best_step:
            best_x, best_step = x_next, step
        prev_g, prev_f = g_x, f
        x, g_x, f = x_next, g_next, f_next
        if callback is not None:
            callback(x)
        if step <= tol:
            result.converged = True
            result.iterations = it
            break
    else:
        result.iterations = max_iter
        # Not converged: hand back the iterate with the smallest step.
        x = best_x
        logger.debug("fixed point not reached after %d iterations (best step %.3e)", max_iter, best_step)

    result.x = x
    if result.fallbacks:
        logger.debug("Anderson fell back to the plain step %d times", result.fallbacks)
    return result
