"""Exception hierarchy shared by every backmc module."""
from typing import Optional


class BackMCError(Exception):
    """Base class for all errors raised by backmc."""


class ConfigurationError(BackMCError):
    """Experiment configuration is missing a field or holds an invalid value."""

    def __init__(
        self,
        message: str,
        field: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        self.field = field
        self.line = line
        self.column = column
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}" + (f", column {column}" if column is not None else ""))
        prefix = f"[{'; '.join(where)}] " if where else ""
        super().__init__(f"{prefix}{message}")


class ValidationError(BackMCError):
    """An argument violates an operation's contract."""


class NumericalError(BackMCError):
    """A numerical routine could not produce a trustworthy result."""


class SolverError(NumericalError):
    """A quantization solver failed (non-convergence, bad Hessian, broken ordering)."""

    def __init__(
        self,
        message: str,
        slice_index: Optional[int] = None,
        iterations: Optional[int] = None,
        condition: Optional[float] = None,
    ):
        self.slice_index = slice_index
        self.iterations = iterations
        self.condition = condition
        super().__init__(message)

    def at_slice(self, slice_index: int) -> "SolverError":
        """Return a copy of this error tagged with the time-slice index."""
        return SolverError(
            f"slice {slice_index}: {self}",
            slice_index=slice_index,
            iterations=self.iterations,
            condition=self.condition,
        )


class GeneratorValidityError(NumericalError):
    """Drift dominates diffusion at the grid spacing: an off-diagonal rate is negative."""

    def __init__(self, message: str, node: int):
        self.node = node
        super().__init__(message)


class UnreachableStateError(NumericalError):
    """Backward sampling was asked to leave a state with zero marginal mass."""
