"""Atomic CSV / text artifact writers."""
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Union

import pandas as pd

from .chain import ChainApproximation, chain_frame, transition_frame

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.10g"


def write_atomic(path: Union[str, Path], write: Callable[[object], None]) -> Path:
    """Write through a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            write(handle)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug("wrote %s", path)
    return path


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    return write_atomic(path, lambda handle: frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT))


def write_text(text: str, path: Union[str, Path]) -> Path:
    return write_atomic(path, lambda handle: handle.write(text))


def render_table(frame: pd.DataFrame) -> str:
    """Plain-text table; price and standard error collapse into one "price (se)" column."""
    if {"price", "std_error"} <= set(frame.columns) and len(frame):
        estimate = [f"{p:.6g} ({s:.2g})" for p, s in zip(frame["price"], frame["std_error"])]
        at = frame.columns.get_loc("price")
        frame = frame.drop(columns=["price", "std_error"])
        frame.insert(at, "estimate", estimate)
    return frame.to_string(index=False, float_format=lambda v: f"{v:.6g}")


def diagnostics_frame(chain: ChainApproximation) -> pd.DataFrame:
    """One row per (slice, iteration) with the solver step and, if recorded, sqrt(D)."""
    rows = []
    for diag in chain.diagnostics:
        if not diag.residuals:
            rows.append({
                "slice": diag.slice_index, "iteration": 0, "residual": 0.0,
                "quantization_error": float("nan"), "converged": diag.converged, "degenerate": diag.degenerate,
            })
        for it, residual in enumerate(diag.residuals, start=1):
            error = diag.distortions[it] if it < len(diag.distortions) else float("nan")
            rows.append({
                "slice": diag.slice_index, "iteration": it, "residual": residual,
                "quantization_error": error, "converged": diag.converged, "degenerate": diag.degenerate,
            })
    return pd.DataFrame(
        rows, columns=["slice", "iteration", "residual", "quantization_error", "converged", "degenerate"]
    )


def dump_chain(chain: ChainApproximation, out_dir: Union[str, Path], prefix: str = "chain") -> list:
    out_dir = Path(out_dir)
    written = [
        write_csv(chain_frame(chain), out_dir / f"{prefix}_grids.csv"),
        write_csv(transition_frame(chain, min_prob=1e-300), out_dir / f"{prefix}_transitions.csv"),
    ]
    if chain.diagnostics:
        written.append(write_csv(diagnostics_frame(chain), out_dir / f"{prefix}_diagnostics.csv"))
    return written
