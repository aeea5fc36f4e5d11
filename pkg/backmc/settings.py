"""Runtime settings pulled from the environment (after ``.env`` loading)."""
import os
from typing import Optional

from dotenv import load_dotenv

from .exceptions import ConfigurationError

load_dotenv()


class Settings:
    """Runtime configuration pulled from environment variables.

    Only the worker-thread budget can be overridden from the environment;
    everything else that shapes a run lives in the experiment config.
    """

    def __init__(self, threads: Optional[int] = None) -> None:
        raw = os.getenv("BACKMC_THREADS", "1")
        try:
            env_threads = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"BACKMC_THREADS must be an integer, got {raw!r}", field="BACKMC_THREADS") from exc
        self.threads = threads if threads is not None else env_threads
        # False when neither a flag nor the environment chose the thread count
        self.explicit_threads = threads is not None or "BACKMC_THREADS" in os.environ
        if self.threads < 1:
            raise ConfigurationError("thread budget must be >= 1", field="threads")

    def __repr__(self) -> str:
        return f"Settings(threads={self.threads})"
