"""Thread-count control for the order-preserving parallel maps."""

from __future__ import annotations

import os

THREADS_ENV = "DEMIXKIT_THREADS"


def worker_count() -> int:
    """Threads for feature extraction and evaluation; ``DEMIXKIT_THREADS`` overrides."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))
