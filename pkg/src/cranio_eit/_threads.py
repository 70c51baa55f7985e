"""Worker-count policy for the few embarrassingly parallel stages."""

from __future__ import annotations

import os


def worker_count(n_tasks: int) -> int:
    """Workers to use for n_tasks; CRANIO_EIT_THREADS caps the pool size."""
    cap = os.environ.get("CRANIO_EIT_THREADS")
    if cap is not None:
        try:
            limit = int(cap)
        except ValueError as exc:
            raise ValueError(f"CRANIO_EIT_THREADS must be an integer, got {cap!r}") from exc
        if limit < 1:
            raise ValueError("CRANIO_EIT_THREADS must be at least 1")
    else:
        limit = min(4, os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))
