"""Worker-count plumbing for the embarrassingly parallel evaluation loops."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "ALNP3_THREADS"


def worker_count() -> int:
    """Worker cap from the environment; defaults to 1 for reproducibility."""
    raw = os.environ.get(ENV_THREADS, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def parallel_map(fn, items: list) -> list:
    """Apply ``fn`` preserving input order; threads only when configured."""
    workers = min(worker_count(), len(items)) if items else 1
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
