"""Internal worker-pool sizing, capped by the GRASP_CLOUD_THREADS variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    cap = os.environ.get("GRASP_CLOUD_THREADS")
    if cap is not None:
        try:
            return max(1, int(cap))
        except ValueError:
            return 1
    return max(1, min(os.cpu_count() or 1, 4))


def ordered_map(fn, items):
    """Map preserving order; results are independent of scheduling."""
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
