"""Order-preserving process pool helper.

Work items must carry their own seeds; results are reduced in submission
order, so numeric output never depends on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def parallel_map(fn, items, workers: int) -> list:
    """Apply ``fn`` to every item, in order, on up to ``workers`` processes."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=1))
