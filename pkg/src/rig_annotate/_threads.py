import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "RIG_ANNOTATE_THREADS"


def thread_count() -> int:
    """Worker cap from ``RIG_ANNOTATE_THREADS`` (0 or unset means all CPUs)."""
    raw = os.environ.get(ENV_VAR, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def map_chunks(fn, n_items: int, chunk: int):
    """Run ``fn(start, stop)`` over fixed chunks; results come back in order.

    Chunk boundaries do not depend on the worker count, so the output is
    identical to a sequential run.
    """
    bounds = [(s, min(s + chunk, n_items)) for s in range(0, n_items, chunk)]
    workers = min(thread_count(), len(bounds))
    if workers <= 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
