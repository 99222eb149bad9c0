"""Seeded chunked RNG streams and an order-preserving thread map."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

# rows per chunk are chosen from the row width only, so chunk boundaries (and
# therefore every drawn number) never depend on the worker count
CHUNK_ELEMENTS = 1 << 20


def max_workers() -> int:
    env = os.environ.get("MLPATH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def pmap(func, items) -> list:
    """``[func(x) for x in items]``, evaluated on up to ``max_workers()`` threads."""
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [func(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def chunk_bounds(count: int, width: int) -> list[tuple[int, int]]:
    rows = max(1, CHUNK_ELEMENTS // max(1, width))
    return [(lo, min(lo + rows, count)) for lo in range(0, count, rows)]


def chunk_generators(seed: int, count: int, width: int):
    """Yield ``(lo, hi, Generator)`` with one independent stream per chunk."""
    bounds = chunk_bounds(count, width)
    children = np.random.SeedSequence(seed).spawn(len(bounds))
    for (lo, hi), child in zip(bounds, children):
        yield lo, hi, np.random.Generator(np.random.Philox(child))


def iter_normal_chunks(seed: int, count: int, width: int):
    for lo, hi, rng in chunk_generators(seed, count, width):
        yield lo, hi, rng.standard_normal((hi - lo, width))


def chunked_normals(seed: int, count: int, width: int) -> np.ndarray:
    out = np.empty((count, width))
    for lo, hi, xi in iter_normal_chunks(seed, count, width):
        out[lo:hi] = xi
    return out


def map_chunks(seed: int, count: int, width: int, func) -> list:
    """
    Apply ``func(lo, hi, normals)`` to every chunk, possibly in parallel.

    Results come back in chunk order, so reductions over them are independent
    of the number of threads.
    """
    jobs = list(chunk_generators(seed, count, width))

    def run(job):
        lo, hi, rng = job
        return func(lo, hi, rng.standard_normal((hi - lo, width)))

    return pmap(run, jobs)
