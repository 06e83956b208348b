"""Deterministic substreams for Monte Carlo work.

Draws are generated in fixed-size chunks and each chunk owns a Philox
stream spawned from one :class:`numpy.random.SeedSequence`.  The output is
therefore identical whatever the number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

CHUNK = 1 << 15

T = TypeVar("T")


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if seed is None:
        raise ValueError("an explicit seed is required for reproducibility")
    return np.random.SeedSequence(int(seed))


def generator(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed)))


def spawn(seed, count: int) -> list[np.random.SeedSequence]:
    return seed_sequence(seed).spawn(count)


def _chunk_sizes(n: int, chunk: int) -> list[int]:
    full, rest = divmod(int(n), chunk)
    return [chunk] * full + ([rest] if rest else [])


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def map_normal_chunks(
    fn: Callable[[np.ndarray], T],
    seed,
    n: int,
    m: int,
    threads: int | None = None,
    chunk: int = CHUNK,
) -> list[T]:
    """Apply ``fn`` to standard normal ``(size, m)`` chunks totalling ``n`` rows.

    Results come back in chunk order.
    """
    sizes = _chunk_sizes(n, chunk)
    streams = seed_sequence(seed).spawn(len(sizes))

    def work(i: int) -> T:
        rng = np.random.Generator(np.random.Philox(streams[i]))
        return fn(rng.standard_normal((sizes[i], m)))

    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(sizes) <= 1:
        return [work(i) for i in range(len(sizes))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(len(sizes))))


def normal_matrix(seed, n: int, m: int, threads: int | None = None) -> np.ndarray:
    """Standard normal ``(n, m)`` matrix assembled from chunk substreams."""
    parts = map_normal_chunks(lambda e: e, seed, n, m, threads=threads)
    if not parts:
        return np.zeros((0, m))
    return np.concatenate(parts, axis=0)
