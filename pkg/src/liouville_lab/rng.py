"""Counter-based random streams and deterministic chunked parallelism."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

CHUNK = 256


def sample_generator(seed: int, stream: int, index: int, sub: int = 0) -> np.random.Generator:
    """Generator fully determined by (seed, stream, sample index, sub-stream)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(index), int(sub)))
    return np.random.Generator(np.random.Philox(ss))


def chunk_ranges(n: int, chunk: int = CHUNK) -> list[range]:
    return [range(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def map_chunks(fn: Callable[[range], object], n: int, threads: int = 1, chunk: int = CHUNK) -> list:
    """Apply fn to fixed-size index chunks; chunk boundaries never depend on threads."""
    ranges = chunk_ranges(n, chunk)
    if threads <= 1 or len(ranges) <= 1:
        return [fn(r) for r in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, ranges))


def concat(parts: Sequence, axis: int = 0):
    if isinstance(parts[0], dict):
        return {k: np.concatenate([p[k] for p in parts], axis=axis) for k in parts[0]}
    return np.concatenate(parts, axis=axis)
