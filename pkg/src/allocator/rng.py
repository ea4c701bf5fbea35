"""Seeded random streams.

Each stream is addressed by ``(seed, *key)``.  The key becomes the spawn key of a
:class:`numpy.random.SeedSequence` that drives a counter-based Philox generator, so
the draws for path ``i`` never depend on how many other paths are simulated, in
which order, or on how many workers share the job.
"""
from __future__ import annotations

import numpy as np

# stream tags keep unrelated consumers of one master seed apart
MARKET = 0
ENGINE = 1
SOLVER = 2


def check_seed(seed) -> int:
    if seed is None or isinstance(seed, bool):
        raise ValueError("a non-negative integer seed is required")
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return seed


def generator(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(seed: int, path_ids, n_steps: int, dt: float, d: int = 2,
                        stream: int = MARKET) -> np.ndarray:
    """Brownian increments of shape ``(len(path_ids), n_steps, d)``, variance ``dt``.

    Row ``k`` depends only on ``(seed, stream, path_ids[k])``.  Drawing fewer steps
    returns a prefix of a longer draw.
    """
    path_ids = np.atleast_1d(np.asarray(path_ids, dtype=np.int64))
    out = np.empty((path_ids.size, n_steps, d))
    for row, pid in enumerate(path_ids):
        out[row] = generator(seed, stream, pid).standard_normal((n_steps, d))
    out *= np.sqrt(dt)
    return out
