"""Named, splittable random streams.

Each stochastic consumer (weight init, shuffling, variance-tuning neighbours,
...) asks for its own stream by name.  Streams are derived from the global
seed and a stable hash of the name, so adding a consumer never shifts the
numbers seen by another one.
"""

import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, *names):
    """Return a ``numpy.random.Generator`` for the stream ``names`` under ``seed``.

    ``stream(7, "attack", "init")`` and ``stream(7, "attack", "shuffle")`` are
    independent; both are reproducible across processes and platforms.
    """
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(seed, *names):
    """Derive a 63-bit integer seed for a named sub-experiment."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
