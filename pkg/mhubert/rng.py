"""Seeded random number generation shared by every randomized operation.

All generators are `numpy.random.Philox` (counter-based) so plans reproduce
across platforms and numpy builds.
"""
import zlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Returns a Philox-backed generator for the seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *names: str) -> int:
    """Derives a child seed from a root seed and a path of names.

    Args:
        seed: The root seed.
        names: Labels identifying the consumer e.g. `'plan', 'epoch'`.

    Returns:
        A non-negative 63-bit integer seed.

    """
    spawn_key = tuple(zlib.crc32(name.encode('utf-8')) for name in names)
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def spawn_seeds(seed: int, count: int) -> 'list[int]':
    """Returns `count` independent child seeds of the root seed."""
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [int(c.generate_state(1, np.uint64)[0] >> np.uint64(1))
            for c in children]
