"""Named, splittable random streams.

Every random draw in the simulator comes from a stream identified by a
(seed, name, ...) tuple, so subsystems (layout, fog, dropout, policy noise)
never consume each other's draws and results are order-independent.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str) -> np.random.Generator:
    """Return a generator for the named stream derived from ``seed``.

    The same (seed, names) always yields the same stream, independent of
    any other stream that may have been created or consumed.
    """
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))
