"""Named random streams.

Every consumer of randomness asks for a stream by ``(seed, *names)``. Streams
are Philox generators keyed through :class:`numpy.random.SeedSequence`, so two
streams with different names never share state and adding a new consumer does
not perturb existing ones.
"""

import zlib

import numpy as np


def _name_key(name):
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed, *names):
    """Return an independent generator for ``(seed, names...)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return np.random.Generator(np.random.Philox(ss))
