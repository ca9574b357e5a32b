"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream(seed, name):
    """Return a Generator for the sub-stream ``name`` of root ``seed``.

    Streams with different names are statistically independent, and the
    mapping is stable across processes (no reliance on ``hash``).
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))
