"""Named random streams derived from a single integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``.

    The same arguments always give the same stream; different name paths give
    statistically independent streams.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(seq)
