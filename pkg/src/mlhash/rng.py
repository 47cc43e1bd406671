"""Named random streams derived from a single integer seed."""

import zlib

import numpy as np


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, label, *extra)``.

    The same key always yields the same stream, so components that draw from
    different labels never perturb each other.
    """
    key = (zlib.crc32(label.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
