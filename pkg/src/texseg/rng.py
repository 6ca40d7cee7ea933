"""Deterministic named random substreams.

Every source of randomness in the package draws from a generator created
here, so one integer seed plus a stream label ("init", "shuffle",
"dropout", "augment", ...) pins the full behavior of a run.
"""

import zlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Generator for the substream named by `labels` under `seed`.

    Labels are hashed with crc32 so the mapping is stable across runs and
    platforms; distinct label tuples give independent streams.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        entropy.append(zlib.crc32(str(label).encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
