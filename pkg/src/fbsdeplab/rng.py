"""Counter-based random streams.

Every Monte Carlo quantity is drawn from a Philox generator keyed by
``(seed, stream, block)``.  Blocks of paths are therefore independent of
how many workers process them, which keeps results bit-identical across
thread counts.
"""

import numpy as np

BLOCK_SIZE = 4096

# stream ids keep unrelated consumers of the same seed apart
STREAM_DRIVERS = 0
STREAM_INITIAL = 1
STREAM_PARTICLES = 2
STREAM_MISC = 3


def substream(seed, stream=0, block=0):
    """Return a ``numpy.random.Generator`` on an independent Philox substream."""
    seq = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(seq))


def blocks(n_paths, block_size=BLOCK_SIZE):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for b, start in enumerate(range(0, n_paths, block_size)):
        yield b, start, min(start + block_size, n_paths)
