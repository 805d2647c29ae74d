"""Seeded Gaussian streams for the Langevin experiments.

Streams are built on the counter-based Philox generator.  ``shard`` selects an
independent key so parallel trajectories can be partitioned from one seed.
"""

from __future__ import annotations

import numpy as np


class RngStream:
    """Reproducible stream of standard normals.

    ``counter`` is the number of normals drawn so far; ``RngStream(seed,
    counter=k)`` resumes the stream at the k-th draw.
    """

    def __init__(self, seed: int, shard: int = 0, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.shard = int(shard)
        key = np.random.SeedSequence([self.seed, self.shard]).generate_state(2, np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.counter = 0
        if counter:
            self.standard_normal(counter)

    def standard_normal(self, n: int) -> np.ndarray:
        out = self._gen.standard_normal(n)
        self.counter += n
        return out

    def spawn(self, shard: int) -> "RngStream":
        return RngStream(self.seed, shard)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, shard={self.shard}, counter={self.counter})"


def gaussian_vector(stream: RngStream, n: int, mean=0.0, stddev=1.0) -> np.ndarray:
    """n independent normals with componentwise mean and standard deviation."""
    stddev = np.broadcast_to(np.asarray(stddev, dtype=float), (n,))
    if np.any(stddev < 0):
        raise ValueError("standard deviations must be non-negative")
    z = stream.standard_normal(n)
    return np.asarray(mean, dtype=float) + stddev * z
