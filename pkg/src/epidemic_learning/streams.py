"""Labeled random streams derived from one root seed.

Every consumer of randomness in a run (topology draws, gradient noise,
indegree-cap subsampling, initial models, problem construction) gets its
own stream keyed by ``(seed, purpose, *labels)``. Changing the topology
therefore never shifts the gradient-noise draws of the same seed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1

PURPOSES = {
    "problem": 1,
    "init": 2,
    "topology": 3,
    "noise": 4,
    "cap": 5,
}


def derive(seed: int, purpose: str, *labels: int) -> np.random.Generator:
    """Return a generator for ``purpose`` at the given integer labels."""
    try:
        code = PURPOSES[purpose]
    except KeyError:
        raise ValueError(f"unknown stream purpose {purpose!r}") from None
    entropy = [int(seed) & _MASK64, code, *(int(x) for x in labels)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
