"""Named, independent RNG streams derived from one run seed.

Every stochastic consumer in a training run (parameter init, ray jitter, pose
sampling, cache coin flips, correlation-loss subsampling) gets its own
generator, spawned from a single SeedSequence in a fixed name order. Adding a
consumer therefore never shifts the draws of existing ones, which is what
makes fixed-seed runs bitwise reproducible.
"""

from __future__ import annotations

import numpy as np

STREAMS = ("init", "rays", "poses", "cache", "subsample")


def seed_streams(seed: int, names: tuple[str, ...] = STREAMS) -> dict[str, np.random.Generator]:
    """One independent Generator per name; spawn order == name order."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(seq) for name, seq in zip(names, children)}
