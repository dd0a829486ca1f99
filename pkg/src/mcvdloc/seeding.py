"""Seed derivation for reproducible, parallelism-independent random streams.

Every stochastic stage of the pipeline owns a named stream derived from
``(master_seed, scenario_index, stream_tag, *extra)``.  Work units can then be
scheduled on any number of workers without changing any draw.
"""

from __future__ import annotations

import numpy as np

# Stream tags. Never renumber: stored datasets depend on them.
STREAM_PLACEMENT = 0
STREAM_WALK = 1
STREAM_CLUSTER = 2
STREAM_GMM = 3
STREAM_SPLIT = 4
STREAM_TRAIN = 5

_SeedLike = "int | np.random.SeedSequence | np.random.Generator | None"


def stream_seed(master_seed: int, scenario_index: int, stream: int, *extra: int) -> np.random.SeedSequence:
    """Derive the SeedSequence for one named stream of one scenario."""
    return np.random.SeedSequence((int(master_seed), int(scenario_index), int(stream)) + tuple(int(e) for e in extra))


def as_generator(seed=None) -> np.random.Generator:
    """Coerce ``seed`` into a counter-based Generator.

    Accepts None (nondeterministic entropy), an int, a SeedSequence, or an
    existing Generator (returned as-is).
    """
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (int, np.integer)):
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    raise TypeError(f"cannot build a Generator from {type(seed).__name__}")
