"""Deterministic RNG substreams.

Every stochastic routine in the package draws from a Philox counter-based
generator keyed by ``(seed, stream id, *extra key parts)`` through
``numpy.random.SeedSequence``. Distinct key tuples give statistically
independent streams, so e.g. adding jumps to a path never perturbs the path
itself, and recomputing a single cached constant consumes exactly the same
draws as the bulk run that produced the cache.

Stream ids are fixed constants and part of the reproducibility contract:
changing them changes every seeded result in the package.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

# simulation streams
STREAM_PATH = 1
STREAM_JUMPS = 2
STREAM_OUTLIER = 3
STREAM_NOISE = 4

# constants / oracle streams
STREAM_NU = 11
STREAM_LAGGED = 12
STREAM_ORACLE = 13


def check_seed(seed: int) -> int:
    """Validate a user-supplied seed (nonnegative integer) and return it."""
    if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    if seed < 0:
        raise ConfigError(f"seed must be nonnegative, got {seed}")
    return int(seed)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator for the substream identified by (seed, *key)."""
    check_seed(seed)
    ss = np.random.SeedSequence(entropy=(int(seed),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def replication_seed(base_seed: int, rep: int) -> int:
    """Per-replication seed: base XOR replication index.

    XOR keeps seeds inside the nonnegative-integer domain and guarantees
    distinct seeds for distinct replications under one base seed.
    """
    return check_seed(base_seed) ^ rep
