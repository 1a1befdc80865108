"""Hierarchical, purpose-tagged RNG derivation.

Every stochastic choice in the simulator draws from a generator seeded by
(root seed, purpose tag, context ints). This makes runs reproducible and
independent of execution order or parallelism degree.
"""

import numpy as np

TAG_CLASS = 2
TAG_PARTITION = 3
TAG_SAMPLE = 4
TAG_LOCAL = 5
TAG_ENCODER = 6
TAG_POOL = 7
TAG_COMMON = 8
TAG_HEAD = 9
TAG_CATEGORY = 10
TAG_BLOCK = 11
TAG_OWNERSHIP = 12


def child_seed(*parts):
    """Collapse (seed, tag, context...) into a single derived integer seed."""
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def rng_for(*parts):
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))
