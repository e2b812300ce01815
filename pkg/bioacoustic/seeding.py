"""Per-purpose random streams derived from one root seed.

Each consumer names its purpose; the stream depends only on (root seed,
purpose, index), so adding a consumer never shifts another consumer's draws.
"""

import zlib

import numpy as np


def purpose_key(purpose):
    return zlib.crc32(purpose.encode('utf-8'))


def derive_seed(root_seed, purpose, *index):
    seq = np.random.SeedSequence(int(root_seed), spawn_key=(purpose_key(purpose), *map(int, index)))
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def derive_rng(root_seed, purpose, *index):
    seq = np.random.SeedSequence(int(root_seed), spawn_key=(purpose_key(purpose), *map(int, index)))
    return np.random.default_rng(seq)
