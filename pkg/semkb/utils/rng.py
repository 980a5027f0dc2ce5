"""
Seed derivation for independent random streams
"""

import numpy as np

# Stream identifiers. Each random consumer draws from its own stream so that
# switching one feature on or off never shifts another feature's draws.
STREAM_CHANNEL = 1
STREAM_USERS = 2
STREAM_CORPUS = 3
STREAM_INIT = 4
STREAM_SHUFFLE = 5
STREAM_NOISE = 6
STREAM_SDG = 7
STREAM_EVAL = 8
STREAM_PRETRAIN = 9


def derive_seed(*keys: int) -> int:
    """Derive a 32-bit seed from a tuple of non-negative integer keys"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def stream_rng(*keys: int) -> np.random.Generator:
    """Generator seeded from ``derive_seed(*keys)``"""
    return np.random.default_rng(derive_seed(*keys))
