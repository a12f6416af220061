"""Named random substreams.

Every stage derives its generator from (root seed, label) through sha256,
so adding a consumer never shifts the draws of an existing one and two runs
with the same manifest replay bit-identical randomness.
"""

import hashlib

import numpy as np


def substream_seed(seed, label):
    """64-bit seed for a named substream of a root seed."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed, label):
    """numpy Generator for a named substream."""
    return np.random.default_rng(substream_seed(seed, label))
