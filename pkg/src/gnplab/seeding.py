"""Named random substreams derived from one root seed."""
import zlib

import numpy as np


def _key(name):
    return tuple(zlib.crc32(part.encode()) for part in str(name).split("/"))


def seed_sequence(seed, name):
    return np.random.SeedSequence(entropy=int(seed), spawn_key=_key(name))


def rng_for(seed, name):
    """Independent generator for substream ``name`` (e.g. ``"zoo/cnn-a/init"``)."""
    return np.random.default_rng(seed_sequence(seed, name))


def derive_seed(seed, name):
    """A 63-bit integer seed for substream ``name``."""
    return int(seed_sequence(seed, name).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)
