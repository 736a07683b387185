"""Named random sub-streams derived from a single master seed.

``stream(seed, "inner/3/noise")`` always yields the same generator for the
same arguments, independent of call order or worker layout.
"""

import hashlib

import numpy as np


def _name_words(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed, name):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *_name_words(name)]))


def child_seed(seed, name):
    """A 32-bit integer seed for ``name``; handy for logging and nested streams."""
    return int(stream(seed, name).integers(0, 2**31 - 1))
