"""Seedable, splittable random streams.

Every random draw in the package comes from ``derive_rng(seed, *names)``.
The stream depends only on the global seed and the component path, so two
components never share a stream and adding a component never perturbs the
draws of another.
"""
import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(str(name).encode("utf-8"))


def derive_seed_sequence(seed, *names):
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_name_key(n) for n in names))


def derive_rng(seed, *names):
    """Return a ``numpy.random.Generator`` keyed by ``(seed, names...)``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(seed, *names)))
