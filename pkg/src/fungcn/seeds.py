"""Seed derivation.

Every random stream in the library is derived from one top-level integer
seed plus a tuple of string/int keys naming the component, e.g.
``derive_seed(7, "codebook", "gcn", "cat_0")``. Keys are hashed with CRC32
and passed as the spawn key of a :class:`numpy.random.SeedSequence`, so the
scheme is stable across processes and Python versions.
"""

import zlib

import numpy as np

SCHEME = "SeedSequence(entropy=seed, spawn_key=crc32(keys))"


def _words(keys):
    return tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)


def derive_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_words(keys))
    return int(ss.generate_state(1, np.uint32)[0])


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=_words(keys)))
