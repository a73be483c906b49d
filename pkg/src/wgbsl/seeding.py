"""Structured random streams.

Every random draw in a run comes from a generator addressed by
``(master_seed, path...)``, so results do not depend on evaluation order or
on how work is split between processes.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("path integers must be nonnegative")
        return int(part)
    return zlib.crc32(str(part).encode("utf8"))


def seed_sequence(master_seed: int, *path) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key(p) for p in path))


def stream(master_seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(master_seed, *path))


def derive_seed(master_seed: int, *path) -> int:
    """A plain integer seed for a sub-run, drawn from the addressed stream."""
    return int(seed_sequence(master_seed, *path).generate_state(1, np.uint32)[0])
