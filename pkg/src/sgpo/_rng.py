"""Named, reproducible random streams."""

from __future__ import annotations

import zlib

import numpy as np


def _word(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    return zlib.crc32(str(name).encode("utf-8"))


def named_stream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``, stable across runs and platforms."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(n) for n in names))
    return np.random.Generator(np.random.PCG64(seq))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def substream(rng: np.random.Generator, *names) -> np.random.Generator:
    """Derive a named child of ``rng`` without consuming draws from it out of order."""
    seed = int(rng.integers(0, 2**63 - 1))
    return named_stream(seed, *names)
