"""Named random sub-streams derived from one master seed."""

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent generator for ``label``; stable across runs and platforms."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode("utf-8"))])


def fork(rng: np.random.Generator) -> np.random.Generator:
    """A child generator that leaves ``rng`` untouched."""
    return np.random.Generator(rng.bit_generator.jumped())
