"""Named, independent random streams derived from one run seed.

Each pipeline stage draws from its own stream, so skipping a stage (for
example the behavior model when its weight is zero) leaves every other
stage's randomness untouched.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stage_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), stream_key(name)])


def stage_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stage_seed(seed, name))


def stage_int(seed: int, name: str) -> int:
    """A 32-bit integer seed for APIs that take plain ints."""
    return int(stage_seed(seed, name).generate_state(1)[0])
