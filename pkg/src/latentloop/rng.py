"""Deterministic splittable randomness.

Every stochastic choice in the package (weight init, data generation,
per-step training draws) flows through a named stream derived from one
master seed.  Streams are keyed by a path of labels, so e.g. the noise
drawn at training step 1234 of stage III is a pure function of
``(seed, "stage3", "step", 1234)`` and replays identically after a
checkpoint resume.  Philox is counter-based, so child streams are
independent by construction.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for `path` under `seed`; same inputs, same stream."""
    key = tuple(_key_part(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
