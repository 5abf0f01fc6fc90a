"""Seed splitting.

Every random draw in the package comes from a generator built by
:func:`derive_rng`. A child stream is identified by the root seed plus a tuple
of non-negative integer keys, e.g. ``(subject, class_index, purpose)``, and is
realized as ``SeedSequence(root, spawn_key=keys)``. Streams with different key
tuples are statistically independent and the mapping never depends on call
order, so work can be farmed out to parallel workers without changing results.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    k = int(k)
    if k < 0:
        raise ValueError("seed keys must be non-negative")
    return k


def derive_seed_sequence(root: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(root), spawn_key=tuple(_key(k) for k in keys))


def derive_rng(root: int, *keys) -> np.random.Generator:
    """Return the generator for the stream ``(root, *keys)``.

    String keys are hashed with CRC32 so call sites can name their purpose.
    """
    return np.random.default_rng(derive_seed_sequence(root, *keys))


def derive_int(root: int, *keys) -> int:
    """A 63-bit integer seed for APIs that want a plain int."""
    return int(derive_seed_sequence(root, *keys).generate_state(1, np.uint64)[0] >> np.uint64(1))
