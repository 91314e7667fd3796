"""Root-seed splitting: each consumer gets its own independent stream."""

from __future__ import annotations

import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, purpose).

    Streams for different purposes never depend on how much another
    purpose has consumed.
    """
    ss = np.random.SeedSequence([int(seed), purpose_key(purpose)])
    return np.random.Generator(np.random.Philox(ss))
