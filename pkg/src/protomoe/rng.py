"""Deterministic, splittable random streams built on numpy's Philox generator.

Philox is counter-based, so a stream is fully determined by its key. Keys
are derived from (seed, purpose, step): every consumer (data synthesis,
label dropout, weight init, samplers) draws from its own independent
stream, and identical (seed, purpose, step) triples produce bit-identical
draws on every platform.
"""

from __future__ import annotations

import zlib

import numpy as np

_MIX = 0x9E3779B97F4A7C15  # 64-bit golden-ratio constant, decorrelates purpose/step


def stream_key(seed: int, purpose: str, step: int = 0) -> tuple[int, int]:
    """Two 64-bit Philox key words for a (seed, purpose, step) triple."""
    h = zlib.crc32(purpose.encode("utf-8"))
    word = (h * _MIX + step * 0xB5297A4D + 0x68E31DA4) % (1 << 64)
    return seed % (1 << 64), word


def stream(seed: int, purpose: str, step: int = 0) -> np.random.Generator:
    """Independent generator for one consumer of randomness."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, step)))
