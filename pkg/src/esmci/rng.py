"""Seeded counter-based random streams.

Every consumer of randomness gets its own stream addressed by a path of
non-negative integers under a 64-bit master seed, so work can be split
across threads without changing any draw.
"""

from __future__ import annotations

import numpy as np

# Path tags for streams that are not indexed by a subsample number.
TEST_POINTS = 0x7E57
REP_DATA = 0xDA7A
REP_FIT = 0xF17

MASK64 = (1 << 64) - 1


def stream(seed: int, *path: int) -> np.random.Generator:
    """Return an independent Philox generator for ``(seed, *path)``."""
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """A 64-bit seed derived deterministically from ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def keep_mask(gen: np.random.Generator, shape: tuple[int, ...], drop_rate: float) -> np.ndarray:
    """Boolean keep-mask with P(keep) = 1 - drop_rate, drawn from raw 32-bit words."""
    size = int(np.prod(shape))
    if drop_rate <= 0.0:
        return np.ones(shape, dtype=bool)
    threshold = np.uint32(min(round(drop_rate * 2.0**32), 2**32 - 1))
    words = gen.bit_generator.random_raw((size + 1) // 2).view(np.uint32)[:size]
    return (words >= threshold).reshape(shape)


def standard_normal(gen: np.random.Generator, size: int) -> np.ndarray:
    """Box-Muller normals from pairs of uniforms on (0, 1]."""
    m = (size + 1) // 2
    u1 = 1.0 - gen.random(m)
    u2 = gen.random(m)
    rad = np.sqrt(-2.0 * np.log(u1))
    ang = 2.0 * np.pi * u2
    return np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:size]
