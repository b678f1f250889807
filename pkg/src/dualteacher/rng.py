"""Seed-splitting helpers.

Every random draw in the package flows from one master seed through
`substream`, which derives an independent generator from a (seed, *path)
tuple via numpy's SeedSequence. Streams are addressed by fixed integer
tags plus indices (sample id, iteration, slot), so results never depend
on evaluation order, batching, or thread count.
"""

from __future__ import annotations

import numpy as np

_SEED_MASK = (1 << 64) - 1

# Stream tags. Values are arbitrary but frozen: changing one silently
# changes every stream derived from it.
TAG_SCENE = 1
TAG_AUGMENT = 2
TAG_SAMPLER = 3
TAG_INIT = 4
TAG_TEST_DATA = 5


def _entropy(seed: int, path: tuple[int, ...]) -> tuple[int, ...]:
    return (int(seed) & _SEED_MASK,) + tuple(int(p) & _SEED_MASK for p in path)


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the stream addressed by (seed, *path)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(seed, path))))


def spawn_streams(seed: int, *path: int, n: int = 1) -> list[np.random.Generator]:
    """n independent child generators of the stream at (seed, *path)."""
    root = np.random.SeedSequence(_entropy(seed, path))
    return [np.random.Generator(np.random.PCG64(child)) for child in root.spawn(n)]


def derive_seed(seed: int, *path: int) -> int:
    """Derive a fresh 64-bit seed (e.g. for a held-out dataset split)."""
    ss = np.random.SeedSequence(_entropy(seed, path))
    return int(ss.generate_state(1, np.uint64)[0])
