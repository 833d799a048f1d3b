"""Seeded random streams.

All randomness flows through named Philox (counter-based) streams owned by one
``RngContext``; a stream's sequence depends only on the root seed and its name.
"""
import zlib

import numpy as np


def make_generator(seed: int, *path) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(p).encode()) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


class RngContext:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Persistent stream: repeated calls continue the same sequence."""
        if name not in self._streams:
            self._streams[name] = make_generator(self.seed, name)
        return self._streams[name]

    def fresh(self, *path) -> np.random.Generator:
        """Stateless stream keyed by ``path``; identical paths give identical draws."""
        return make_generator(self.seed, *path)
