"""Named random streams.

Streams are Philox generators keyed by ``(seed, tag, *index)``. Two streams
with different tags or indices are independent, and a stream's draws do not
depend on how many other streams were consumed before it, which keeps
bootstrap replicates and Monte Carlo runs reproducible under any execution
order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed: int, tag: str, *index: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, _tag_key(tag), *(int(i) & 0xFFFFFFFF for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
