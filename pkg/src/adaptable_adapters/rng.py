"""Named, splittable random streams on top of the Philox counter-based generator.

A stream is identified by the run seed plus a path of labels, so the draws
for e.g. adapter layer 5 do not depend on how many other layers exist.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(label) -> list[int]:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, *path) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in path:
        entropy.extend(_label_words(label))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
