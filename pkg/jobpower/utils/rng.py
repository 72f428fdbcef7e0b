"""Labeled, counter-based random streams derived from one master seed"""

import hashlib
from typing import Union

import numpy as np

Label = Union[str, int]


def label_key(label: Label) -> int:
    """Map a stream label to a stable 32-bit integer"""
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return int(label)
    digest = hashlib.md5(str(label).encode()).hexdigest()
    return int(digest[:8], 16)


def stream(seed: int, *labels: Label) -> np.random.Generator:
    """Philox generator for the stream named by ``labels`` under ``seed``.

    The same (seed, labels) always yields the same sequence, independently of
    which other streams were created or consumed before it.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(label_key(l) for l in labels))
    return np.random.Generator(np.random.Philox(seq))
