"""Labeled random streams derived from one master seed.

Each consumer asks for its own stream by label, so adding a new consumer
(or a new command option) never shifts the draws seen by existing ones.
"""

import zlib

import numpy as np


def stream(seed, *labels):
    """Independent ``Generator`` for ``(seed, *labels)``; labels may be str or int."""
    key = [int(seed) % (2**63)]
    for label in labels:
        if isinstance(label, str):
            key.append(zlib.crc32(label.encode("utf-8")))
        else:
            key.append(int(label) % (2**63))
    return np.random.default_rng(np.random.SeedSequence(key))
