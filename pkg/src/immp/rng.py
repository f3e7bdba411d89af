"""Reproducible random streams.

Streams are Philox generators keyed by (seed, replica, tag) through
numpy's SeedSequence spawn keys, so distinct keys give independent
streams and identical keys give identical sequences on every run.
"""
import hashlib

import numpy as np


def _tag_key(tag) -> int:
    if isinstance(tag, int):
        return tag
    digest = hashlib.sha256(str(tag).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(seed: int, replica: int = 0, stream_tag="main") -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replica), _tag_key(stream_tag)))
    return np.random.Generator(np.random.Philox(ss))
