# rng.py
import hashlib

import numpy as np


def purpose_tag(purpose: str) -> int:
    # Stable across interpreter runs, unlike hash().
    digest = hashlib.sha256(purpose.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, purpose: str) -> np.random.Generator:
    """
    Counter-based generator for one named stream.

    The stream key mixes the seed with a hash of `purpose`, so e.g. the group
    draws and the feature noise of one dataset never share a stream and
    generation does not depend on the order in which streams are consumed.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, purpose_tag(purpose)])
    return np.random.Generator(np.random.Philox(seq))
