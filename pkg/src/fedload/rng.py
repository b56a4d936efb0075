"""Named, seed-derived random streams.

Every consumer of randomness asks for a stream by name ("server", "xi",
"client:3", ...). Streams are independent of one another and of the order in
which they are requested, so switching protocols or reordering clients does
not shift anyone else's draws.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))
