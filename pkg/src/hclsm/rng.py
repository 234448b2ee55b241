"""Counter-based seed splitting.

Every random draw is keyed by ``(root seed, purpose, counters...)`` so the
stream a subsystem sees does not depend on how many draws other subsystems
made before it.
"""

from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("data", "init", "batch", "slots", "gumbel", "eval", "spotcheck")


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def split(root: int, purpose: str, *counters: int) -> np.random.Generator:
    seq = np.random.SeedSequence([int(root) & 0xFFFFFFFF, purpose_key(purpose), *(int(c) for c in counters)])
    return np.random.default_rng(seq)
