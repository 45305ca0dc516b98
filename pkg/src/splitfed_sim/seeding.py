"""Seed derivation: every random draw comes from (master, purpose, cycle, node)."""
from __future__ import annotations

import zlib

import numpy as np


def derive_seed(master: int, purpose: str, cycle: int = 0, node: int = 0) -> int:
    entropy = [int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(purpose.encode()), int(cycle), int(node)]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def rng_for(master: int, purpose: str, cycle: int = 0, node: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, purpose, cycle, node))
