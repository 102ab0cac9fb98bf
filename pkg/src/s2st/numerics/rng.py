"""Deterministic named random streams.

Every stochastic consumer (init, dropout, masking, batch order, ...) pulls
from its own stream, keyed by a string name hashed into the seed material.
Streams are insensitive to the order other streams are created or used, so
adding a new consumer never perturbs existing draws.  Stateless per-step
streams (seed, step) let a resumed training run replay the exact draws of
the run it resumes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for (seed, name, indices); same arguments, same draws."""
    return np.random.default_rng(np.random.SeedSequence([seed, _name_key(name), *indices]))


class Rng:
    """Convenience wrapper holding a base seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str, *indices: int) -> np.random.Generator:
        return stream(self.seed, name, *indices)
