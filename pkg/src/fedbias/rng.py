"""Deterministic RNG streams.

Every source of randomness in an experiment is drawn from a stream derived
from the master seed plus a purpose tag and integer coordinates (round,
client id, ...). Streams are independent, so e.g. drawing the malicious
coin never perturbs the shuffle order of local training.
"""

import zlib

import numpy as np


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    """Generator for (seed, purpose, *keys), stable across runs and platforms."""
    entropy = (int(seed), _tag(purpose)) + tuple(int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def substream_seed(seed: int, purpose: str, *keys: int) -> int:
    """Plain integer seed for APIs that take one instead of a Generator."""
    return int(stream(seed, purpose, *keys).integers(0, 2**63 - 1))
