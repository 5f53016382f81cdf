"""Deterministic random-number plumbing.

All stochastic behavior in the package flows through counter-based Philox
generators keyed by explicit 64-bit seeds, so results are reproducible at the
bit level across platforms and across serial/parallel execution.  Per-item
seeds are derived statelessly with a splitmix64 hash, never with Python's
``hash`` (which is salted per process).
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """The splitmix64 finalizer; a high-quality stateless 64-bit mix."""
    x = int(x) & _MASK64
    z = (x + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(base_seed: int, index: int) -> int:
    """Stateless per-index seed: identical whether items are visited serially
    or in parallel."""
    return splitmix64((int(base_seed) & _MASK64) ^ splitmix64(index))


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for a (seed, stream) pair."""
    key = np.array([int(seed) & _MASK64, int(stream) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
