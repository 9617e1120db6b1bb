"""Seeded hash embeddings: deterministic token -> vector, no model downloads.

Vectors are derived from an xorshift64* stream keyed by (name, seed), so they
are stable across processes, platforms and numpy versions.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def _fnv1a(name: str, seed: int) -> int:
    h = (14695981039346656037 ^ (seed & _MASK64)) & _MASK64
    for byte in name.encode("utf-8"):
        h ^= byte
        h = (h * 1099511628211) & _MASK64
    return h or 0x9E3779B97F4A7C15


def _xorshift64star(state: int) -> tuple[int, int]:
    state &= _MASK64
    state ^= (state >> 12)
    state ^= (state << 25) & _MASK64
    state ^= (state >> 27)
    state &= _MASK64
    return state, (state * 0x2545F4914F6CDD1D) & _MASK64


def hash_vector(name: str, dim: int, seed: int) -> np.ndarray:
    """Deterministic pseudo-random unit-scale vector for a string key.

    Components are uniform in [-1, 1), scaled by 1/sqrt(dim) so the vector has
    unit expected norm.
    """
    state = _fnv1a(name, seed)
    out = np.empty(dim, dtype=np.float64)
    for i in range(dim):
        state, word = _xorshift64star(state)
        # top 53 bits -> float in [0, 1)
        out[i] = (word >> 11) * (1.0 / (1 << 53)) * 2.0 - 1.0
    return out / np.sqrt(dim)
