"""Counter-based, splittable randomness.

Every random stream is keyed by ``(seed, tag, ordinal)`` and backed by
numpy's Philox generator, so a draw never depends on which other streams
were consumed first or on which thread consumed them.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(seed: int, tag: str, ordinal: int) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16, person=b"patchvote-rng")
    h.update((seed & _MASK64).to_bytes(8, "little"))
    h.update(tag.encode("utf-8"))
    h.update(b"\x00")
    h.update((ordinal & _MASK64).to_bytes(8, "little"))
    digest = h.digest()
    return np.frombuffer(digest, dtype="<u8").astype(np.uint64)


class Rng:
    """Root of a family of independent streams."""

    __slots__ = ("seed",)

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64

    def stream(self, tag: str, ordinal: int = 0) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=_key(self.seed, tag, int(ordinal))))

    def child(self, tag: str, ordinal: int = 0) -> "Rng":
        """A new root whose streams are disjoint from this one's."""
        word = self.stream("child/" + tag, ordinal).integers(0, 1 << 63, dtype=np.int64)
        return Rng(int(word))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"
