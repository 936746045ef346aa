"""Deterministic random-number streams.

Every stochastic routine in the package takes an explicit ``RngState``.  A
stream is fully determined by its 64-bit seed plus the sequence of derivation
keys used to spawn it, so reruns with the same seed reproduce every draw
bit-for-bit and independent work items (anchors, experiment arms) can own
non-overlapping child streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngState"]


def _key_to_int(key: int | str) -> int:
    if isinstance(key, int):
        if key < 0:
            raise ValueError(f"derivation key must be nonnegative, got {key}")
        return key
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class RngState:
    """A seeded PCG64 stream with deterministic child derivation.

    Parameters
    ----------
    seed:
        Master 64-bit seed.
    path:
        Derivation keys applied on top of the seed; normally produced by
        :meth:`derive` rather than passed directly.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *keys: int | str) -> "RngState":
        """Child stream for an independent work item.

        Children with distinct key paths never share draws with each other or
        with the parent, regardless of how much any of them has consumed.
        """
        return RngState(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def normal(self, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64)

    def uniform(self, low: float, high: float, shape: tuple[int, ...] | int = ()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def randint(self, low: int, high_inclusive: int, shape: tuple[int, ...] | int | None = None) -> np.ndarray | int:
        """Uniform integers on the closed interval [low, high_inclusive]."""
        out = self._gen.integers(low, high_inclusive + 1, size=shape)
        return out if shape is not None else int(out)

    def choice(self, n: int) -> int:
        return int(self._gen.integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"
