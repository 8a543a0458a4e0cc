"""Seeded, splittable random source used by every stochastic operation.

Built on numpy's Philox bit generator: counter-based, so streams derived
from (seed, path) pairs are independent and bit-for-bit reproducible on
every platform. ``split`` derives a child stream from a label without
consuming draws from the parent, which keeps multi-stage pipelines
replayable even when individual stages change how much randomness they
consume.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


class RngState:
    """Deterministic random stream identified by a seed and a split path."""

    algorithm = "philox4x64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed > 0xFFFFFFFFFFFFFFFF:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = Generator(Philox(seed=SeedSequence(self.seed, spawn_key=self.path)))

    def split(self, *labels: int) -> "RngState":
        """Return an independent child stream; the parent is not advanced."""
        return RngState(self.seed, self.path + labels)

    @property
    def generator(self) -> Generator:
        """The underlying numpy Generator (advances in place when drawn)."""
        return self._gen

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = True,
               p: np.ndarray | None = None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def state_dict(self) -> dict:
        """JSON-ready snapshot: seed, path, and the mid-stream Philox state."""
        st = self._gen.bit_generator.state
        return {
            "algorithm": self.algorithm,
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(x) for x in st["state"]["counter"]],
            "key": [int(x) for x in st["state"]["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "RngState":
        """Rebuild a stream exactly where ``state_dict`` captured it."""
        rng = cls(d["seed"], tuple(d["path"]))
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(d["counter"], dtype=np.uint64),
                "key": np.array(d["key"], dtype=np.uint64),
            },
            "buffer": np.array(d["buffer"], dtype=np.uint64),
            "buffer_pos": d["buffer_pos"],
            "has_uint32": d["has_uint32"],
            "uinteger": d["uinteger"],
        }
        return rng

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, path={self.path})"
