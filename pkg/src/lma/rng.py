"""Named, seeded random streams.

A stream is identified by ``(name, seed)``.  Child streams derive their
own seed material from the parent name plus a path of labels, so that
independent consumers (coin flips, latents, crop parameters) never share
draws and can be replayed in isolation.
"""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


class RngStream:
    """PCG64 generator keyed by a name and a 64-bit seed.

    Attribute access falls through to the wrapped ``numpy.random.Generator``
    so ``stream.normal(...)``, ``stream.integers(...)`` etc. work directly.
    """

    def __init__(self, name: str, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 bits, got {seed}")
        self.name = name
        self.seed = int(seed)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_name_key(name))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *parts: Any) -> "RngStream":
        """Independent substream labelled ``name/part1/part2/...``."""
        label = "/".join(str(p) for p in parts)
        return RngStream(f"{self.name}/{label}", self.seed)

    @property
    def state(self) -> dict:
        return self.generator.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self.generator.bit_generator.state = value

    def torch_seed(self) -> int:
        """Draw a seed suitable for ``torch.Generator.manual_seed``."""
        return int(self.generator.integers(0, 2**63 - 1))

    def __getattr__(self, item: str):
        # only reached for attributes not defined on the stream itself
        if item == "generator":
            raise AttributeError(item)
        return getattr(self.generator, item)

    def __repr__(self) -> str:
        return f"RngStream(name={self.name!r}, seed={self.seed})"
