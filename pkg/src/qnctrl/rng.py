"""Counter-based random streams for reproducible parallel simulation.

Every actor owns a Philox stream keyed by (master seed, actor index,
iteration index), so results do not depend on scheduling or worker count.
Simulation code consumes uniforms one at a time through
:class:`UniformStream`; the compiled and the pure-Python steppers share the
same buffer and position, which keeps their trajectories bitwise identical.
"""

from __future__ import annotations

import numpy as np


def philox_generator(master_seed: int, *key: int) -> np.random.Generator:
    """Generator on an independent Philox stream keyed by integers."""
    seq = np.random.SeedSequence((int(master_seed),) + tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seed=seq))


class UniformStream:
    """Buffered stream of uniform(0,1) doubles from one generator."""

    __slots__ = ("generator", "buffer", "pos", "block")

    def __init__(self, generator: np.random.Generator, block: int = 8192):
        self.generator = generator
        self.block = int(block)
        self.buffer = generator.random(self.block)
        self.pos = 0

    def refill(self) -> np.ndarray:
        self.buffer = self.generator.random(self.block)
        self.pos = 0
        return self.buffer

    def next(self) -> float:
        if self.pos >= self.block:
            self.refill()
        u = self.buffer[self.pos]
        self.pos += 1
        return float(u)


def stream_for(master_seed: int, actor: int = 0, iteration: int = 0) -> UniformStream:
    """Per-actor uniform stream; distinct (actor, iteration) keys never collide."""
    return UniformStream(philox_generator(master_seed, actor, iteration))
