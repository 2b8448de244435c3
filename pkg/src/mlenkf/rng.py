"""Keyed random streams for reproducible coupled sampling.

Every random draw in the library is tied to an :class:`RngKey`.  Distinct
key tuples give statistically independent streams and identical tuples
give identical streams, so coupling within a coarse/fine pair (same key)
and independence across particles, levels, steps and realizations
(different keys) is structural rather than an accident of call order.

Streams are consumed sequentially and numpy fills arrays in C order, so
two consumers of the same key that read different amounts see the same
draw prefix.  This is what lets a coarse solve share the first N_{l-1}
draws of its fine partner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["PURPOSES", "RngKey"]

PURPOSES = ("forward", "obs-perturbation", "truth", "data-noise")


@dataclass(frozen=True)
class RngKey:
    """Identifier of one pseudorandom stream.

    Parameters
    ----------
    seed : int
        Master seed of the experiment, up to 64 bits.
    purpose : str
        One of :data:`PURPOSES`; separates forward noise, observation
        perturbations, the synthetic truth path and the data noise.
    realization, level, particle, step : int
        Coordinates of the consumer.  Unused coordinates stay 0.
    """

    seed: int
    purpose: str
    realization: int = 0
    level: int = 0
    particle: int = 0
    step: int = 0

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose!r}")
        for name in ("seed", "realization", "level", "particle", "step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def generator(self):
        """Fresh ``numpy.random.Generator`` for this key."""
        seq = np.random.SeedSequence(
            entropy=self.seed,
            spawn_key=(
                PURPOSES.index(self.purpose),
                self.realization,
                self.level,
                self.particle,
                self.step,
            ),
        )
        return np.random.default_rng(seq)
