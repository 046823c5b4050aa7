"""
Seeded weight initialization.

Every random tensor in the project comes from numpy's PCG64 bit generator
seeded with the user seed, drawing only ``Generator.random`` (uniform doubles
built directly from the bit stream), so the same seed yields the same weights
on every platform.
"""

import math

import numpy as np


def seeded_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """U(−a, a) with a = sqrt(6 / (fan_in + fan_out)), rounded to float32."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (rng.random(shape) * (2.0 * bound) - bound).astype(np.float32)
