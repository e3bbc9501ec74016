"""Per-purpose random streams split from one root seed."""

import numpy as np

PURPOSES = ("data", "init", "augment", "order")


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for data, init, augment and order.

    Changing how one purpose consumes randomness leaves the others untouched.
    """
    children = np.random.SeedSequence(seed).spawn(len(PURPOSES))
    return {name: np.random.default_rng(child) for name, child in zip(PURPOSES, children)}
