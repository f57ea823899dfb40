"""Domain-separated generators for seeded model structure.

Structural objects (codec matrices, mixture means, ring keys) draw from
``SeedSequence([seed, tag])`` so that a user seed reused for latent noise
never replays the same stream.
"""

from __future__ import annotations

import numpy as np

CODEC = 0xC0DEC
MIXTURE = 0x313C7
TREE_RING = 0x7B1A6


def structural_rng(seed: int, domain: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), domain]))
