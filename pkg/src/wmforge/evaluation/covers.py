"""Cover image sets: seeded procedural covers or a directory of PGM/PPM files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from wmforge.codec import LinearCodec
from wmforge.errors import ConfigError
from wmforge.io import load_image
from wmforge.presets import cover_mixture

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".lmf1")


def procedural_covers(codec: LinearCodec, count: int, seed: int) -> np.ndarray:
    """``count`` images decoded from the cover mixture, shape (count, c, h, w)."""
    if count < 0:
        raise ConfigError("cover count must be non-negative")
    mix = cover_mixture(codec.shape)
    rng = np.random.default_rng(seed)
    return codec.decode(mix.sample(rng, count))


def directory_covers(path: str | Path, shape: tuple[int, int, int]) -> np.ndarray:
    """All images in ``path`` (sorted by name); each must match ``shape``."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"cover directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = [load_image(p) for p in files]
    for p, x in zip(files, images):
        if x.shape != tuple(shape):
            raise ConfigError(f"cover {p.name} has shape {x.shape}, model expects {tuple(shape)}")
    if not images:
        return np.zeros((0, *shape), dtype=np.uint8)
    return np.stack(images)
