"""Linear orthogonal latent <-> 8-bit image codec.

Plays the part of a VAE encoder/decoder pair. The map is an orthogonal
matrix drawn from a seeded QR factorisation, so everything except the final
rounding to 8 bits is exactly invertible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


from wmforge.errors import ConfigError, ShapeError
from wmforge.seeding import CODEC, structural_rng


def haar_orthogonal(seed: int, d: int) -> np.ndarray:
    """Haar-distributed ``d x d`` orthogonal matrix from a seeded Gaussian."""
    rng = structural_rng(seed, CODEC)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))[None, :]


def polar_factor(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    return u @ vt


@dataclass(frozen=True, eq=False)
class LinearCodec:
    """Orthogonal codec ``pixels = round(out_scale * Q z + out_bias)``.

    ``mismatch`` blends Q toward an independent orthogonal matrix (drawn
    from ``mismatch_seed``) and re-orthogonalises, so two codecs sharing a
    seed but differing in ``mismatch`` behave like related but distinct
    autoencoders. ``mismatch = 1`` yields the independent matrix itself.
    """

    shape: tuple[int, int, int]
    seed: int = 0
    out_scale: float = 24.0
    out_bias: float = 128.0
    bit_depth: int = 8
    mismatch: float = 0.0
    mismatch_seed: int | None = None
    Q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.bit_depth != 8:
            raise ConfigError("only 8-bit codecs are supported")
        if self.out_scale <= 0:
            raise ConfigError("out_scale must be positive")
        if not 0.0 <= self.mismatch <= 1.0:
            raise ConfigError("mismatch must lie in [0, 1]")
        d = self.dim
        q = haar_orthogonal(self.seed, d)
        if self.mismatch > 0:
            alt_seed = self.mismatch_seed if self.mismatch_seed is not None else self.seed + 0x9E3779B9
            alt = haar_orthogonal(alt_seed, d)
            q = alt if self.mismatch == 1.0 else polar_factor((1.0 - self.mismatch) * q + self.mismatch * alt)
        q.setflags(write=False)
        object.__setattr__(self, "Q", q)

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    def _flat(self, a: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
        if a.shape[-3:] != self.shape:
            raise ShapeError(f"array shape {a.shape} does not end with codec shape {self.shape}")
        return a.reshape(-1, self.dim), a.shape[:-3]

    def decode_continuous(self, z: np.ndarray) -> np.ndarray:
        """Pixel-space values before rounding and clamping."""
        flat, lead = self._flat(np.asarray(z, dtype=np.float64))
        return (self.out_scale * (flat @ self.Q.T) + self.out_bias).reshape(*lead, *self.shape)

    def decode(self, z: np.ndarray) -> np.ndarray:
        x = np.rint(self.decode_continuous(z))
        return np.clip(x, 0, self.max_value).astype(np.uint8)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Latent for an image; float inputs are accepted for the unquantised path."""
        flat, lead = self._flat(np.asarray(x, dtype=np.float64))
        return (((flat - self.out_bias) / self.out_scale) @ self.Q).reshape(*lead, *self.shape)


def decode(codec: LinearCodec, z: np.ndarray) -> np.ndarray:
    return codec.decode(z)


def encode(codec: LinearCodec, x: np.ndarray) -> np.ndarray:
    return codec.encode(x)
