"""Tree-Ring: a concentric-ring key written into the centred 2-D FFT of one
latent channel, detected by the masked L1 distance to that key."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


from wmforge.errors import ConfigError, ShapeError
from wmforge.seeding import TREE_RING, structural_rng


def _fft(plane: np.ndarray) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(plane, axes=(-2, -1)), axes=(-2, -1))


def _ifft(spec: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1)), axes=(-2, -1))


def ring_index(h: int, w: int) -> np.ndarray:
    """Integer ring number of every centred-FFT bin; the DC bin joins ring 1."""
    yy, xx = np.mgrid[:h, :w]
    dist = np.hypot(yy - h // 2, xx - w // 2)
    return np.maximum(np.ceil(dist - 1e-9).astype(int), 1)


def mirror(a: np.ndarray) -> np.ndarray:
    """``a[-k]`` in centred coordinates (for even sizes the Nyquist row maps to itself)."""
    h, w = a.shape[-2:]
    yi = (-(np.arange(h) - h // 2)) % h
    xi = (-(np.arange(w) - w // 2)) % w
    yi = (yi + h // 2) % h
    xi = (xi + w // 2) % w
    return a[..., yi[:, None], xi[None, :]]


@dataclass(frozen=True, eq=False)
class TrKey:
    """Ring key over an ``h x w`` latent plane.

    Ring values come from the centred FFT of seeded Gaussian noise,
    averaged over each integer-radius annulus and made conjugate-symmetric
    so the watermarked latent stays real.
    """

    radius: int
    channel: int
    seed: int
    plane: tuple[int, int]
    mask: np.ndarray = field(init=False, repr=False)
    pattern: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w = (int(s) for s in self.plane)
        object.__setattr__(self, "plane", (h, w))
        if self.radius < 0:
            raise ConfigError("radius must be non-negative")
        if self.radius > min(h, w) // 2 - 1:
            raise ConfigError(f"radius {self.radius} does not fit a {h}x{w} plane")
        rings = ring_index(h, w)
        mask = rings <= self.radius
        noise = structural_rng(self.seed, TREE_RING).standard_normal((h, w))
        spec = _fft(noise)
        pattern = np.zeros((h, w), dtype=np.complex128)
        for r in range(1, self.radius + 1):
            sel = rings == r
            pattern[sel] = spec[sel].mean()
        pattern = 0.5 * (pattern + np.conj(mirror(pattern)))
        mask.setflags(write=False)
        pattern.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "pattern", pattern)

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def check_latent(self, shape: Sequence[int]) -> None:
        c, h, w = shape[-3:]
        if (h, w) != self.plane or not 0 <= self.channel < c:
            raise ShapeError(f"latent shape {tuple(shape)} incompatible with key plane {self.plane}, channel {self.channel}")

    def to_json(self) -> dict:
        return {"radius": self.radius, "channel": self.channel, "seed": self.seed}

    @classmethod
    def from_json(cls, doc: dict, plane: tuple[int, int]) -> "TrKey":
        return cls(int(doc["radius"]), int(doc.get("channel", 0)), int(doc["seed"]), plane)


@dataclass(frozen=True)
class TrDetectionReport:
    distance: float
    p_value: float | None = None
    threshold: float | None = None
    detected: bool | None = None

    def to_json(self) -> dict:
        return {
            "scheme": "tr",
            "distance": self.distance,
            "p_value": self.p_value,
            "threshold": self.threshold,
            "detected": self.detected,
        }


def tr_inject(key: TrKey, z: np.ndarray) -> np.ndarray:
    """Overwrite the masked FFT bins of ``key.channel`` with the key pattern."""
    z = np.array(z, dtype=np.float64, copy=True)
    key.check_latent(z.shape)
    if key.size == 0:
        return z
    spec = _fft(z[..., key.channel, :, :])
    spec[..., key.mask] = key.pattern[key.mask]
    z[..., key.channel, :, :] = _ifft(spec).real
    return z


def tr_embed(key: TrKey, rng_seed: int, shape: Sequence[int]) -> np.ndarray:
    """Gaussian initial latent carrying the ring key."""
    z = np.random.default_rng(rng_seed).standard_normal(tuple(shape))
    return tr_inject(key, z)


def tr_distance(key: TrKey, z_hat: np.ndarray, metric: str = "l1") -> np.ndarray | float:
    """Masked distance between the latent's spectrum and the key; batched."""
    z = np.asarray(z_hat, dtype=np.float64)
    key.check_latent(z.shape)
    diff = _fft(z[..., key.channel, :, :])[..., key.mask] - key.pattern[key.mask]
    if metric == "l1":
        d = np.abs(diff).sum(axis=-1)
    elif metric == "l2":
        d = np.sqrt((np.abs(diff) ** 2).sum(axis=-1))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(d) if np.ndim(d) == 0 else d


def tr_pvalue(distance: float | np.ndarray, null_table: np.ndarray) -> float | np.ndarray:
    """Empirical p-value ``(1 + #{null <= d}) / (1 + n)`` against a sorted null table."""
    null = np.asarray(null_table, dtype=np.float64)
    if null.size == 0:
        raise ValueError("null table is empty")
    p = (1.0 + np.searchsorted(null, distance, side="right")) / (1.0 + null.size)
    return float(p) if np.ndim(p) == 0 else p


def tr_detect(key: TrKey, z_hat: np.ndarray, threshold: float, null_table: np.ndarray | None = None) -> TrDetectionReport:
    d = float(tr_distance(key, z_hat))
    p = tr_pvalue(d, null_table) if null_table is not None else None
    return TrDetectionReport(d, p, threshold, d <= threshold)
