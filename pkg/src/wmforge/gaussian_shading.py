"""Gaussian Shading: sign-coded, stream-encrypted messages in the initial latent.

With an encoding window of one bit per latent value, each encrypted bit picks
the half of the standard normal a latent value is drawn from. Because the
encrypted stream is uniform, the latent stays exactly N(0, I).
"""

from __future__ import annotations

import secrets
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb
from typing import Sequence

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from scipy.special import ndtri

from wmforge.errors import InfeasibleError, ShapeError

DEFAULT_FPR = 1e-3


def keystream_bits(cipher_key: bytes, nonce: bytes, n_bits: int) -> np.ndarray:
    """First ``n_bits`` of the ChaCha20 keystream for (key, nonce), counter 0."""
    cipher = Cipher(algorithms.ChaCha20(cipher_key, b"\x00" * 4 + nonce), mode=None)
    stream = cipher.encryptor().update(b"\x00" * ((n_bits + 7) // 8))
    return np.unpackbits(np.frombuffer(stream, dtype=np.uint8))[:n_bits]


@dataclass(frozen=True, eq=False)
class GsKey:
    cipher_key: bytes
    nonce: bytes
    message: np.ndarray
    rho: int
    user_id: int = 0
    l: int = 1

    def __post_init__(self):
        if len(self.cipher_key) != 32:
            raise ValueError("cipher_key must be 256 bits")
        if len(self.nonce) != 12:
            raise ValueError("nonce must be 96 bits")
        if self.l != 1:
            raise ValueError("only the one-bit encoding window is supported")
        msg = np.asarray(self.message, dtype=np.uint8).ravel()
        if msg.size == 0 or np.any(msg > 1):
            raise ValueError("message must be a non-empty bit array")
        msg.setflags(write=False)
        object.__setattr__(self, "message", msg)

    @property
    def k(self) -> int:
        return int(self.message.size)

    @property
    def n_bits(self) -> int:
        return self.k * self.rho

    def keystream(self) -> np.ndarray:
        return _cached_stream(self.cipher_key, self.nonce, self.n_bits)

    def check_latent(self, shape: Sequence[int]) -> None:
        d = int(np.prod(shape[-3:]))
        if d != self.n_bits:
            raise ShapeError(f"k*rho = {self.k}*{self.rho} = {self.n_bits} does not tile a latent of size {d}")

    @classmethod
    def random(cls, rng: np.random.Generator, k: int, rho: int, user_id: int = 0) -> "GsKey":
        raw = rng.bytes(44)
        return cls(raw[:32], raw[32:], rng.integers(0, 2, size=k, dtype=np.uint8), rho, user_id)

    @classmethod
    def generate(cls, k: int, rho: int, user_id: int = 0) -> "GsKey":
        """Fresh key from the OS entropy source."""
        msg = np.unpackbits(np.frombuffer(secrets.token_bytes((k + 7) // 8), dtype=np.uint8))[:k]
        return cls(secrets.token_bytes(32), secrets.token_bytes(12), msg, rho, user_id)

    def to_json(self) -> dict:
        return {
            "cipher_key_hex": self.cipher_key.hex(),
            "nonce_hex": self.nonce.hex(),
            "message_hex": np.packbits(self.message).tobytes().hex(),
            "k": self.k,
            "rho": self.rho,
            "user_id": self.user_id,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GsKey":
        k = int(doc["k"])
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(doc["message_hex"]), dtype=np.uint8))
        if bits.size < k:
            raise ValueError("message_hex is shorter than k bits")
        return cls(
            bytes.fromhex(doc["cipher_key_hex"]),
            bytes.fromhex(doc["nonce_hex"]),
            bits[:k],
            int(doc["rho"]),
            int(doc.get("user_id", 0)),
        )


@lru_cache(maxsize=4096)
def _cached_stream(cipher_key: bytes, nonce: bytes, n_bits: int) -> np.ndarray:
    bits = keystream_bits(cipher_key, nonce, n_bits)
    bits.setflags(write=False)
    return bits


@dataclass(frozen=True)
class GsDetectionReport:
    bit_accuracy: float
    threshold: float | None = None
    detected: bool | None = None
    attributed_user: int | None = None

    def to_json(self) -> dict:
        return {
            "scheme": "gs",
            "bit_accuracy": self.bit_accuracy,
            "threshold": self.threshold,
            "detected": self.detected,
            "attributed_user": self.attributed_user,
        }


def gs_embed(key: GsKey, rng_seed: int, shape: Sequence[int]) -> np.ndarray:
    """Watermarked initial latent of the given (c, h, w) shape."""
    key.check_latent(shape)
    rng = np.random.default_rng(rng_seed)
    bits = np.repeat(key.message, key.rho) ^ key.keystream()
    u = (bits + rng.random(key.n_bits)) / 2.0
    u = np.clip(u, 1e-16, 1.0 - 1e-16)
    return ndtri(u).reshape(tuple(shape))


def decode_message(key: GsKey, z_hat: np.ndarray) -> np.ndarray:
    """Majority-vote message estimate, shape (..., k).

    Non-positive latent values read as bit 0. A tied vote takes the first
    copy of the group, which keeps each decoded bit exactly fair on
    unwatermarked input.
    """
    z = np.asarray(z_hat)
    key.check_latent(z.shape)
    flat = z.reshape(-1, key.n_bits)
    dec = (flat > 0).astype(np.uint8) ^ key.keystream()[None, :]
    groups = dec.reshape(-1, key.k, key.rho)
    votes = groups.sum(axis=2, dtype=np.int32) * 2
    out = np.where(votes > key.rho, 1, np.where(votes < key.rho, 0, groups[:, :, 0])).astype(np.uint8)
    return out.reshape(*z.shape[:-3], key.k)


def gs_bit_accuracy(key: GsKey, z_hat: np.ndarray) -> np.ndarray | float:
    """Fraction of message bits recovered; vectorised over leading batch axes."""
    acc = (decode_message(key, z_hat) == key.message).mean(axis=-1)
    return float(acc) if np.ndim(acc) == 0 else acc


def gs_recover(key: GsKey, z_hat: np.ndarray) -> GsDetectionReport:
    return GsDetectionReport(bit_accuracy=float(gs_bit_accuracy(key, z_hat)))


def gs_detect(key: GsKey, z_hat: np.ndarray, fpr: float = DEFAULT_FPR) -> GsDetectionReport:
    acc = float(gs_bit_accuracy(key, z_hat))
    tau = gs_threshold(key.k, fpr)
    return GsDetectionReport(acc, tau, acc > tau)


def binomial_upper_tail(k: int, m: int) -> Fraction:
    """Exact ``P(Binomial(k, 1/2) >= m)``."""
    if m <= 0:
        return Fraction(1)
    if m > k:
        return Fraction(0)
    return Fraction(sum(comb(k, j) for j in range(m, k + 1)), 2**k)


@lru_cache(maxsize=256)
def gs_threshold_count(k: int, fpr: float) -> int:
    """Smallest count ``m`` with ``P(Binomial(k, 1/2) > m) <= fpr``.

    Detection requires strictly more than ``m`` correct bits. ``m == k``
    would be unreachable, so that case is reported as infeasible.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie in (0, 1)")
    bound = Fraction(fpr)
    total = 2**k
    above = 0  # number of outcomes strictly greater than m
    for m in range(k, -1, -1):
        if Fraction(above, total) > bound:
            m += 1
            break
        above += comb(k, m)
    else:
        m = 0
    if m >= k:
        raise InfeasibleError(f"no threshold over {k} bits reaches fpr={fpr:g}; minimum tail is 2^-{k}")
    return m


def gs_threshold(k: int, fpr: float) -> float:
    """Bit-accuracy threshold ``m / k``; a latent is detected when its accuracy exceeds it."""
    return gs_threshold_count(k, fpr) / k


def gs_attribute(
    bit_accuracies: Sequence[float],
    k: int,
    fpr_total: float = DEFAULT_FPR,
    user_ids: Sequence[int] | None = None,
) -> int | None:
    """Attribute to the best-matching user if it clears the Bonferroni threshold.

    When ``fpr_total / N`` is below what ``k`` bits can resolve no user can
    pass, so nobody is attributed.
    """
    acc = np.asarray(bit_accuracies, dtype=np.float64)
    n = acc.size
    if n == 0:
        return None
    ids = np.arange(n) if user_ids is None else np.asarray(user_ids)
    try:
        tau = gs_threshold(k, fpr_total / n)
    except InfeasibleError:
        return None
    best = acc.max()
    if not best > tau:
        return None
    return int(ids[acc == best].min())


class UserRegistry:
    """Keys of N users with stacked keystreams for fast attribution."""

    def __init__(self, keys: Sequence[GsKey]):
        if not keys:
            raise ValueError("registry needs at least one key")
        k, rho = keys[0].k, keys[0].rho
        if any(key.k != k or key.rho != rho for key in keys):
            raise ValueError("all users must share k and rho")
        self.keys = list(keys)
        self.k, self.rho = k, rho
        self.user_ids = np.array([key.user_id for key in keys])
        self.streams = np.stack([key.keystream() for key in keys])
        self.messages = np.stack([key.message for key in keys])

    @classmethod
    def random(cls, rng: np.random.Generator, n_users: int, k: int, rho: int) -> "UserRegistry":
        return cls([GsKey.random(rng, k, rho, user_id=i) for i in range(n_users)])

    def __len__(self) -> int:
        return len(self.keys)

    def bit_accuracies(self, z_hat: np.ndarray) -> np.ndarray:
        """Bit accuracy of one latent under every user's key, shape (N,)."""
        signs = (np.asarray(z_hat).reshape(-1) > 0).astype(np.uint8)
        if signs.size != self.k * self.rho:
            raise ShapeError("latent size does not match the registry keys")
        dec = (signs[None, :] ^ self.streams).reshape(len(self), self.k, self.rho)
        votes = dec.sum(axis=2, dtype=np.int32) * 2
        bits = np.where(votes > self.rho, 1, np.where(votes < self.rho, 0, dec[:, :, 0]))
        return (bits == self.messages).mean(axis=1)

    def attribute(self, z_hat: np.ndarray, fpr_total: float = DEFAULT_FPR) -> int | None:
        return gs_attribute(self.bit_accuracies(z_hat), self.k, fpr_total, self.user_ids)
