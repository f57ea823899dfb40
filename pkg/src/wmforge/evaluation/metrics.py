"""Image quality scores and detection-rate statistics."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from wmforge.errors import InfeasibleError, ShapeError

MAX_PIXEL = 255.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * MAX_PIXEL) ** 2
SSIM_C2 = (0.03 * MAX_PIXEL) ** 2
DIRECTIONS = ("less", "greater")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB over all channels; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(MAX_PIXEL**2 / mse)


def _pad_to_window(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    ph, pw = -h % SSIM_WINDOW, -w % SSIM_WINDOW
    if ph == 0 and pw == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad, mode="edge")


def _windows(x: np.ndarray) -> np.ndarray:
    """Split the trailing (h, w) axes into non-overlapping 8x8 blocks, shape (..., nb, 64)."""
    x = _pad_to_window(x)
    *lead, h, w = x.shape
    n = SSIM_WINDOW
    blocks = x.reshape(*lead, h // n, n, w // n, n).swapaxes(-3, -2)
    return blocks.reshape(*lead, (h // n) * (w // n), n * n)


def ssim_map(a, b) -> np.ndarray:
    """Per-window SSIM, shape (channels, windows) for a (c, h, w) pair."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    wa, wb = _windows(a), _windows(b)
    mu_a, mu_b = wa.mean(axis=-1), wb.mean(axis=-1)
    var_a, var_b = wa.var(axis=-1), wb.var(axis=-1)
    cov = ((wa - mu_a[..., None]) * (wb - mu_b[..., None])).mean(axis=-1)
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 non-overlapping windows and channels (edge-padded)."""
    return float(np.mean(ssim_map(a, b)))


def _null_values(null, n: int | None) -> np.ndarray:
    if callable(null):
        if n is None:
            raise ValueError("n is required when sampling the null")
        vals = np.asarray(null(n), dtype=np.float64)
    else:
        vals = np.asarray(null, dtype=np.float64)
        if n is not None:
            vals = vals[:n]
    return vals.ravel()


def calibrate(
    null: np.ndarray | Callable[[int], np.ndarray],
    fpr: float,
    direction: str = "less",
    n: int | None = None,
) -> float:
    """Empirical threshold from ``n`` null statistics.

    ``direction="less"`` means small statistics flag a watermark (Tree-Ring
    distance): the threshold is the ``floor(fpr * n)``-th smallest null
    value and detection is ``stat <= threshold``. ``"greater"`` mirrors this
    with the largest values.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    vals = _null_values(null, n)
    size = vals.size
    if size < 100:
        raise ValueError(f"calibration needs at least 100 null draws, got {size}")
    if not 0.0 < fpr < 1.0:
        raise ValueError("fpr must lie in (0, 1)")
    rank = int(np.floor(fpr * size + 1e-9))
    if rank < 1:
        raise InfeasibleError(f"fpr={fpr:g} is below 1/n = {1 / size:g}")
    ordered = np.sort(vals)
    return float(ordered[rank - 1] if direction == "less" else ordered[size - rank])


def passes(stats, threshold: float, direction: str = "less", strict: bool = False) -> np.ndarray:
    """Boolean detections for ``stats`` against ``threshold``."""
    s = np.asarray(stats, dtype=np.float64)
    if direction == "less":
        return s < threshold if strict else s <= threshold
    if direction == "greater":
        return s > threshold if strict else s >= threshold
    raise ValueError(f"direction must be one of {DIRECTIONS}")


def tpr_at_fpr(stats: Sequence[float], threshold: float, direction: str = "less", strict: bool = False) -> float:
    """Fraction of watermarked statistics that pass a fixed-FPR threshold."""
    s = np.asarray(stats, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no statistics given")
    return float(np.mean(passes(s, threshold, direction, strict)))
