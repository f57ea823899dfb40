"""Independent reference computations used by the tests.

Each oracle takes a different route from the code under test: extended
precision term-by-term sums, closed-form affine compositions, brute-force
enumeration, or explicit loops.
"""

from __future__ import annotations

from fractions import Fraction
from math import comb

import mpmath
import numpy as np


def alpha_bar_product(T: int, t: int, beta_start=1e-4, beta_end=2e-2) -> mpmath.mpf:
    """prod_{i<=t} (1 - beta_i) in 50-digit arithmetic."""
    with mpmath.workdps(50):
        b0, b1 = mpmath.mpf(beta_start), mpmath.mpf(beta_end)
        out = mpmath.mpf(1)
        for i in range(t):
            beta = b0 + (b1 - b0) * i / (T - 1)
            out *= 1 - beta
        return out


def mixture_eps_mp(weights, means, cov, ab: float, z: np.ndarray, dps: int = 40) -> np.ndarray:
    """Predicted noise from explicit densities and their gradients.

    p(z) = sum_i w_i N(z; a mu_i, v_i I), grad p = sum_i w_i N_i (a mu_i - z) / v_i,
    eps = -sqrt(1 - ab) grad p / p.
    """
    with mpmath.workdps(dps):
        ab = mpmath.mpf(ab)
        a = mpmath.sqrt(ab)
        zz = [mpmath.mpf(float(x)) for x in np.ravel(z)]
        d = len(zz)
        p = mpmath.mpf(0)
        grad = [mpmath.mpf(0)] * d
        for w, mu, s2 in zip(weights, means, cov):
            v = ab * mpmath.mpf(float(s2)) + 1 - ab
            mu = [mpmath.mpf(float(m)) for m in np.ravel(mu)]
            sq = sum((zi - a * mi) ** 2 for zi, mi in zip(zz, mu))
            dens = mpmath.mpf(float(w)) * mpmath.exp(-sq / (2 * v)) / (2 * mpmath.pi * v) ** (mpmath.mpf(d) / 2)
            p += dens
            grad = [g + dens * (a * mi - zi) / v for g, zi, mi in zip(grad, zz, mu)]
        c = mpmath.sqrt(1 - ab)
        return np.array([float(-c * g / p) for g in grad]).reshape(np.shape(z))


def single_gaussian_sample_map(schedule, step_indices, sigma2: float):
    """Scalars (P, R) with ddim_sample(z_T) = P z_T + R mu for one N(mu, sigma2 I) component.

    Each step t -> s is z_s = alpha z_t + beta mu with eps = c_t (z - a_t mu) / v_t.
    """
    P, R = mpmath.mpf(1), mpmath.mpf(0)
    ab = [mpmath.mpf(float(x)) for x in schedule.alpha_bar]
    for k in range(len(step_indices) - 1, 0, -1):
        t, s = int(step_indices[k]), int(step_indices[k - 1])
        at, as_ = mpmath.sqrt(ab[t]), mpmath.sqrt(ab[s])
        ct, cs = mpmath.sqrt(1 - ab[t]), mpmath.sqrt(1 - ab[s])
        v = ab[t] * sigma2 + 1 - ab[t]
        # eps = (ct / v) z - (ct at / v) mu ; x0 = (z - ct eps) / at
        e_z, e_mu = ct / v, -ct * at / v
        x_z, x_mu = (1 - ct * e_z) / at, -ct * e_mu / at
        alpha = as_ * x_z + cs * e_z
        beta = as_ * x_mu + cs * e_mu
        P, R = alpha * P, alpha * R + beta
    return float(P), float(R)


def single_gaussian_invert_map(schedule, step_indices, sigma2: float):
    """Scalars (P, R) with naive inversion z_T = P z_0 + R mu (eps taken at the destination step)."""
    P, R = mpmath.mpf(1), mpmath.mpf(0)
    ab = [mpmath.mpf(float(x)) for x in schedule.alpha_bar]
    for k in range(len(step_indices) - 1):
        s, t = int(step_indices[k]), int(step_indices[k + 1])
        A = mpmath.sqrt(ab[t] / ab[s])
        B = mpmath.sqrt(1 - ab[t]) - A * mpmath.sqrt(1 - ab[s])
        v = ab[t] * sigma2 + 1 - ab[t]
        c, a = mpmath.sqrt(1 - ab[t]), mpmath.sqrt(ab[t])
        alpha = A + B * c / v
        beta = -B * c * a / v
        P, R = alpha * P, alpha * R + beta
    return float(P), float(R)


def single_gaussian_exact_invert_map(schedule, step_indices, sigma2: float):
    """Scalars (P, R) solving each implicit step z_t = A z_s + B eps(z_t, t) in closed form.

    With eps(z, t) = (c / v) z - (c a / v) mu the step is affine in z_t:
    z_t (1 - B c / v) = A z_s - B c a mu / v.
    """
    P, R = mpmath.mpf(1), mpmath.mpf(0)
    ab = [mpmath.mpf(float(x)) for x in schedule.alpha_bar]
    for k in range(len(step_indices) - 1):
        s, t = int(step_indices[k]), int(step_indices[k + 1])
        A = mpmath.sqrt(ab[t] / ab[s])
        B = mpmath.sqrt(1 - ab[t]) - A * mpmath.sqrt(1 - ab[s])
        v = ab[t] * sigma2 + 1 - ab[t]
        c, a = mpmath.sqrt(1 - ab[t]), mpmath.sqrt(ab[t])
        den = 1 - B * c / v
        alpha, beta = A / den, -B * c * a / v / den
        P, R = alpha * P, alpha * R + beta
    return float(P), float(R)


def upper_tail(k: int, m: int) -> Fraction:
    """P(Binomial(k, 1/2) >= m) by direct enumeration of outcomes."""
    return Fraction(sum(comb(k, j) for j in range(max(m, 0), k + 1)), 2**k)


def threshold_count_bruteforce(k: int, fpr: float) -> int | None:
    """Smallest m with P(X > m) <= fpr, scanning upward; None if only m = k works."""
    for m in range(k + 1):
        if upper_tail(k, m + 1) <= Fraction(fpr):
            return m if m < k else None
    return None


def majority_accuracy(rho: int, p_flip: float) -> float:
    """Probability the majority of rho noisy copies decodes correctly (ties -> first copy)."""
    q = 1.0 - p_flip
    win = sum(comb(rho, j) * q**j * p_flip ** (rho - j) for j in range(rho // 2 + 1, rho + 1))
    if rho % 2 == 0:
        # tie: rho/2 correct copies; first copy correct with probability 1/2 given the tie
        win += 0.5 * comb(rho, rho // 2) * (q * p_flip) ** (rho // 2)
    return win


def ssim_loop(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """SSIM with explicit loops over channels and non-overlapping windows."""
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vals = []
    for ch in range(a.shape[0]):
        A, B = a[ch], b[ch]
        h, w = A.shape
        H, W = -(-h // window) * window, -(-w // window) * window
        A = np.pad(A, ((0, H - h), (0, W - w)), mode="edge")
        B = np.pad(B, ((0, H - h), (0, W - w)), mode="edge")
        for i in range(0, H, window):
            for j in range(0, W, window):
                x = A[i : i + window, j : j + window].ravel()
                y = B[i : i + window, j : j + window].ravel()
                n = x.size
                mx, my = sum(x) / n, sum(y) / n
                vx = sum((xi - mx) ** 2 for xi in x) / n
                vy = sum((yi - my) ** 2 for yi in y) / n
                cxy = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y)) / n
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def affine_imprint_solution(proxy, x_c, z_target, mu: float, invert_steps: int) -> np.ndarray:
    """Closed-form Imprint optimum for a single-component proxy N(m, sigma2 I).

    Naive inversion is then z_T = P z_0 + R m with scalars from
    :func:`single_gaussian_invert_map`. With z_0 = Q^T (x_c + 255 delta - b) / s
    the loss |z_T - target|^2 + mu |delta|^2 is ridge regression with
    K = (255 P / s) Q^T, and K^T K is a multiple of the identity.
    """
    from wmforge.ddim import SamplerConfig

    idx = SamplerConfig(invert_steps, proxy.schedule.T_train).step_indices
    P, R = single_gaussian_invert_map(proxy.schedule, idx, float(proxy.score.cov_scale[0]))
    codec = proxy.codec
    m = proxy.score.means[0]
    z0 = codec.Q.T @ ((np.asarray(x_c, dtype=np.float64).ravel() - codec.out_bias) / codec.out_scale)
    r = P * z0 + R * m - np.asarray(z_target).ravel()
    kappa = 255.0 * P / codec.out_scale
    delta = -kappa * (codec.Q @ r) / (kappa**2 + mu)
    return delta.reshape(proxy.shape)
