"""Deterministic DDIM sampling (eta = 0) and inversion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from wmforge.errors import ConfigError, ConvergenceError, NumericalError
from wmforge.schedule import MixtureScoreModel, NoiseSchedule, alpha_bar_at, eps_pred

# (x0_estimate, t, s) -> replacement x0 estimate; used by guided regeneration.
X0Hook = Callable[[np.ndarray, int, int], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    """Inference-step layout over the training timesteps.

    ``guidance_scale`` is recorded for parity with text-to-image pipelines
    but has no effect on the analytic model.
    """

    n_steps: int = 50
    T_train: int = 1000
    guidance_scale: float = 7.5
    eta: float = 0.0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if self.n_steps > self.T_train:
            raise ConfigError("n_steps cannot exceed T_train")
        if self.eta != 0.0:
            raise ConfigError("only deterministic DDIM (eta = 0) is supported")

    @property
    def step_indices(self) -> np.ndarray:
        """Ascending timesteps ``[0, stride, ..., T_train]`` (length n_steps + 1)."""
        stride = self.T_train // self.n_steps
        idx = np.arange(self.n_steps + 1) * stride
        idx[-1] = self.T_train
        return idx


def _check(z: np.ndarray, step: int, where: str) -> None:
    if not np.all(np.isfinite(z)):
        raise NumericalError(f"non-finite latent during {where} at step {step}", step=step)


def _coeffs(schedule: NoiseSchedule, t: int, s: int) -> tuple[float, float, float, float]:
    at, as_ = alpha_bar_at(schedule, t), alpha_bar_at(schedule, s)
    return np.sqrt(at), np.sqrt(1.0 - at), np.sqrt(as_), np.sqrt(1.0 - as_)


def ddim_step(model, schedule, z_t, t, s, condition=None, x0_hook: X0Hook | None = None):
    """One deterministic update from timestep ``t`` down to ``s < t``."""
    a_t, c_t, a_s, c_s = _coeffs(schedule, t, s)
    eps = eps_pred(model, schedule, z_t, t, condition)
    x0 = (z_t - c_t * eps) / a_t
    if x0_hook is not None:
        x0 = x0_hook(x0, t, s)
        eps = (z_t - a_t * x0) / c_t
    return a_s * x0 + c_s * eps


def ddim_sample(
    model: MixtureScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    z_T: np.ndarray,
    condition: str | None = None,
    x0_hook: X0Hook | None = None,
) -> np.ndarray:
    """Run the sampler from ``T_train`` to 0 and return the clean latent."""
    z = np.asarray(z_T, dtype=np.float64)
    _check(z, 0, "sampling")
    idx = cfg.step_indices
    for k in range(cfg.n_steps, 0, -1):
        z = ddim_step(model, schedule, z, int(idx[k]), int(idx[k - 1]), condition, x0_hook)
        _check(z, cfg.n_steps - k + 1, "sampling")
    return z


def inversion_coeffs(schedule: NoiseSchedule, s: int, t: int) -> tuple[float, float]:
    """``(A, B)`` with the ascending update ``z_t = A z_s + B eps``."""
    a_t, c_t, a_s, c_s = _coeffs(schedule, t, s)
    A = a_t / a_s
    return A, c_t - A * c_s


def ddim_invert_naive(
    model: MixtureScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    z_0: np.ndarray,
    condition: str | None = None,
) -> np.ndarray:
    """Approximate inversion: each ascending step reuses the noise predicted
    at the current point, evaluated at the destination timestep."""
    z = np.asarray(z_0, dtype=np.float64)
    _check(z, 0, "inversion")
    idx = cfg.step_indices
    for k in range(cfg.n_steps):
        s, t = int(idx[k]), int(idx[k + 1])
        A, B = inversion_coeffs(schedule, s, t)
        z = A * z + B * eps_pred(model, schedule, z, t, condition)
        _check(z, k + 1, "inversion")
    return z


def ddim_invert_exact(
    model: MixtureScoreModel,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    z_0: np.ndarray,
    condition: str | None = None,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Inversion that solves each implicit step by fixed-point iteration,
    so that :func:`ddim_sample` maps the result back onto ``z_0``."""
    if tol <= 0:
        raise ConfigError("tol must be positive")
    z = np.asarray(z_0, dtype=np.float64)
    idx = cfg.step_indices
    for k in range(cfg.n_steps):
        s, t = int(idx[k]), int(idx[k + 1])
        A, B = inversion_coeffs(schedule, s, t)
        base = A * z
        cur = base + B * eps_pred(model, schedule, z, t, condition)
        for _ in range(max_iter):
            nxt = base + B * eps_pred(model, schedule, cur, t, condition)
            _check(nxt, k + 1, "exact inversion")
            resid = float(np.max(np.abs(nxt - cur)))
            cur = nxt
            if resid <= tol:
                break
        else:
            raise ConvergenceError(f"fixed point did not converge at step {k + 1}", residual=resid)
        z = cur
    return z
