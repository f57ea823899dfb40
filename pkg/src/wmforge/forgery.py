"""Watermark forgery attacks on semantic watermarks.

* PnP: invert the watermarked image with a proxy model, then regenerate a
  cover image from that latent with cover guidance.
* Imprint: gradient descent on an additive pixel perturbation of the cover
  so that its inversion lands on the stolen latent.
* Reprompt: resample from the stolen latent under a different condition.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from wmforge.ddim import SamplerConfig, ddim_invert_exact, ddim_invert_naive, inversion_coeffs
from wmforge.errors import ConfigError, NumericalError, OptimizationError, ShapeError
from wmforge.pipeline import DiffusionModel
from wmforge.schedule import eps_pred, score_jacobian_vp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForgeryConfig:
    """PnP settings.

    ``cover_guidance`` (lambda) and ``guidance_ramp`` (gamma) define the
    per-step pull of the clean-latent estimate toward the cover latent,
    ``w_t = lambda * (1 - t / T) ** gamma``. ``exact_inversion`` swaps the
    attacker's naive inversion for the fixed-point one.
    """

    invert_steps: int = 50
    regen_steps: int = 50
    cover_guidance: float = 0.2
    guidance_ramp: float = 1.0
    condition: str | None = None
    exact_inversion: bool = False

    def __post_init__(self):
        if not 0.0 <= self.cover_guidance <= 1.0:
            raise ConfigError("cover_guidance must lie in [0, 1]")
        if self.guidance_ramp < 0:
            raise ConfigError("guidance_ramp must be non-negative")
        if self.invert_steps < 1 or self.regen_steps < 1:
            raise ConfigError("step counts must be >= 1")


@dataclass(frozen=True)
class ImprintConfig:
    """Imprint settings. The perturbation is optimised in [0, 1] pixel units."""

    n_iters: int = 50
    step_size: float = 1e-2
    perceptual_weight: float = 1e-2
    invert_steps: int = 50
    armijo: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError("n_iters must be >= 1")
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if self.perceptual_weight < 0:
            raise ConfigError("perceptual_weight must be non-negative")


@dataclass
class ImprintResult:
    image: np.ndarray
    delta: np.ndarray
    losses: list[float] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)


def _check_image(model: DiffusionModel, x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-3:] != model.shape:
        raise ShapeError(f"{what} shape {x.shape} does not match model shape {model.shape}")
    return x


def estimate_watermark_latent(proxy: DiffusionModel, x_w: np.ndarray, cfg: ForgeryConfig | None = None) -> np.ndarray:
    """Stolen initial latent: proxy encoder followed by proxy inversion."""
    cfg = cfg or ForgeryConfig()
    x_w = _check_image(proxy, x_w, "watermarked image")
    inv_cfg = SamplerConfig(cfg.invert_steps, proxy.schedule.T_train)
    z0 = proxy.codec.encode(x_w)
    if cfg.exact_inversion:
        return ddim_invert_exact(proxy.score, proxy.schedule, inv_cfg, z0)
    return ddim_invert_naive(proxy.score, proxy.schedule, inv_cfg, z0)


def cover_hook(z_cover: np.ndarray, cfg: ForgeryConfig, T: int):
    lam, gamma = cfg.cover_guidance, cfg.guidance_ramp

    def hook(x0: np.ndarray, t: int, s: int) -> np.ndarray:
        w = lam * (1.0 - t / T) ** gamma
        return (1.0 - w) * x0 + w * z_cover

    return hook


def pnp_regenerate(regen: DiffusionModel, z_hat_T: np.ndarray, x_c: np.ndarray, cfg: ForgeryConfig) -> np.ndarray:
    """Regenerate the cover from the stolen latent with cover guidance."""
    x_c = _check_image(regen, x_c, "cover image")
    regen_cfg = SamplerConfig(cfg.regen_steps, regen.schedule.T_train)
    hook = None
    if cfg.cover_guidance > 0:
        hook = cover_hook(regen.codec.encode(x_c), cfg, regen.schedule.T_train)
    z0 = regen.sample_latent(z_hat_T, cfg.condition, regen_cfg, x0_hook=hook)
    return regen.codec.decode(z0)


def pnp_forge(
    proxy: DiffusionModel,
    x_w: np.ndarray,
    x_c: np.ndarray,
    cfg: ForgeryConfig,
    regen: DiffusionModel | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Full PnP attack; returns the forged image and the estimated latent.

    ``regen`` defaults to the proxy: the attacker only holds public models.
    """
    z_hat = estimate_watermark_latent(proxy, x_w, cfg)
    return pnp_regenerate(regen or proxy, z_hat, x_c, cfg), z_hat


def reprompt(target_like: DiffusionModel, z_hat_T: np.ndarray, condition: str, n_steps: int = 50) -> np.ndarray:
    """New content from the stolen latent under another condition."""
    cfg = SamplerConfig(n_steps, target_like.schedule.T_train)
    return target_like.generate(z_hat_T, condition, cfg)


class _InversionObjective:
    """Loss ``|invert(encode(x_c + 255 delta)) - z_target|^2 + mu |delta|^2``
    and its exact gradient through the naive inversion."""

    def __init__(self, proxy: DiffusionModel, x_c: np.ndarray, z_target: np.ndarray, cfg: ImprintConfig):
        self.model = proxy
        self.x_c = np.asarray(x_c, dtype=np.float64)
        self.z_target = np.asarray(z_target, dtype=np.float64)
        self.mu = cfg.perceptual_weight
        self.idx = SamplerConfig(cfg.invert_steps, proxy.schedule.T_train).step_indices
        self.coeffs = [inversion_coeffs(proxy.schedule, int(s), int(t)) for s, t in zip(self.idx[:-1], self.idx[1:])]

    def _forward(self, delta: np.ndarray) -> list[np.ndarray]:
        m = self.model
        z = m.codec.encode(self.x_c + 255.0 * delta)
        traj = [z]
        for (A, B), t in zip(self.coeffs, self.idx[1:]):
            z = A * z + B * eps_pred(m.score, m.schedule, z, int(t))
            traj.append(z)
        return traj

    def loss(self, delta: np.ndarray) -> float:
        z = self._forward(delta)[-1]
        return float(np.sum((z - self.z_target) ** 2) + self.mu * np.sum(delta**2))

    def loss_and_grad(self, delta: np.ndarray) -> tuple[float, np.ndarray]:
        m = self.model
        traj = self._forward(delta)
        r = traj[-1] - self.z_target
        loss = float(np.sum(r**2) + self.mu * np.sum(delta**2))
        g = 2.0 * r
        for k in range(len(self.coeffs) - 1, -1, -1):
            A, B = self.coeffs[k]
            t = int(self.idx[k + 1])
            g = A * g + B * score_jacobian_vp(m.score, m.schedule, traj[k], t, g)
        codec = m.codec
        gx = (g.reshape(-1) @ codec.Q.T).reshape(codec.shape) / codec.out_scale
        return loss, 255.0 * gx + 2.0 * self.mu * delta


def imprint(
    proxy: DiffusionModel,
    x_c: np.ndarray,
    z_target_T: np.ndarray,
    cfg: ImprintConfig | None = None,
    delta0: np.ndarray | None = None,
) -> ImprintResult:
    """Adversarial perturbation of the cover toward a target initial latent.

    Gradient descent with Armijo backtracking; the step grows by 2x after an
    accepted step. Optimisation runs on unquantised pixels and the result is
    rounded once at the end.
    """
    cfg = cfg or ImprintConfig()
    x_c = _check_image(proxy, x_c, "cover image")
    obj = _InversionObjective(proxy, x_c, z_target_T, cfg)
    delta = np.zeros(proxy.shape) if delta0 is None else np.array(delta0, dtype=np.float64)
    loss, grad = obj.loss_and_grad(delta)
    losses, steps = [loss], []
    alpha = cfg.step_size
    for it in range(cfg.n_iters):
        gg = float(np.sum(grad * grad))
        if gg == 0.0:
            break
        for _ in range(cfg.max_backtracks):
            cand = delta - alpha * grad
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    cand_loss = obj.loss(cand)
            except NumericalError:
                cand_loss = float("nan")
            if not np.isfinite(cand_loss):
                raise OptimizationError(f"loss became non-finite at iteration {it}", losses)
            if cand_loss <= loss - cfg.armijo * alpha * gg:
                break
            alpha *= 0.5
        else:
            log.debug("imprint: line search stalled at iteration %d", it)
            break
        steps.append(alpha)
        delta = cand
        loss, grad = obj.loss_and_grad(delta)
        losses.append(loss)
        alpha *= 2.0
    x = np.clip(np.rint(x_c + 255.0 * delta), 0, proxy.codec.max_value).astype(np.uint8)
    return ImprintResult(x, delta, losses, steps)

