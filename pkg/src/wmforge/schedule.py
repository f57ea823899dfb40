"""Noise schedule and the closed-form Gaussian-mixture noise predictor.

The mixture stands in for a trained denoiser: every marginal p_t of the
forward process stays a Gaussian mixture, so the score, the predicted noise
and its Jacobian are all available in closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


from wmforge.errors import ConfigError, NumericalError, ShapeError
from wmforge.seeding import MIXTURE, structural_rng

RESP_FLOOR = 1e-300
_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete DDPM-style schedule with ``alpha_bar[0] == 1``."""

    T_train: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.T_train,):
            raise ConfigError(f"beta must have length T_train={self.T_train}, got {beta.shape}")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("all beta values must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", np.asarray(self.alpha_bar, dtype=np.float64))

    @classmethod
    def from_betas(cls, beta: Sequence[float]) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
        return cls(T_train=len(beta), beta=beta, alpha_bar=alpha_bar)

    @classmethod
    def linear(cls, T_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, T_train))


def alpha_bar_at(schedule: NoiseSchedule, t: int) -> float:
    """Cumulative signal level at integer timestep ``t`` (``0 <= t <= T_train``)."""
    if not 0 <= t <= schedule.T_train:
        raise IndexError(f"timestep {t} outside [0, {schedule.T_train}]")
    return float(schedule.alpha_bar[t])


@dataclass(frozen=True, eq=False)
class MixtureScoreModel:
    """Isotropic Gaussian mixture over flattened latents of a fixed shape.

    Attributes:
        weights: mixture weights, shape (m,).
        means: component means, shape (m, c*h*w), row-major flattening.
        cov_scale: per-component isotropic variance, shape (m,).
        shape: latent shape (c, h, w).
        class_map: condition label -> component indices.
    """

    weights: np.ndarray
    means: np.ndarray
    cov_scale: np.ndarray
    shape: tuple[int, int, int]
    class_map: Mapping[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.asarray(self.means, dtype=np.float64)
        s2 = np.asarray(self.cov_scale, dtype=np.float64)
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3:
            raise ConfigError(f"latent shape must be (c, h, w), got {shape}")
        d = int(np.prod(shape))
        m = w.shape[0]
        if mu.ndim != 2:
            mu = mu.reshape(m, -1)
        if mu.shape != (m, d):
            raise ConfigError(f"means must be ({m}, {d}), got {mu.shape}")
        if s2.shape != (m,):
            raise ConfigError(f"cov_scale must have length {m}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigError("weights must be non-negative and sum to 1")
        if np.any(s2 <= 0):
            raise ConfigError("cov_scale entries must be positive")
        cmap = {}
        for label, idx in dict(self.class_map).items():
            idx = tuple(int(i) for i in idx)
            if not idx:
                raise ConfigError(f"condition {label!r} selects no components")
            if any(i < 0 or i >= m for i in idx):
                raise ConfigError(f"condition {label!r} references a missing component")
            cmap[str(label)] = idx
        for name, arr in (("weights", w), ("means", mu), ("cov_scale", s2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "class_map", cmap)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def components(self, condition: str | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Weights, means and variances of the (possibly conditioned) mixture."""
        if condition is None:
            return self.weights, self.means, self.cov_scale
        if condition not in self.class_map:
            raise ConfigError(f"unknown condition label {condition!r}")
        idx = self.class_map[condition]
        if sorted(set(idx)) == list(range(self.n_components)):
            return self.weights, self.means, self.cov_scale
        idx = np.asarray(idx)
        w = self.weights[idx]
        if w.sum() <= 0:
            raise ConfigError(f"condition {condition!r} selects only zero-weight components")
        return w / w.sum(), self.means[idx], self.cov_scale[idx]

    def sample(self, rng: np.random.Generator, n: int, condition: str | None = None) -> np.ndarray:
        """Draw ``n`` clean latents from the (conditioned) mixture."""
        w, mu, s2 = self.components(condition)
        comp = rng.choice(len(w), size=n, p=w)
        z = mu[comp] + np.sqrt(s2[comp])[:, None] * rng.standard_normal((n, self.dim))
        return z.reshape((n, *self.shape))

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cov_scale": self.cov_scale.tolist(),
            "class_map": {k: list(v) for k, v in self.class_map.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "MixtureScoreModel":
        try:
            return cls(
                weights=doc["weights"],
                means=doc["means"],
                cov_scale=doc["cov_scale"],
                shape=tuple(doc["shape"]),
                class_map=doc.get("class_map", {}),
            )
        except KeyError as exc:
            raise ConfigError(f"model document is missing field {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | Path) -> "MixtureScoreModel":
        return cls.from_json(json.loads(Path(path).read_text()))

    @classmethod
    def random(
        cls,
        seed: int,
        shape: tuple[int, int, int] = (4, 16, 16),
        n_components: int = 3,
        mean_scale: float = 1.0,
        cov_scale: float = 0.5,
    ) -> "MixtureScoreModel":
        """Seeded mixture with N(0, mean_scale^2) means and one label per component."""
        rng = structural_rng(seed, MIXTURE)
        d = int(np.prod(shape))
        means = mean_scale * rng.standard_normal((n_components, d))
        return cls(
            weights=np.full(n_components, 1.0 / n_components),
            means=means,
            cov_scale=np.full(n_components, cov_scale),
            shape=shape,
            class_map={f"class{i}": (i,) for i in range(n_components)},
        )


def _flatten(model: MixtureScoreModel, z: np.ndarray) -> tuple[np.ndarray, tuple[int, ...]]:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-3:] != model.shape:
        raise ShapeError(f"latent shape {z.shape} does not end with model shape {model.shape}")
    lead = z.shape[:-3]
    return z.reshape(-1, model.dim), lead


def _responsibilities(z, w, mu, s2, a):
    """Posterior component weights and scaled residuals (z - a mu_i) / v_i."""
    v = a * a * s2 + (1.0 - a * a)
    diff = z[:, None, :] - a * mu[None, :, :]
    sq = np.einsum("bmd,bmd->bm", diff, diff)
    logp = np.log(np.maximum(w, RESP_FLOOR)) - 0.5 * sq / v - 0.5 * z.shape[1] * np.log(v)
    logp -= logp.max(axis=1, keepdims=True)
    r = np.maximum(np.exp(logp), RESP_FLOOR)
    r /= r.sum(axis=1, keepdims=True)
    return r, diff / v[None, :, None], v


def eps_pred(
    model: MixtureScoreModel,
    schedule: NoiseSchedule,
    z: np.ndarray,
    t: int,
    condition: str | None = None,
) -> np.ndarray:
    """Predicted noise ``-sqrt(1 - abar_t) * grad log p_t(z)``.

    Accepts a single latent or any batch with trailing shape ``model.shape``.
    """
    ab = alpha_bar_at(schedule, t)
    a = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)
    w, mu, s2 = model.components(condition)
    flat, lead = _flatten(model, z)
    out = np.empty_like(flat)
    for lo in range(0, flat.shape[0], _CHUNK):
        zc = flat[lo : lo + _CHUNK]
        r, u, _ = _responsibilities(zc, w, mu, s2, a)
        out[lo : lo + _CHUNK] = c * np.einsum("bm,bmd->bd", r, u)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite noise prediction at t={t}", step=t)
    return out.reshape(*lead, *model.shape)


def score_jacobian_vp(
    model: MixtureScoreModel,
    schedule: NoiseSchedule,
    z: np.ndarray,
    t: int,
    v: np.ndarray,
    condition: str | None = None,
) -> np.ndarray:
    """Jacobian of :func:`eps_pred` w.r.t. ``z`` applied to ``v``.

    The Jacobian is a scaled Hessian of log p_t and therefore symmetric, so
    this is both the JVP and the VJP.
    """
    ab = alpha_bar_at(schedule, t)
    a = np.sqrt(ab)
    c = np.sqrt(1.0 - ab)
    w, mu, s2 = model.components(condition)
    flat, lead = _flatten(model, z)
    vf = np.broadcast_to(np.asarray(v, dtype=np.float64), np.broadcast_shapes(np.shape(v), np.shape(z)))
    vf = vf.reshape(-1, model.dim)
    out = np.empty_like(flat)
    for lo in range(0, flat.shape[0], _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        r, u, var = _responsibilities(flat[sl], w, mu, s2, a)
        vc = vf[sl]
        proj = np.einsum("bmd,bd->bm", u, vc)
        ubar = np.einsum("bm,bmd->bd", r, u)
        ubar_v = np.einsum("bd,bd->b", ubar, vc)
        term = (r / var[None, :]).sum(axis=1)[:, None] * vc
        term -= np.einsum("bm,bmd->bd", r * proj, u)
        term += ubar * ubar_v[:, None]
        out[sl] = c * term
    return out.reshape(*lead, *model.shape)
