"""A diffusion model bundle: schedule, noise predictor and codec."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from wmforge.codec import LinearCodec
from wmforge.ddim import SamplerConfig, ddim_invert_exact, ddim_invert_naive, ddim_sample
from wmforge.errors import ConfigError
from wmforge.schedule import MixtureScoreModel, NoiseSchedule


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Encoder/noise-predictor/decoder triple plus its default sampler."""

    score: MixtureScoreModel
    codec: LinearCodec
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule.linear)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    name: str = "model"

    def __post_init__(self):
        if self.score.shape != self.codec.shape:
            raise ConfigError(f"score shape {self.score.shape} != codec shape {self.codec.shape}")
        if self.sampler.T_train != self.schedule.T_train:
            raise ConfigError("sampler T_train does not match the schedule")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.score.shape

    def with_codec(self, codec: LinearCodec, name: str | None = None) -> "DiffusionModel":
        return replace(self, codec=codec, name=name or self.name)

    def sample_latent(self, z_T, condition=None, cfg: SamplerConfig | None = None, x0_hook=None):
        return ddim_sample(self.score, self.schedule, cfg or self.sampler, z_T, condition, x0_hook)

    def generate(self, z_T, condition=None, cfg: SamplerConfig | None = None) -> np.ndarray:
        """Initial latent -> 8-bit image."""
        return self.codec.decode(self.sample_latent(z_T, condition, cfg))

    def invert(self, z_0, condition=None, cfg: SamplerConfig | None = None, exact: bool = False, tol: float = 1e-12):
        cfg = cfg or self.sampler
        if exact:
            return ddim_invert_exact(self.score, self.schedule, cfg, z_0, condition, tol=tol)
        return ddim_invert_naive(self.score, self.schedule, cfg, z_0, condition)

    def recover_latent(self, x, cfg: SamplerConfig | None = None, exact: bool = False) -> np.ndarray:
        """Image -> estimated initial latent (encode, then invert unconditioned)."""
        return self.invert(self.codec.encode(x), cfg=cfg, exact=exact)
