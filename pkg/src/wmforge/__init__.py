"""Analytic testbed for semantic diffusion watermarks and forgery attacks."""

from wmforge.codec import LinearCodec
from wmforge.ddim import SamplerConfig, ddim_invert_exact, ddim_invert_naive, ddim_sample
from wmforge.pipeline import DiffusionModel
from wmforge.schedule import MixtureScoreModel, NoiseSchedule

__all__ = [
    "DiffusionModel",
    "LinearCodec",
    "MixtureScoreModel",
    "NoiseSchedule",
    "SamplerConfig",
    "ddim_invert_exact",
    "ddim_invert_naive",
    "ddim_sample",
]

__version__ = "0.1.0"
