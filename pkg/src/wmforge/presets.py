"""Default desk-scale setup shared by the CLI, the experiment runner and the tests.

The benchmark mixture keeps the naive-inversion round trip of a 50-step
sampler under 0.15 (max-abs) on a 4x16x16 latent while still having
visible multi-modal structure. Covers come from a separate, broader
mixture so that they are not samples of the attacked model.
"""

from __future__ import annotations

from wmforge.codec import LinearCodec
from wmforge.pipeline import DiffusionModel
from wmforge.schedule import MixtureScoreModel

LATENT_SHAPE = (4, 16, 16)
BENCH_SEED = 0
BENCH_COMPONENTS = 3
BENCH_MEAN_SCALE = 0.5
BENCH_COV_SCALE = 1.0
COVER_SEED = 99
COVER_COMPONENTS = 4
TARGET_CODEC_SEED = 1

# Gaussian Shading dimensioning for the 1024-value latent
GS_K, GS_RHO = 16, 64
# attribution needs a longer message: 16 bits cannot reach 1e-3 / 1000
ATTR_K, ATTR_RHO = 64, 16
TR_RADIUS = 4
GS_FPR, TR_FPR = 1e-3, 1e-2


def benchmark_mixture(shape=LATENT_SHAPE, seed: int = BENCH_SEED) -> MixtureScoreModel:
    return MixtureScoreModel.random(seed, shape, BENCH_COMPONENTS, BENCH_MEAN_SCALE, BENCH_COV_SCALE)


def cover_mixture(shape=LATENT_SHAPE, seed: int = COVER_SEED) -> MixtureScoreModel:
    return MixtureScoreModel.random(seed, shape, COVER_COMPONENTS, BENCH_MEAN_SCALE, BENCH_COV_SCALE)


def benchmark_model(
    shape=LATENT_SHAPE,
    codec_seed: int = TARGET_CODEC_SEED,
    mismatch: float = 0.0,
    name: str = "bench",
) -> DiffusionModel:
    """Benchmark mixture behind an orthogonal codec; ``mismatch`` perturbs the codec only."""
    codec = LinearCodec(tuple(shape), seed=codec_seed, mismatch=mismatch)
    return DiffusionModel(benchmark_mixture(shape), codec, name=name)
