import time

import numpy as np
import pytest

from oracles import affine_imprint_solution
from wmforge.codec import LinearCodec
from wmforge.ddim import SamplerConfig
from wmforge.errors import ConfigError, OptimizationError, ShapeError
from wmforge.evaluation.metrics import psnr
from wmforge.forgery import (
    ForgeryConfig,
    ImprintConfig,
    _InversionObjective,
    estimate_watermark_latent,
    imprint,
    pnp_forge,
    pnp_regenerate,
    reprompt,
)
from wmforge.gaussian_shading import GsKey, gs_bit_accuracy, gs_detect, gs_embed
from wmforge.pipeline import DiffusionModel
from wmforge.presets import benchmark_mixture, benchmark_model, cover_mixture
from wmforge.schedule import MixtureScoreModel

SHAPE = (4, 16, 16)


@pytest.fixture(scope="module")
def gs_batch():
    """100 GS-watermarked latents and images from the benchmark model."""
    model = benchmark_model()
    rng = np.random.default_rng(100)
    keys = [GsKey.random(rng, 16, 64) for _ in range(100)]
    zT = np.stack([gs_embed(k, i, SHAPE) for i, k in enumerate(keys)])
    return model, keys, zT, model.generate(zT)


@pytest.fixture(scope="module")
def covers():
    model = benchmark_model()
    z = cover_mixture().sample(np.random.default_rng(7), 8)
    return model.codec.decode(z)


def _accs(keys, z):
    return np.array([gs_bit_accuracy(k, z[i]) for i, k in enumerate(keys)])


# -- estimation -------------------------------------------------------------

def test_estimation_exact_inversion_without_quantisation(bench, rng):
    zT = rng.standard_normal((3, *SHAPE))
    x = bench.codec.decode_continuous(bench.sample_latent(zT))
    z_hat = estimate_watermark_latent(bench, x, ForgeryConfig(exact_inversion=True))
    assert np.max(np.abs(z_hat - zT)) <= 1e-6


def test_estimation_matched_proxy(gs_batch):
    model, keys, _, x = gs_batch
    assert _accs(keys, estimate_watermark_latent(model, x)).mean() >= 0.95


def test_estimation_unrelated_codec(gs_batch):
    model, keys, _, x = gs_batch
    proxy = benchmark_model(mismatch=1.0)
    assert 0.45 <= _accs(keys, estimate_watermark_latent(proxy, x)).mean() <= 0.55


def test_estimation_deterministic_and_shape_checked(gs_batch):
    model, _, _, x = gs_batch
    assert np.array_equal(estimate_watermark_latent(model, x[:2]), estimate_watermark_latent(model, x[:2]))
    with pytest.raises(ShapeError):
        estimate_watermark_latent(model, np.zeros((4, 8, 8), np.uint8))


# -- PnP --------------------------------------------------------------------

def test_pnp_without_guidance_is_plain_sampling(gs_batch, covers):
    model, _, zT, _ = gs_batch
    out = pnp_regenerate(model, zT[:4], covers[:4], ForgeryConfig(cover_guidance=0.0))
    assert np.array_equal(out, model.generate(zT[:4]))


def test_pnp_full_override_returns_cover(gs_batch, covers):
    model, _, zT, _ = gs_batch
    cfg = ForgeryConfig(cover_guidance=1.0, guidance_ramp=0.0)
    out = pnp_regenerate(model, zT[:8], covers, cfg)
    ref = model.codec.decode(model.codec.encode(covers))
    for i in range(8):
        assert psnr(out[i], ref[i]) >= 45


def test_pnp_matched_detection(gs_batch, covers):
    model, keys, _, x = gs_batch
    forged, z_hat = pnp_forge(model, x[:20], np.resize(covers, (20, *SHAPE)), ForgeryConfig())
    assert forged.dtype == np.uint8 and z_hat.shape == (20, *SHAPE)
    rec = model.recover_latent(forged)
    assert sum(gs_detect(keys[i], rec[i]).detected for i in range(20)) >= 19


@pytest.fixture(scope="module")
def self_cover(gs_batch):
    model, keys, _, x = gs_batch
    xw = x[:10]
    out = {lam: pnp_forge(model, xw, xw, ForgeryConfig(cover_guidance=lam))[0] for lam in (0.0, 0.2)}
    out["full"] = pnp_forge(model, xw, xw, ForgeryConfig(cover_guidance=1.0, guidance_ramp=0.0))[0]
    med = {k: np.median([psnr(v[i], xw[i]) for i in range(10)]) for k, v in out.items()}
    return model, keys, out, med


def test_pnp_self_cover_keeps_detection(self_cover):
    model, keys, out, med = self_cover
    rec = model.recover_latent(out[0.2])
    assert all(gs_detect(keys[i], rec[i]).detected for i in range(10))
    assert med["full"] > med[0.0]


@pytest.mark.xfail(strict=True, reason="x0 blending inflates near-identity flows; see ledger")
def test_pnp_self_cover_light_guidance_raises_psnr(self_cover):
    _, _, _, med = self_cover
    assert med[0.2] > med[0.0]


def test_pnp_regen_defaults_to_proxy(gs_batch, covers):
    model, _, _, x = gs_batch
    other = benchmark_model(codec_seed=5)
    a, _ = pnp_forge(model, x[:2], covers[:2], ForgeryConfig())
    b, _ = pnp_forge(model, x[:2], covers[:2], ForgeryConfig(), regen=model)
    c, _ = pnp_forge(model, x[:2], covers[:2], ForgeryConfig(), regen=other)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_forgery_config_validation():
    with pytest.raises(ConfigError):
        ForgeryConfig(cover_guidance=1.5)
    with pytest.raises(ConfigError):
        ForgeryConfig(guidance_ramp=-1)
    with pytest.raises(ConfigError):
        ForgeryConfig(invert_steps=0)
    with pytest.raises(ConfigError):
        ImprintConfig(n_iters=0)
    with pytest.raises(ConfigError):
        ImprintConfig(step_size=0)


# -- Reprompt -----------------------------------------------------------------

@pytest.fixture(scope="module")
def labelled_model():
    base = benchmark_mixture()
    score = MixtureScoreModel(
        base.weights, base.means, base.cov_scale, base.shape,
        class_map={**base.class_map, "all": (0, 1, 2)},
    )
    return DiffusionModel(score, LinearCodec(SHAPE, seed=1))


def test_reprompt_all_components_equals_unconditioned(labelled_model, rng):
    z = rng.standard_normal((2, *SHAPE))
    assert np.array_equal(reprompt(labelled_model, z, "all"), labelled_model.generate(z))


def test_reprompt_detection_and_content_change(labelled_model, gs_batch):
    _, keys, _, _ = gs_batch
    m = labelled_model
    x = m.generate(np.stack([gs_embed(k, i, SHAPE) for i, k in enumerate(keys)]))
    z_hat = estimate_watermark_latent(m, x)
    a = reprompt(m, z_hat, "class0")
    b = reprompt(m, z_hat, "class2")
    assert np.mean(np.abs(a.astype(float) - b.astype(float))) > 0
    ra, rb = m.recover_latent(a), m.recover_latent(b)
    assert _accs(keys, ra).mean() >= 0.95 and _accs(keys, rb).mean() >= 0.95
    assert all(gs_detect(keys[i], ra[i]).detected and gs_detect(keys[i], rb[i]).detected for i in range(10))


def test_reprompt_unknown_condition(labelled_model, rng):
    with pytest.raises(ConfigError):
        reprompt(labelled_model, rng.standard_normal(SHAPE), "nope")


# -- Imprint ------------------------------------------------------------------

def _small_model(n_components=3, seed=3):
    shape = (1, 8, 8)
    score = MixtureScoreModel.random(seed, shape, n_components, 0.5, 1.0)
    return DiffusionModel(score, LinearCodec(shape, seed=2))


def test_imprint_gradient_matches_finite_differences():
    model = _small_model()
    rng = np.random.default_rng(0)
    cfg = ImprintConfig(invert_steps=10, perceptual_weight=0.05)
    for _ in range(10):
        x_c = model.codec.decode(model.score.sample(rng, 1)[0]).astype(float)
        obj = _InversionObjective(model, x_c, rng.standard_normal(model.shape), cfg)
        delta = 0.01 * rng.standard_normal(model.shape)
        _, g = obj.loss_and_grad(delta)
        h = 1e-6
        fd = np.zeros(model.shape)
        for i in np.ndindex(model.shape):
            e = np.zeros(model.shape)
            e[i] = h
            fd[i] = (obj.loss(delta + e) - obj.loss(delta - e)) / (2 * h)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_imprint_converges_to_affine_optimum():
    model = _small_model(n_components=1)
    rng = np.random.default_rng(1)
    x_c = model.codec.decode(model.score.sample(rng, 1)[0])
    target = rng.standard_normal(model.shape)
    cfg = ImprintConfig(n_iters=200, invert_steps=10, perceptual_weight=1e-2)
    res = imprint(model, x_c, target, cfg)
    ref = affine_imprint_solution(model, x_c, target, 1e-2, 10)
    assert np.linalg.norm(res.delta - ref) <= 1e-4 * np.linalg.norm(ref)


def test_imprint_loss_monotone_and_valid(gs_batch, covers):
    model, _, zT, _ = gs_batch
    res = imprint(model, covers[0], zT[0], ImprintConfig(n_iters=15))
    assert np.all(np.diff(res.losses) <= 0)
    assert len(res.losses) == len(res.step_sizes) + 1
    assert res.image.dtype == np.uint8 and res.image.shape == SHAPE
    again = imprint(model, covers[0], zT[0], ImprintConfig(n_iters=15))
    assert np.array_equal(res.image, again.image) and res.losses == again.losses


def test_imprint_own_latent_is_fixed_point(bench, covers):
    z_own = bench.recover_latent(covers[1])
    res = imprint(bench, covers[1], z_own, ImprintConfig(n_iters=5))
    assert res.losses[0] <= 1e-20
    assert np.max(np.abs(res.delta)) == 0.0
    assert np.array_equal(res.image, covers[1])


def test_imprint_divergence_raises(bench, covers, rng):
    with pytest.raises(OptimizationError) as info:
        imprint(bench, covers[0], rng.standard_normal(SHAPE), ImprintConfig(n_iters=3, step_size=1e300))
    assert info.value.trace


def test_imprint_detected_on_benchmark(gs_batch, covers):
    model, keys, zT, _ = gs_batch
    t0 = time.perf_counter()
    res = imprint(model, covers[2], zT[3])
    assert time.perf_counter() - t0 < 60
    assert gs_detect(keys[3], model.recover_latent(res.image)).detected
