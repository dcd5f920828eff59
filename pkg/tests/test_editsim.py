"""
Tests for the diffusion edit simulator
"""
import numpy as np
import pytest
import torch

from models.codec import CodecConfig, decode, encode, init_codec
from models.editsim import (EDIT_EFFECTS, NULL_PROMPT, DiffusionSchedule, EditSpec, PromptTable, cfg_combine,
                            ddpm_forward, edit, init_denoiser, load_denoiser, reverse_step, save_denoiser,
                            train_denoiser)
from utils.errors import ShapeMismatchError


@pytest.fixture
def schedule():
    return DiffusionSchedule.linear(t_max=20)


@pytest.fixture
def prompts():
    return PromptTable(['tint-red', 'darken'])


@pytest.fixture
def skip_denoiser(prompts):
    """Denoiser whose learned offset is zero, so it predicts the noise implied by the condition"""
    params = init_denoiser(0, prompts, latent_channels=4, hidden=8)
    with torch.no_grad():
        params.model.conv_out.weight.zero_()
        params.model.conv_out.bias.zero_()
    params.model.double()
    return params


def test_linear_schedule_shape(schedule):
    assert schedule.t_max == 20
    assert np.all(np.diff(schedule.a) < 0)
    assert schedule.sigma_at(1) == 0.0
    assert schedule.a_prev(1) == 1.0
    with pytest.raises(ValueError):
        schedule.a_at(0)
    with pytest.raises(ValueError):
        schedule.check_step(21)


def test_schedule_rejects_increasing_coefficients():
    with pytest.raises(ValueError):
        DiffusionSchedule(a=[0.5, 0.9], sigma=[0.0, 0.1])


def test_forward_noising_limits(schedule):
    z0 = np.ones((4, 4, 2))
    noise = np.full((4, 4, 2), -1.0)
    z1 = ddpm_forward(schedule, z0, 1, noise)
    assert np.allclose(z1, np.sqrt(schedule.a_at(1)) - np.sqrt(1 - schedule.a_at(1)))
    zt = ddpm_forward(schedule, z0, 20, noise)
    assert np.allclose(zt, np.sqrt(0.02) - np.sqrt(0.98))
    with pytest.raises(ShapeMismatchError):
        ddpm_forward(schedule, z0, 1, noise[:2])


def test_guidance_identities():
    rng = np.random.default_rng(0)
    f_null, f_img, f_full = rng.normal(size=(3, 2, 5))
    assert np.allclose(cfg_combine(f_null, f_img, f_full, 0.0, 0.0), f_null)
    assert np.allclose(cfg_combine(f_null, f_img, f_full, 1.0, 0.0), f_img)
    assert np.allclose(cfg_combine(f_null, f_img, f_full, 1.0, 1.0), f_full)


def test_prompt_table_null_embeds_to_zero(prompts):
    assert prompts.labels[0] == NULL_PROMPT
    assert not prompts.embedding(NULL_PROMPT).any()
    assert prompts.embedding('darken').any()
    with pytest.raises(ValueError):
        prompts.index('sepia')
    with pytest.raises(ValueError):
        PromptTable(['sepia'])


def test_every_effect_keeps_range(image):
    for name, effect in EDIT_EFFECTS.items():
        out = effect(image)
        assert out.shape == image.shape, name
        assert out.min() >= 0.0 and out.max() <= 1.0, name


def test_last_reverse_step_recovers_condition(schedule, skip_denoiser):
    rng = np.random.default_rng(1)
    cond = rng.normal(size=(4, 4, 4))
    z1 = ddpm_forward(schedule, cond, 1, rng.normal(size=cond.shape))
    out = reverse_step(schedule, skip_denoiser, z1, 1, cond, np.zeros(16), rng.normal(size=cond.shape))
    assert np.allclose(out, cond)


def test_unit_image_guidance_matches_unguided(schedule, skip_denoiser):
    rng = np.random.default_rng(2)
    z_t, cond, noise = (rng.normal(size=(4, 4, 4)) for _ in range(3))
    null_prompt = np.zeros(16)
    plain = reverse_step(schedule, skip_denoiser, z_t, 7, cond, null_prompt, noise)
    guided = reverse_step(schedule, skip_denoiser, z_t, 7, cond, null_prompt, noise, guidance=(1.0, 3.0))
    assert np.allclose(plain, guided)


def test_edit_is_deterministic_per_seed(schedule, prompts, image):
    codec = init_codec(1, CodecConfig(latent_channels=4, hidden=8))
    denoiser = init_denoiser(2, prompts, latent_channels=4, hidden=8)
    spec = EditSpec(prompt='darken', t_edit=5, seed=3)
    a = edit(codec, denoiser, schedule, image, spec, require_trained=False)
    b = edit(codec, denoiser, schedule, image, spec, require_trained=False)
    c = edit(codec, denoiser, schedule, image, EditSpec(prompt='darken', t_edit=5, seed=4),
             require_trained=False)
    assert a.shape == image.shape
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_skip_denoiser_edit_is_codec_roundtrip(schedule, skip_denoiser, image):
    codec = init_codec(1, CodecConfig(latent_channels=4, hidden=8))
    out = edit(codec, skip_denoiser, schedule, image, EditSpec(prompt='darken', t_edit=6, s_i=1.0, seed=1),
               require_trained=False)
    assert np.allclose(out, decode(codec, encode(codec, image)), atol=1e-5)


def test_edit_refuses_untrained_models(schedule, skip_denoiser, image):
    codec = init_codec(1, CodecConfig(latent_channels=4, hidden=8))
    with pytest.raises(ValueError):
        edit(codec, skip_denoiser, schedule, image, EditSpec(t_edit=5))


def test_edit_spec_validation(schedule, prompts):
    with pytest.raises(ValueError):
        EditSpec(t_edit=0).validate(schedule, prompts)
    with pytest.raises(ValueError):
        EditSpec(t_edit=5, s_i=-1).validate(schedule, prompts)
    with pytest.raises(ValueError):
        EditSpec(prompt='hue-rotate', t_edit=5).validate(schedule, prompts)


def test_denoiser_checkpoint_roundtrip(tmp_path, schedule, prompts):
    params = init_denoiser(5, prompts, latent_channels=4, hidden=8)
    path = save_denoiser(params, schedule, tmp_path / 'denoiser.pt')
    loaded, loaded_schedule = load_denoiser(path)
    assert loaded_schedule.t_max == schedule.t_max
    assert np.allclose(loaded_schedule.a, schedule.a)
    assert loaded.prompts.labels == prompts.labels
    for p, q in zip(params.model.parameters(), loaded.model.parameters()):
        assert torch.equal(p, q)


@pytest.mark.slow
def test_denoiser_training_beats_skip_baseline():
    from utils.imaging import generate_corpus
    from models.codec import train_codec
    images = generate_corpus(16, 32, 32, seed=2)
    codec = train_codec(images, epochs=30, seed=0, config=CodecConfig(latent_channels=4, hidden=16),
                        rmse_threshold=0.3)
    params = train_denoiser(codec, images, ['tint-red'], epochs=60, seed=0,
                            schedule=DiffusionSchedule.linear(t_max=20), hidden=16, loss_threshold=1.0)
    assert params.epochs == 60
    assert params.history[-1] < params.history[0]


def test_forward_noising_moments_match_schedule(schedule):
    rng = np.random.default_rng(4)
    n = 10_000
    z0 = np.full(n, 0.7)
    for t in (1, 5, 10, 15, 20):
        a_t = schedule.a_at(t)
        zt = ddpm_forward(schedule, z0, t, rng.standard_normal(n))
        se_mean = np.sqrt((1 - a_t) / n)
        se_var = (1 - a_t) * np.sqrt(2 / (n - 1))
        assert abs(zt.mean() - np.sqrt(a_t) * 0.7) < 3 * se_mean, t
        assert abs(zt.var(ddof=1) - (1 - a_t)) < 3 * se_var, t


def test_guidance_scalar_example():
    f_null, f_img, f_full = np.array([1.0]), np.array([2.0]), np.array([3.0])
    assert cfg_combine(f_null, f_img, f_full, 2.0, 1.5) == pytest.approx([4.5])


def test_guidance_is_affine_in_the_predictions():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 4, 4))
    b = rng.normal(size=(3, 4, 4))
    s_i, s_t, k = 1.7, 4.0, -2.5
    combined = cfg_combine(*(a + k * b), s_i, s_t)
    assert np.allclose(combined, cfg_combine(*a, s_i, s_t) + k * cfg_combine(*b, s_i, s_t))
    # Identical predictions are a fixed point for any scales
    same = np.stack([a[0]] * 3)
    assert np.allclose(cfg_combine(*same, s_i, s_t), a[0])
    with pytest.raises(ShapeMismatchError):
        cfg_combine(a[0], a[1], a[2][:2], s_i, s_t)
